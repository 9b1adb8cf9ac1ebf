"""Mini-batch training, evaluation and network diagnostics.

Metrics are written as JSON lines, one object per record.  Every record
carries ``"schema": "relpsp.metrics/1"`` and a ``"kind"``; epoch records
look like::

    {"schema": "relpsp.metrics/1", "kind": "epoch", "epoch": 3,
     "train_accuracy": 0.97, "test_accuracy": 0.96, "mean_loss": 0.41,
     "dead_fraction": {"dense1": 0.02, "dense2": 0.0},
     "spike_time_hist": {"dense1": {...}, "dense2": {...}},
     "dtdv_hist": {...}}

Histograms are ``{"edges": [...], "fraction": [...], "count": n, ...}``
with fractions summing to one.  Spike-time histograms add ``no_spike``, the
share of neurons that stayed silent (already included in the sum).
Nothing time-dependent goes into the stream, so a seeded run reproduces it
byte for byte.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from .backprop import backward, batch_loss_and_grad
from .config import TrainConfig
from .data import Checkpoint, Dataset, save_checkpoint
from .encoding import EncoderConfig, encode_image
from .topology import ArchitectureSpec, Network, fan_in, param_shapes, parse_architecture

log = logging.getLogger(__name__)

SCHEMA = "relpsp.metrics/1"
DTDV_EDGES = 10.0 ** np.arange(-4.0, 8.25, 0.25)


class NumericError(FloatingPointError):
    pass


def init_weights(arch: ArchitectureSpec | str, seed: int, low: float = 0.0, high: float = 2.0,
                 dtype=np.float32) -> list[np.ndarray]:
    """Uniform ``[low, high] / sqrt(fan_in)`` weights; positive mean so fresh neurons fire."""
    if isinstance(arch, str):
        arch = parse_architecture(arch)
    rng = np.random.default_rng(seed)
    out = []
    for shape in param_shapes(arch):
        scale = 1.0 / math.sqrt(fan_in(shape))
        out.append(rng.uniform(low * scale, high * scale, size=shape).astype(dtype))
    return out


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros(p.shape) for p in params]
        self.v = [np.zeros(p.shape) for p in params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if self.weight_decay:
                g = g + self.weight_decay * p
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= (self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)).astype(p.dtype)


class SGD:
    def __init__(self, params, lr=1e-2, momentum=0.0, weight_decay=0.0):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buf = [np.zeros(p.shape) for p in params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        for p, g, b in zip(self.params, grads, self.buf):
            if self.weight_decay:
                g = g + self.weight_decay * p
            b *= self.momentum
            b += g
            p -= (self.lr * b).astype(p.dtype)


def make_optimizer(params, cfg):
    if cfg.name == "adam":
        return Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    return SGD(params, cfg.lr, cfg.momentum, cfg.weight_decay)


class Histogram:
    """Fixed-edge histogram; values outside the edges land in the end bins."""

    def __init__(self, edges):
        self.edges = np.asarray(edges, dtype=np.float64)
        self.counts = np.zeros(len(self.edges) - 1, dtype=np.int64)
        self.extra = {}
        self.max = -np.inf
        self.min = np.inf

    def add(self, values):
        values = np.asarray(values, dtype=np.float64).ravel()
        if values.size == 0:
            return
        self.max = max(self.max, float(values.max()))
        self.min = min(self.min, float(values.min()))
        idx = np.clip(np.searchsorted(self.edges, values, side="right") - 1, 0, len(self.counts) - 1)
        self.counts += np.bincount(idx, minlength=len(self.counts))

    def tally(self, key, n):
        self.extra[key] = self.extra.get(key, 0) + int(n)

    @property
    def total(self) -> int:
        return int(self.counts.sum()) + sum(self.extra.values())

    def to_dict(self) -> dict:
        total = max(self.total, 1)
        d = {
            "edges": [float(e) for e in self.edges],
            "fraction": [c / total for c in self.counts.tolist()],
            "count": self.total,
            "max": self.max if np.isfinite(self.max) else None,
            "min": self.min if np.isfinite(self.min) else None,
        }
        for key, n in self.extra.items():
            d[key] = n / total
        return d


def spike_time_histogram(t_max: float, bins: int = 40) -> Histogram:
    return Histogram(np.linspace(0.0, t_max, bins + 1))


@dataclass
class LayerStats:
    """Running per-layer statistics over a pass through a dataset."""

    network: Network
    time_hist: dict = field(default_factory=dict)
    dtdv: Histogram = field(default_factory=lambda: Histogram(DTDV_EDGES))
    ever_spiked: dict = field(default_factory=dict)
    decision_frac_sum: float = 0.0
    spiked_frac_sum: float = 0.0
    n_samples: int = 0

    def update(self, out, traces):
        net = self.network
        spiking = net.spiking_layers()
        decision = out.min(axis=1)
        hidden_before = np.zeros(len(out))
        hidden_spiked = np.zeros(len(out))
        n_hidden = 0
        for k in spiking:
            layer = net.layers[k]
            lt = net.layer_trace(traces, k)
            alive = lt.n_causal > 0
            b = len(out)
            alive_s = alive.reshape(b, -1)
            times_s = lt.times.reshape(b, -1)
            hist = self.time_hist.setdefault(layer.name, spike_time_histogram(net.t_max))
            hist.add(lt.times[alive])
            hist.tally("no_spike", (~alive).sum())
            self.dtdv.add(1.0 / np.abs(lt.slope[alive].astype(np.float64)))
            seen = alive_s.any(axis=0)
            self.ever_spiked[layer.name] = self.ever_spiked.get(layer.name, np.zeros_like(seen)) | seen
            if k != spiking[-1]:
                hidden_before += (alive_s & (times_s < decision[:, None])).sum(axis=1)
                hidden_spiked += alive_s.sum(axis=1)
                n_hidden += alive_s.shape[1]
        if n_hidden:
            self.decision_frac_sum += float((hidden_before / n_hidden).sum())
            self.spiked_frac_sum += float((hidden_spiked / n_hidden).sum())
        self.n_samples += len(out)

    def dead_fraction(self) -> dict:
        return {name: float(1.0 - seen.mean()) for name, seen in self.ever_spiked.items()}


@dataclass
class EvalResult:
    accuracy: float
    mean_loss: float
    decision_fraction: float
    spiked_fraction: float
    dead_fraction: dict
    spike_time_hist: dict
    dtdv_hist: dict
    n: int

    def to_record(self, kind="eval", **extra) -> dict:
        rec = {"schema": SCHEMA, "kind": kind, **extra,
               "accuracy": self.accuracy, "mean_loss": self.mean_loss,
               "hidden_spiked_before_decision": self.decision_fraction,
               "hidden_spiked_total": self.spiked_fraction,
               "dead_fraction": self.dead_fraction,
               "spike_time_hist": self.spike_time_hist, "dtdv_hist": self.dtdv_hist, "n": self.n}
        return rec


def encode_dataset(ds: Dataset, encoder: EncoderConfig, dtype=np.float32) -> np.ndarray:
    return encode_image(ds.images.reshape(len(ds), -1), encoder, dtype)


def evaluate(network: Network, times_in: np.ndarray, labels: np.ndarray, batch_size: int = 500) -> EvalResult:
    """Accuracy under the earliest-output-spike rule plus sparsity statistics.

    ``hidden_spiked_before_decision`` is the mean share of hidden neurons
    that fired strictly before the first output spike of the same sample.
    """
    stats = LayerStats(network)
    correct = 0
    loss_sum = 0.0
    for start in range(0, len(labels), batch_size):
        xb = times_in[start:start + batch_size]
        yb = labels[start:start + batch_size]
        out, traces = network.forward(xb)
        losses, _ = batch_loss_and_grad(out, yb)
        loss_sum += float(losses.sum())
        correct += int((np.argmin(out, axis=1) == yb).sum())
        stats.update(out, traces)
    n = max(len(labels), 1)
    return EvalResult(
        accuracy=correct / n,
        mean_loss=loss_sum / n,
        decision_fraction=stats.decision_frac_sum / n,
        spiked_fraction=stats.spiked_frac_sum / n,
        dead_fraction=stats.dead_fraction(),
        spike_time_hist={k: h.to_dict() for k, h in stats.time_hist.items()},
        dtdv_hist=stats.dtdv.to_dict(),
        n=len(labels),
    )


def dead_neuron_census(network: Network, probe: np.ndarray, batch_size: int = 500) -> dict:
    """Per spiking layer, the share of neurons silent on every probe sample."""
    stats = LayerStats(network)
    for start in range(0, len(probe), batch_size):
        out, traces = network.forward(probe[start:start + batch_size])
        stats.update(out, traces)
    return stats.dead_fraction()


class MetricsSink:
    """Append-only JSON-lines writer."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.records = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, record: dict):
        self.records.append(record)
        if self.path:
            with open(self.path, "a") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")


@dataclass
class TrainResult:
    network: Network
    history: list
    best_accuracy: float
    best_epoch: int


def build_network(cfg: TrainConfig, params=None, dtype=np.float32) -> Network:
    arch = parse_architecture(cfg.model.architecture)
    if params is None:
        params = init_weights(arch, cfg.training.seed, cfg.training.init_low, cfg.training.init_high, dtype)
    thresholds = [cfg.model.threshold] * len(params)
    return Network(arch, params, thresholds, cfg.model.kernel, cfg.model.t_max, cfg.model.tau)


def make_checkpoint(network: Network, cfg: TrainConfig, step: int) -> Checkpoint:
    return Checkpoint(cfg.model.architecture, [p.copy() for p in network.params], network.thresholds,
                      network.kernel, vars(cfg.encoder).copy(),
                      {"optimizer": vars(cfg.optimizer).copy(), "t_max": network.t_max, "tau": network.tau,
                       "seed": cfg.training.seed, "dataset": cfg.data.dataset},
                      step)


def _dump_bad_batch(out_dir, xb, yb, out, epoch, step):
    if out_dir is None:
        return None
    path = Path(out_dir) / f"nan_dump_e{epoch}_s{step}.npz"
    np.savez(path, inputs=xb, labels=yb, outputs=out)
    return path


def train(cfg: TrainConfig, train_set: Dataset, test_set: Dataset | None = None,
          sink: MetricsSink | None = None, out_dir=None, network: Network | None = None) -> TrainResult:
    """Train with no clipping or gradient normalisation of any kind.

    Writes ``best.ckpt`` (highest test accuracy) and ``final.ckpt`` into
    ``out_dir`` when given, and one epoch record per epoch to ``sink``.
    """
    cfg.validate()
    if cfg.training.deterministic:
        numba.set_num_threads(1)
    elif cfg.training.threads:
        numba.set_num_threads(min(cfg.training.threads, numba.config.NUMBA_NUM_THREADS))
    sink = sink or MetricsSink()
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    encoder = EncoderConfig(cfg.encoder.t_min, cfg.encoder.t_max_input, cfg.encoder.intensity_max)
    net = network or build_network(cfg)
    x_train = encode_dataset(train_set, encoder, net.dtype)
    y_train = train_set.labels
    x_test = encode_dataset(test_set, encoder, net.dtype) if test_set is not None else None
    probe_n = min(cfg.training.census_probe, len(y_train))
    probe = x_train[:probe_n]

    opt = make_optimizer(net.params, cfg.optimizer)
    rng = np.random.default_rng(cfg.training.seed + 1)
    bs = cfg.training.batch_size
    history = []
    best_acc, best_epoch = -1.0, 0
    for epoch in range(1, cfg.training.epochs + 1):
        if cfg.optimizer.decay_every and epoch > 1 and (epoch - 1) % cfg.optimizer.decay_every == 0:
            opt.lr *= cfg.optimizer.lr_decay
        perm = rng.permutation(len(y_train))
        stats = LayerStats(net)
        loss_sum, correct = 0.0, 0
        for start in range(0, len(perm), bs):
            idx = perm[start:start + bs]
            xb, yb = x_train[idx], y_train[idx]
            out, traces = net.forward(xb)
            losses, g_out = batch_loss_and_grad(out, yb)
            if not np.all(np.isfinite(losses)):
                dump = _dump_bad_batch(out_dir, xb, yb, out, epoch, opt.t)
                raise NumericError(f"non-finite loss at epoch {epoch}, step {opt.t}; batch dumped to {dump}")
            try:
                grads = backward(net, traces, g_out / len(idx))
            except FloatingPointError as exc:
                dump = _dump_bad_batch(out_dir, xb, yb, out, epoch, opt.t)
                raise NumericError(f"{exc} at epoch {epoch}, step {opt.t}; batch dumped to {dump}") from exc
            opt.step(grads)
            loss_sum += float(losses.sum())
            correct += int((np.argmin(out, axis=1) == yb).sum())
            stats.update(out, traces)

        record = {
            "schema": SCHEMA, "kind": "epoch", "epoch": epoch,
            "train_accuracy": correct / len(y_train),
            "mean_loss": loss_sum / len(y_train),
            "dead_fraction": dead_neuron_census(net, probe),
            "spike_time_hist": {k: h.to_dict() for k, h in stats.time_hist.items()},
            "dtdv_hist": stats.dtdv.to_dict(),
        }
        evaluated = x_test is not None and (epoch % cfg.training.eval_every == 0 or epoch == cfg.training.epochs)
        if evaluated:
            ev = evaluate(net, x_test, test_set.labels)
            record["test_accuracy"] = ev.accuracy
            record["test_loss"] = ev.mean_loss
            if ev.accuracy > best_acc:
                best_acc, best_epoch = ev.accuracy, epoch
                if out_dir is not None:
                    save_checkpoint(make_checkpoint(net, cfg, opt.t), Path(out_dir) / "best.ckpt")
        sink.write(record)
        history.append(record)
        log.info("epoch %d loss %.4f train %.4f test %s", epoch, record["mean_loss"],
                 record["train_accuracy"], record.get("test_accuracy"))
    if out_dir is not None:
        save_checkpoint(make_checkpoint(net, cfg, opt.t), Path(out_dir) / "final.ckpt")
    return TrainResult(net, history, best_acc, best_epoch)
