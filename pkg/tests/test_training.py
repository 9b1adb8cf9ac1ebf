import json
import math

import numpy as np
import pytest

from relpsp import training
from relpsp.config import TrainConfig
from relpsp.data import Dataset, load_checkpoint, load_mnist
from relpsp.encoding import EncoderConfig, encode_image
from relpsp.topology import Network, param_shapes, parse_architecture
from relpsp.training import (
    SGD, Adam, Histogram, MetricsSink, NumericError, dead_neuron_census, evaluate, init_weights, train,
)


def _toy_dataset(rng, n=64, classes=4, side=6):
    """Separable images: class c lights up row block c."""
    labels = np.arange(n) % classes
    imgs = rng.integers(0, 40, (n, side, side)).astype(np.uint8)
    for k, c in enumerate(labels):
        imgs[k, c, :] = 255
    return Dataset(imgs, labels, "train")


def _cfg(arch="36-16-4", epochs=3, **kw):
    cfg = TrainConfig()
    cfg.model.architecture = arch
    cfg.training.epochs = epochs
    cfg.training.batch_size = kw.pop("batch_size", 16)
    cfg.training.deterministic = True
    cfg.training.census_probe = 64
    for k, v in kw.items():
        section, key = k.split("__")
        setattr(getattr(cfg, section), key, v)
    return cfg


class TestInit:
    def test_deterministic(self):
        a = init_weights("784-400-10", 3)
        b = init_weights("784-400-10", 3)
        for x, y in zip(a, b):
            assert np.array_equal(x, y)

    def test_range_and_mean(self):
        for w in init_weights("784-400-10", 0):
            n = w.shape[0]
            assert w.min() >= 0 and w.max() <= 2 / math.sqrt(n)
            sigma = (2 / math.sqrt(n)) / math.sqrt(12) / math.sqrt(w.size)
            assert abs(w.mean() - 1 / math.sqrt(n)) < 3 * sigma

    def test_conv_fan_in(self):
        w = init_weights("28x28-16C5-P2-32C5-P2-800-128-10", 0)
        assert [x.shape for x in w] == param_shapes(parse_architecture("28x28-16C5-P2-32C5-P2-800-128-10"))
        assert w[1].max() <= 2 / math.sqrt(16 * 25)

    def test_fresh_net_hidden_fire(self, mnist_dir):
        ds = load_mnist(mnist_dir, "test").subset(50)
        net = Network("784-400-10", init_weights("784-400-10", 0))
        _, traces = net.forward(encode_image(ds.images.reshape(50, -1)))
        assert (~traces[0].dead).mean() >= 0.99


class TestOptimizers:
    def test_adam_matches_scalar_reference(self):
        lr, b1, b2, eps = 1e-2, 0.9, 0.999, 1e-8
        p = np.array([3.0])
        opt = Adam([p], lr, b1, b2, eps)
        x, m, v = 3.0, 0.0, 0.0
        for t in range(1, 101):
            g = 2 * (x - 1) + math.sin(t)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            x -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
            opt.step([np.array([2 * (p[0] - 1) + math.sin(t)])])
            assert abs(p[0] - x) < 1e-12

    def test_sgd_momentum(self):
        p = np.array([1.0])
        opt = SGD([p], lr=0.1, momentum=0.5)
        opt.step([np.array([1.0])])
        opt.step([np.array([1.0])])
        assert p[0] == pytest.approx(1.0 - 0.1 - 0.15)

    def test_weight_decay(self):
        p = np.array([2.0])
        SGD([p], lr=0.1, weight_decay=0.5).step([np.array([0.0])])
        assert p[0] == pytest.approx(1.9)


class TestHistogram:
    def test_normalised(self, rng):
        h = Histogram(np.linspace(0, 4, 9))
        h.add(rng.uniform(0, 4, 100))
        h.tally("no_spike", 25)
        d = h.to_dict()
        assert sum(d["fraction"]) + d["no_spike"] == pytest.approx(1.0)
        assert d["count"] == 125

    def test_clips_to_end_bins(self):
        h = Histogram([0.0, 1.0, 2.0])
        h.add([-5.0, 10.0])
        assert h.counts.tolist() == [1, 1]
        assert h.max == 10.0


class TestCensus:
    def test_fresh_init_alive(self, rng):
        net = Network("36-50-4", init_weights("36-50-4", 0))
        probe = rng.uniform(0, 1, (100, 36))
        dead = dead_neuron_census(net, probe)
        assert all(v < 0.01 for v in dead.values())

    def test_negative_layer_dead(self, rng):
        net = Network("36-50-4", [-np.ones((36, 50)), np.ones((50, 4))])
        dead = dead_neuron_census(net, rng.uniform(0, 1, (20, 36)))
        assert dead["dense1"] == 1.0


class TestEvaluate:
    def test_chance_accuracy(self, rng):
        ds = _toy_dataset(rng, n=400, classes=4)
        net = Network("36-16-4", init_weights("36-16-4", 1))
        res = evaluate(net, encode_image(ds.images.reshape(400, -1)), ds.labels)
        assert 0.05 <= res.accuracy <= 0.5
        assert 0 <= res.decision_fraction <= res.spiked_fraction <= 1

    def test_record_fields(self, rng):
        ds = _toy_dataset(rng, n=32)
        net = Network("36-16-4", init_weights("36-16-4", 1))
        rec = evaluate(net, encode_image(ds.images.reshape(32, -1)), ds.labels).to_record()
        assert rec["schema"] == "relpsp.metrics/1"
        for key in ("accuracy", "dead_fraction", "spike_time_hist", "dtdv_hist", "hidden_spiked_before_decision"):
            assert key in rec


class TestTrain:
    def test_overfit_one_batch(self, rng, tmp_path):
        ds = _toy_dataset(rng, n=32, classes=4)
        cfg = _cfg(epochs=200, batch_size=32, training__init_high=0.5)
        res = train(cfg, ds, ds, MetricsSink(tmp_path / "m.jsonl"), tmp_path)
        losses = [h["mean_loss"] for h in res.history]
        # the loss is measured on the batch before each update, so epoch k+1 reflects step k
        assert all(b < a for a, b in zip(losses[:5], losses[1:6]))
        assert res.history[-1]["train_accuracy"] == 1.0
        assert (tmp_path / "best.ckpt").exists() and (tmp_path / "final.ckpt").exists()
        ck = load_checkpoint(tmp_path / "final.ckpt")
        assert ck.step == 200 and ck.architecture == "36-16-4"

    def test_metrics_stream(self, rng, tmp_path):
        ds = _toy_dataset(rng)
        train(_cfg(), ds, ds, MetricsSink(tmp_path / "m.jsonl"), tmp_path)
        recs = [json.loads(line) for line in (tmp_path / "m.jsonl").read_text().splitlines()]
        assert [r["epoch"] for r in recs] == [1, 2, 3]
        for r in recs:
            assert r["schema"] == "relpsp.metrics/1" and r["kind"] == "epoch"
            assert all(0 <= v <= 1 for v in r["dead_fraction"].values())
            for h in r["spike_time_hist"].values():
                assert sum(h["fraction"]) + h["no_spike"] == pytest.approx(1.0)
            assert sum(r["dtdv_hist"]["fraction"]) == pytest.approx(1.0)
            assert not any("time" in k and "spike" not in k for k in r)

    def test_deterministic_stream(self, rng, tmp_path):
        ds = _toy_dataset(rng)
        for name in ("a", "b"):
            train(_cfg(), ds, ds, MetricsSink(tmp_path / f"{name}.jsonl"))
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()

    def test_nan_aborts_with_dump(self, rng, tmp_path, monkeypatch):
        ds = _toy_dataset(rng)
        real = training.batch_loss_and_grad

        def poisoned(times, targets):
            losses, g = real(times, targets)
            return losses * np.nan, g

        monkeypatch.setattr(training, "batch_loss_and_grad", poisoned)
        with pytest.raises(NumericError, match="nan_dump"):
            train(_cfg(), ds, None, out_dir=tmp_path)
        dumps = list(tmp_path.glob("nan_dump*.npz"))
        assert len(dumps) == 1
        assert set(np.load(dumps[0]).files) == {"inputs", "labels", "outputs"}

    def test_lr_step_decay(self, rng, monkeypatch):
        ds = _toy_dataset(rng)
        cfg = _cfg(epochs=5, optimizer__lr_decay=0.5, optimizer__decay_every=2)
        net = training.build_network(cfg)
        seen = []
        orig = Adam.step

        def spy(self, grads):
            seen.append(self.lr)
            return orig(self, grads)

        monkeypatch.setattr(Adam, "step", spy)
        train(cfg, ds, None, network=net)
        per_epoch = sorted(set(seen), reverse=True)
        assert per_epoch == pytest.approx([1e-3, 5e-4, 2.5e-4])
