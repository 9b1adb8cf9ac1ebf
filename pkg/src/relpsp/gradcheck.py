"""Finite-difference audit of the analytic gradients on random networks.

A central difference is only meaningful while every neuron keeps the same
causal set (and every pool the same winner) at both perturbed points, so a
probe whose perturbation changes that structure is discarded and another one
drawn in its place.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backprop import backward, batch_loss_and_grad
from .oracle import directional_derivative
from .topology import Network, parse_architecture
from .training import init_weights


@dataclass
class GradCheckReport:
    arch: str
    n_nets: int = 0
    n_weight_probes: int = 0
    n_input_probes: int = 0
    n_directional: int = 0
    n_skipped: int = 0
    max_weight_err: float = 0.0
    max_input_err: float = 0.0
    max_directional_err: float = 0.0
    worst: dict = field(default_factory=dict)

    def passed(self, dense_tol: float = 1e-4, directional_tol: float = 1e-3) -> bool:
        return (self.max_weight_err < dense_tol and self.max_input_err < dense_tol
                and self.max_directional_err < directional_tol and self.n_weight_probes > 0)


def rel_err(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def structure(network: Network, traces) -> list:
    """Causal-set sizes and input orderings of every layer, plus pool winners."""
    sig = []
    for k, (layer, tr) in enumerate(zip(network.layers, traces)):
        if layer.has_params:
            lt = network.layer_trace(traces, k)
            sig.append(lt.n_causal.copy())
            sig.append(lt.order.copy())
        elif isinstance(tr, tuple) and isinstance(tr[0], np.ndarray):
            sig.append(tr[0].copy())
    return sig


def same_structure(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def random_network(arch, rng: np.random.Generator, kernel: str = "rel", t_max: float = 4.0) -> Network:
    """Float64 network with the default positive-mean init and a few negative weights mixed in."""
    spec = parse_architecture(arch) if isinstance(arch, str) else arch
    params = init_weights(spec, int(rng.integers(2**31)), dtype=np.float64)
    for p in params:
        p -= rng.uniform(0.0, 0.25) * p.max()
    return Network(spec, params, kernel=kernel, t_max=t_max)


def random_inputs(network: Network, rng: np.random.Generator, batch: int) -> np.ndarray:
    shape = network.arch.input_shape
    return rng.uniform(0.0, 1.0, size=(batch, int(np.prod(shape))))


def check_network(network: Network, x: np.ndarray, y: np.ndarray, rng: np.random.Generator,
                  report: GradCheckReport, n_probes: int = 8, h: float = 1e-4, h_dir: float = 1e-5,
                  max_tries: int = 40) -> None:
    """Probe random weights, input times and one random direction of ``network``."""
    out, traces = network.forward(x)
    base = structure(network, traces)
    losses, g_out = batch_loss_and_grad(out, y)
    grads = backward(network, traces, g_out)

    def loss_at(inputs=x):
        o, tr = network.forward(inputs)
        return float(batch_loss_and_grad(o, y)[0].sum()), structure(network, tr)

    params = network.params
    got = tries = 0
    while got < n_probes and tries < max_tries:
        tries += 1
        k = int(rng.integers(len(params)))
        idx = tuple(int(rng.integers(s)) for s in params[k].shape)
        orig = params[k][idx]
        params[k][idx] = orig + h
        fp, sp = loss_at()
        params[k][idx] = orig - h
        fm, sm = loss_at()
        params[k][idx] = orig
        if not (same_structure(base, sp) and same_structure(base, sm)):
            report.n_skipped += 1
            continue
        got += 1
        err = rel_err(grads[k][idx], (fp - fm) / (2 * h))
        report.n_weight_probes += 1
        if err > report.max_weight_err:
            report.max_weight_err = err
            report.worst["weight"] = {"layer": k, "index": list(idx), "analytic": float(grads[k][idx]),
                                      "numeric": (fp - fm) / (2 * h)}

    # input-time gradients through the whole network
    g_in = _input_gradient(network, traces, g_out)
    got = tries = 0
    while g_in is not None and got < n_probes // 2 and tries < max_tries:
        tries += 1
        r, i = int(rng.integers(x.shape[0])), int(rng.integers(x.shape[1]))
        xp, xm = x.copy(), x.copy()
        xp[r, i] += h
        xm[r, i] -= h
        fp, sp = loss_at(xp)
        fm, sm = loss_at(xm)
        if not (same_structure(base, sp) and same_structure(base, sm)):
            report.n_skipped += 1
            continue
        got += 1
        report.n_input_probes += 1
        report.max_input_err = max(report.max_input_err, rel_err(g_in[r, i], (fp - fm) / (2 * h)))

    for _ in range(max_tries):
        direction = [rng.standard_normal(p.shape) for p in params]
        norm = np.sqrt(sum(float((u * u).sum()) for u in direction))
        direction = [u / norm for u in direction]
        saved = [p.copy() for p in params]
        shifted = []
        for sign in (1, -1):
            for p, s, u in zip(params, saved, direction):
                p[...] = s + sign * h_dir * u
            shifted.append(loss_at()[1])
        for p, s in zip(params, saved):
            p[...] = s
        if not all(same_structure(base, s) for s in shifted):
            report.n_skipped += 1
            continue
        numeric = directional_derivative(lambda: loss_at()[0], params, direction, h_dir)
        analytic = sum(float((g * u).sum()) for g, u in zip(grads, direction))
        report.n_directional += 1
        report.max_directional_err = max(report.max_directional_err, rel_err(analytic, numeric))
        break


def _input_gradient(network: Network, traces, g_out):
    g = np.asarray(g_out, dtype=np.float64)
    for k in range(len(network.layers) - 1, -1, -1):
        g, _ = network.layers[k].backward(traces[k], g, want_input=True)
    return g.reshape(g.shape[0], -1) if g is not None else None


def gradcheck(arch: str, seed: int = 0, samples: int = 50, kernel: str = "rel", batch: int = 2,
              n_probes: int = 8) -> GradCheckReport:
    """Run :func:`check_network` on ``samples`` independently drawn networks."""
    rng = np.random.default_rng(seed)
    report = GradCheckReport(arch)
    for _ in range(samples):
        net = random_network(arch, rng, kernel)
        x = random_inputs(net, rng, batch)
        y = rng.integers(net.arch.n_outputs, size=batch)
        check_network(net, x, y, rng, report, n_probes)
        report.n_nets += 1
    return report
