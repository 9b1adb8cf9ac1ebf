"""Brute-force references: dense time-stepped simulation and finite differences.

Nothing here is used on the training path.  The simulator evaluates the
membrane potential on a uniform grid and linearly interpolates inside the
step where it first reaches threshold, so its error is bounded by ``dt``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .alpha import TAU, alpha_kernel
from .neuron import THRESHOLD, T_MAX


@dataclass(frozen=True)
class AlphaKernelConfig:
    tau: float = TAU
    threshold: float = THRESHOLD
    dt: float = 1e-3 * TAU

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if not 0 < self.dt <= self.tau / 100:
            raise ValueError(f"dt must lie in (0, tau/100], got {self.dt}")


def _psp(kernel: str, s: np.ndarray, tau: float) -> np.ndarray:
    if kernel == "rel":
        return np.maximum(0.0, s)
    if kernel == "alpha":
        return alpha_kernel(s, tau)
    raise ValueError(f"unknown PSP kernel {kernel!r}")


def simulate_layer(inputs, weights, kernel: str = "rel", threshold: float = THRESHOLD,
                   t_max: float = T_MAX, dt: float = 1e-3, tau: float = TAU) -> np.ndarray:
    """First crossings of every column of ``weights`` [N, M] on a dense time grid."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    inputs = np.asarray(inputs, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim == 1:
        weights = weights[:, None]
    n_steps = int(round(t_max / dt))
    grid = np.arange(n_steps + 1) * dt
    v = _psp(kernel, grid[:, None] - inputs[None, :], tau) @ weights  # [T, M]
    out = np.full(weights.shape[1], t_max)
    above = v >= threshold
    hit = above.any(axis=0)
    first = np.argmax(above, axis=0)
    for j in np.flatnonzero(hit):
        k = first[j]
        if k == 0:
            out[j] = 0.0
            continue
        v0, v1 = v[k - 1, j], v[k, j]
        out[j] = grid[k - 1] + dt * (threshold - v0) / (v1 - v0)
    return np.minimum(out, t_max)


def simulate_first_crossing(inputs, weights, kernel: str = "rel", threshold: float = THRESHOLD,
                            t_max: float = T_MAX, dt: float = 1e-3, tau: float = TAU) -> float:
    """Single-neuron form of :func:`simulate_layer`; returns ``t_max`` for no spike."""
    return float(simulate_layer(inputs, np.asarray(weights, dtype=np.float64)[:, None], kernel,
                                threshold, t_max, dt, tau)[0])


def bisect_crossing(f, lo: float, hi: float, tol: float = 1e-13) -> float:
    """Root of ``f`` on a bracket where ``f(lo) < 0 <= f(hi)``."""
    flo = f(lo)
    if flo >= 0 or f(hi) < 0:
        raise ValueError("bracket does not straddle a crossing")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if f(mid) < 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def finite_diff_grad(f, params, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of scalar ``f(params)`` for every element of ``params``."""
    if not h > 0:
        raise ValueError(f"step must be positive, got {h}")
    x = np.array(params, dtype=np.float64)
    scalar = x.ndim == 0
    x = np.atleast_1d(x)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + h
        fp = f(x[0] if scalar else x)
        x[idx] = orig - h
        fm = f(x[0] if scalar else x)
        x[idx] = orig
        grad[idx] = (fp - fm) / (2 * h)
    return grad[0] if scalar else grad


def directional_derivative(f, params: list, direction: list, h: float = 1e-5) -> float:
    """``(f(p + h u) - f(p - h u)) / 2h`` for a list of arrays perturbed in place and restored."""
    saved = [p.copy() for p in params]
    for p, s, u in zip(params, saved, direction):
        p[...] = s + h * u
    fp = f()
    for p, s, u in zip(params, saved, direction):
        p[...] = s - h * u
    fm = f()
    for p, s in zip(params, saved):
        p[...] = s
    return (fp - fm) / (2 * h)
