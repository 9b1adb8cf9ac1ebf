"""Alpha-PSP baseline neuron, solved event by event.

The kernel is ``eps(s) = (s / tau) * exp(1 - s / tau)`` for ``s > 0``.  After
the k-th input has arrived the potential is

    V(t) = (e / tau) * exp(-t / tau) * (A_k * t - B_k),
    A_k = sum w_i exp(t_i / tau),   B_k = sum w_i t_i exp(t_i / tau),

a single alpha bump peaking at ``t* = tau + B_k / A_k`` when ``A_k > 0``.
Each inter-spike interval is therefore checked in O(1) and the crossing is
refined by safeguarded Newton on the rising flank.  Unlike ReL-PSP the slope
at the crossing can be arbitrarily close to zero (a grazing crossing at the
peak), which is what makes the spike-time gradient explode.
"""
from __future__ import annotations

import math

import numba
import numpy as np

from .neuron import THRESHOLD, T_MAX, DimensionError, LayerTrace, sort_inputs

TAU = 1.0


def alpha_kernel(s, tau: float = TAU):
    s = np.asarray(s, dtype=np.float64)
    pos = s > 0
    return np.where(pos, (s / tau) * np.exp(1.0 - np.where(pos, s, 0.0) / tau), 0.0)


def alpha_kernel_dt(s, tau: float = TAU):
    """d eps / d s; zero at the peak ``s = tau``."""
    s = np.asarray(s, dtype=np.float64)
    pos = s > 0
    return np.where(pos, np.exp(1.0 - np.where(pos, s, 0.0) / tau) * (tau - s) / tau**2, 0.0)


def alpha_potential(inputs, weights_col, t: float, tau: float = TAU) -> float:
    inputs = np.asarray(inputs, dtype=np.float64)
    weights_col = np.asarray(weights_col, dtype=np.float64)
    if inputs.shape != weights_col.shape:
        raise DimensionError(f"{inputs.shape[0]} inputs but {weights_col.shape[0]} weights")
    return float(weights_col @ alpha_kernel(t - inputs, tau))


@numba.njit(cache=True)
def _bump(a, b, t, tau):
    return math.exp(-t / tau) * (a * t - b)


@numba.njit(cache=True)
def _rising_root(a, b, c, lo, hi, tau):
    # f(t) = exp(-t/tau)(a t - b) is increasing on [lo, hi], f(lo) <= c <= f(hi)
    t = 0.5 * (lo + hi)
    for _ in range(200):
        e = math.exp(-t / tau)
        f = e * (a * t - b) - c
        if abs(f) <= 4e-16 * c:
            return t
        if f < 0.0:
            lo = t
        else:
            hi = t
        if hi - lo <= 4e-16 * hi:
            break
        df = e * (a - (a * t - b) / tau)
        tn = t - f / df if df > 0.0 else lo
        t = tn if lo < tn < hi else 0.5 * (lo + hi)
    return 0.5 * (lo + hi)


@numba.njit(cache=True, parallel=True)
def _alpha_forward_kernel(t_in, order, w_t, threshold, t_max, tau, t_out, slope, n_causal):
    n_rows, n_in = t_in.shape
    n_out = w_t.shape[0]
    c = threshold * tau / math.e
    for r in numba.prange(n_rows):
        grow = np.empty(n_in)
        decay = np.empty(n_in)
        for p in range(n_in):
            ti = t_in[r, order[r, p]]
            grow[p] = math.exp(ti / tau)
            decay[p] = math.exp(-ti / tau)
        for j in range(n_out):
            w_row = w_t[j]
            a = 0.0
            b = 0.0
            t_out[r, j] = t_max
            slope[r, j] = 0.0
            n_causal[r, j] = 0
            for p in range(n_in):
                i = order[r, p]
                ti = t_in[r, i]
                if ti >= t_max:
                    break
                w = w_row[i] * grow[p]
                a += w
                b += w * ti
                if a <= 0.0:
                    continue
                if p + 1 < n_in:
                    hi = t_in[r, order[r, p + 1]]
                    if hi > t_max:
                        hi = t_max
                    f_hi = decay[p + 1] * (a * hi - b) if hi < t_max else _bump(a, b, hi, tau)
                else:
                    hi = t_max
                    f_hi = _bump(a, b, hi, tau)
                if hi <= ti:
                    continue
                peak = tau + b / a
                if peak < hi:
                    if peak <= ti:
                        continue
                    top = peak
                    f_top = _bump(a, b, peak, tau)
                    crossed = f_top >= c
                else:
                    top = hi
                    f_top = f_hi
                    crossed = f_hi > c
                if not crossed:
                    if hi >= t_max:
                        break
                    continue
                t = _rising_root(a, b, c, ti, top, tau)
                if t < t_max:
                    t_out[r, j] = t
                    # dV/dt = (e/tau) * d/dt[exp(-t/tau)(a t - b)]
                    slope[r, j] = (math.e / tau) * math.exp(-t / tau) * (a - (a * t - b) / tau)
                    n_causal[r, j] = p + 1
                break


def solve_alpha_layer(t_in: np.ndarray, w_t: np.ndarray, threshold: float = THRESHOLD,
                      t_max: float = T_MAX, tau: float = TAU) -> LayerTrace:
    """Alpha-PSP counterpart of :func:`relpsp.neuron.solve_layer`."""
    t_in = np.ascontiguousarray(t_in, dtype=w_t.dtype)
    if t_in.ndim != 2 or t_in.shape[1] != w_t.shape[1]:
        raise DimensionError(f"inputs {t_in.shape} do not match weights for {w_t.shape[1]} inputs")
    order = sort_inputs(t_in)
    n_rows, n_out = t_in.shape[0], w_t.shape[0]
    t_out = np.empty((n_rows, n_out), dtype=w_t.dtype)
    slope = np.empty((n_rows, n_out), dtype=w_t.dtype)
    n_causal = np.empty((n_rows, n_out), dtype=np.int32)
    _alpha_forward_kernel(t_in, order, np.ascontiguousarray(w_t), float(threshold),
                          float(t_max), float(tau), t_out, slope, n_causal)
    return LayerTrace(t_in, order, t_out, slope, n_causal)


def alpha_spike_time(inputs, weights_col, threshold: float = THRESHOLD,
                     t_max: float = T_MAX, tau: float = TAU) -> tuple[float, float, int]:
    """Single-neuron convenience wrapper: ``(t, dV/dt at t, n_causal)``."""
    w = np.asarray(weights_col, dtype=np.float64)[None, :]
    trace = solve_alpha_layer(np.asarray(inputs, dtype=np.float64)[None, :], w, threshold, t_max, tau)
    return float(trace.times[0, 0]), float(trace.slope[0, 0]), int(trace.n_causal[0, 0])


def alpha_grad(trace: LayerTrace, w_t: np.ndarray, r: int, j: int, tau: float = TAU):
    """Linearised gradients of one alpha neuron's spike time.

    Returns ``(dt/dw, dt/dt_in)`` over all inputs; entries outside the causal
    set are zero.  Both share the denominator ``sum_i w_i eps'(t_j - t_i)``,
    reported as is even when it is vanishingly small.
    """
    n_in = trace.inputs.shape[1]
    dtdw = np.zeros(n_in)
    dtdt = np.zeros(n_in)
    idx = trace.causal_indices(r, j)
    if len(idx) == 0:
        return dtdw, dtdt
    tj = float(trace.times[r, j])
    s = tj - trace.inputs[r, idx].astype(np.float64)
    w = w_t[j, idx].astype(np.float64)
    denom = float(w @ alpha_kernel_dt(s, tau))
    with np.errstate(divide="ignore"):
        dtdw[idx] = -alpha_kernel(s, tau) / denom
        dtdt[idx] = w * alpha_kernel_dt(s, tau) / denom
    return dtdw, dtdt
