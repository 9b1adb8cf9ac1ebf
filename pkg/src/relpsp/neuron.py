"""ReL-PSP neuron: membrane potential and closed-form first-spike times.

A neuron driven by input spikes ``t_i`` with weights ``w_i`` has the
piecewise-linear potential ``V(t) = sum_i w_i * max(0, t - t_i)``.  Between
two consecutive input spikes the slope is constant, so the first threshold
crossing is found by scanning the inputs in time order and solving a linear
equation on the first interval whose end potential exceeds the threshold.

Times live in ``[0, T_MAX]``.  A neuron that never reaches threshold inside
the window reports ``T_MAX`` (the no-spike sentinel) and is marked dead in
the trace; downstream layers see it as a spike at the window edge.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

THRESHOLD = 1.0
T_MAX = 4.0
NO_SPIKE = T_MAX


class DimensionError(ValueError):
    pass


@dataclass(frozen=True)
class DenseLayerParams:
    weights: np.ndarray  # [n_pre, n_post]
    threshold: float = THRESHOLD

    def __post_init__(self):
        if self.weights.ndim != 2:
            raise DimensionError(f"dense weights must be 2-D, got shape {self.weights.shape}")
        if not self.threshold > 0:
            raise ValueError(f"threshold must be positive, got {self.threshold}")
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("dense weights contain non-finite entries")

    @property
    def n_pre(self) -> int:
        return self.weights.shape[0]

    @property
    def n_post(self) -> int:
        return self.weights.shape[1]


@dataclass(frozen=True)
class CausalSet:
    """Inputs that arrived strictly before the output spike.

    An empty set marks a dead neuron (no crossing inside the window).
    """

    indices: tuple[int, ...]
    weight_sum: float
    weighted_time_sum: float

    @property
    def dead(self) -> bool:
        return len(self.indices) == 0


DEAD = CausalSet((), 0.0, 0.0)


@dataclass
class LayerTrace:
    """Per-row record of one layer's forward pass, consumed by backprop.

    Rows are samples for dense layers and (sample, position) pairs for
    convolutions.  The causal set of row ``r``, output ``j`` is
    ``order[r, :n_causal[r, j]]``; ``n_causal == 0`` marks a dead neuron.
    ``slope`` holds dV/dt at the crossing, which for ReL-PSP is the causal
    weight sum.
    """

    inputs: np.ndarray    # [R, N]
    order: np.ndarray     # [R, N] stable argsort of inputs
    times: np.ndarray     # [R, M]
    slope: np.ndarray     # [R, M]
    n_causal: np.ndarray  # [R, M]

    @property
    def dead(self) -> np.ndarray:
        return self.n_causal == 0

    def causal_indices(self, r: int, j: int) -> np.ndarray:
        return self.order[r, : self.n_causal[r, j]]

    def causal_set(self, r: int, j: int, weights_col: np.ndarray) -> CausalSet:
        idx = self.causal_indices(r, j)
        if len(idx) == 0:
            return DEAD
        w = np.asarray(weights_col, dtype=np.float64)[idx]
        t = self.inputs[r, idx].astype(np.float64)
        return CausalSet(tuple(int(i) for i in np.sort(idx)), float(w.sum()), float(w @ t))


def membrane_potential(inputs, weights_col, t: float) -> float:
    """Evaluate V(t) directly; a reference for tests and the oracle only."""
    inputs = np.asarray(inputs, dtype=np.float64)
    weights_col = np.asarray(weights_col, dtype=np.float64)
    if inputs.shape != weights_col.shape:
        raise DimensionError(f"{inputs.shape[0]} inputs but {weights_col.shape[0]} weights")
    return float(weights_col @ np.maximum(0.0, t - inputs))


def solve_spike_time(inputs, weights_col, threshold: float = THRESHOLD,
                     t_max: float = T_MAX) -> tuple[float, CausalSet]:
    """First threshold crossing of a single ReL-PSP neuron, in float64.

    Inputs are visited in ascending time (ties by index).  After adding the
    k-th input the potential on ``[t_k, t_{k+1})`` is ``W_k t - S_k``; the
    crossing lies in the first such interval with ``W_k > 0`` whose end
    potential exceeds ``threshold``, at ``t = (threshold + S_k) / W_k``.
    Returns ``(T_MAX sentinel, DEAD)`` when no crossing happens before ``t_max``.
    """
    if not threshold > 0:
        raise ValueError(f"threshold must be positive, got {threshold}")
    inputs = np.asarray(inputs, dtype=np.float64)
    weights_col = np.asarray(weights_col, dtype=np.float64)
    if inputs.shape != weights_col.shape or inputs.ndim != 1:
        raise DimensionError(f"inputs {inputs.shape} and weights {weights_col.shape} disagree")
    if inputs.size == 0:
        return t_max, DEAD

    order = np.argsort(inputs, kind="stable")
    ts = inputs[order]
    ws = weights_col[order]
    w_cum = np.cumsum(ws)
    s_cum = np.cumsum(ws * ts)
    t_next = np.append(ts[1:], np.inf)
    with np.errstate(invalid="ignore"):
        v_end = np.where(np.isinf(t_next), np.inf, w_cum * t_next - s_cum)
    ok = (w_cum > 0) & (v_end > threshold) & (ts < t_max)
    if not ok.any():
        return t_max, DEAD
    k = int(np.argmax(ok))
    t = (threshold + s_cum[k]) / w_cum[k]
    t = min(max(t, ts[k]), t_next[k])
    if t >= t_max:
        return t_max, DEAD
    members = tuple(int(i) for i in np.sort(order[: k + 1]))
    return float(t), CausalSet(members, float(w_cum[k]), float(s_cum[k]))


@numba.njit(cache=True, parallel=True)
def _rel_forward_kernel(t_in, order, w_t, threshold, t_max, t_out, slope, n_causal):
    n_rows, n_in = t_in.shape
    n_out = w_t.shape[0]
    for r in numba.prange(n_rows):
        for j in range(n_out):
            w_row = w_t[j]
            w_acc = 0.0
            s_acc = 0.0
            t_out[r, j] = t_max
            slope[r, j] = 0.0
            n_causal[r, j] = 0
            for p in range(n_in):
                i = order[r, p]
                ti = t_in[r, i]
                if ti >= t_max:
                    break
                w = w_row[i]
                w_acc += w
                s_acc += w * ti
                if w_acc <= 0.0:
                    continue
                if p + 1 < n_in:
                    t_next = t_in[r, order[r, p + 1]]
                    if w_acc * t_next - s_acc <= threshold:
                        continue
                else:
                    t_next = np.inf
                t = (threshold + s_acc) / w_acc
                # round-off can push t a hair outside its interval
                if t < ti:
                    t = ti
                elif t > t_next:
                    t = t_next
                if t < t_max:
                    t_out[r, j] = t
                    slope[r, j] = w_acc
                    n_causal[r, j] = p + 1
                break


def sort_inputs(t_in: np.ndarray) -> np.ndarray:
    return np.argsort(t_in, axis=1, kind="stable").astype(np.int32)


def solve_layer(t_in: np.ndarray, w_t: np.ndarray, threshold: float = THRESHOLD,
                t_max: float = T_MAX) -> LayerTrace:
    """Batched spike times for rows of inputs against ``w_t`` [n_out, n_in]."""
    t_in = np.ascontiguousarray(t_in, dtype=w_t.dtype)
    if t_in.ndim != 2 or t_in.shape[1] != w_t.shape[1]:
        raise DimensionError(f"inputs {t_in.shape} do not match weights for {w_t.shape[1]} inputs")
    order = sort_inputs(t_in)
    n_rows, n_out = t_in.shape[0], w_t.shape[0]
    t_out = np.empty((n_rows, n_out), dtype=w_t.dtype)
    slope = np.empty((n_rows, n_out), dtype=w_t.dtype)
    n_causal = np.empty((n_rows, n_out), dtype=np.int32)
    _rel_forward_kernel(t_in, order, np.ascontiguousarray(w_t), float(threshold),
                        float(t_max), t_out, slope, n_causal)
    return LayerTrace(t_in, order, t_out, slope, n_causal)


def forward_layer(inputs, params: DenseLayerParams, t_max: float = T_MAX):
    """Spike times of a dense layer for one pattern ``[n_pre]`` or a batch ``[B, n_pre]``.

    Returns ``(times, trace)``; times are read-only.
    """
    inputs = np.asarray(inputs)
    single = inputs.ndim == 1
    batch = inputs[None, :] if single else inputs
    if batch.shape[-1] != params.n_pre:
        raise DimensionError(f"layer expects {params.n_pre} inputs, got {batch.shape[-1]}")
    w_t = np.ascontiguousarray(params.weights.T)
    trace = solve_layer(batch, w_t, params.threshold, t_max)
    out = trace.times[0] if single else trace.times
    out = out.view()
    out.flags.writeable = False
    return out, trace
