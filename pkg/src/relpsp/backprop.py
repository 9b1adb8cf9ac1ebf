"""Exact spike-timing gradients and the output loss.

For a spiking neuron j with causal set C and crossing slope ``W = sum_{i in C} w_ij``
(the ReL-PSP case)::

    dt_j / dw_ij = (t_i - t_j) / W
    dt_j / dt_i  = w_ij / W

Inputs outside C and dead neurons contribute exactly zero.  Causal sets are
held fixed while differentiating, so these are the derivatives of the smooth
piece the current input lies on.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .neuron import LayerTrace

KERNEL_CODES = {"rel": 0, "alpha": 1}


@dataclass(frozen=True)
class LossOutput:
    loss: float
    probabilities: np.ndarray
    predicted: int


def softmax_neg(times: np.ndarray) -> np.ndarray:
    """Softmax over negated spike times along the last axis, max-stabilised."""
    z = -np.asarray(times, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def loss_and_grad_output(times, target: int) -> tuple[LossOutput, np.ndarray]:
    """Cross-entropy on ``softmax(-t)`` and its gradient with respect to ``t``."""
    times = np.asarray(times, dtype=np.float64)
    n = times.shape[-1]
    if not 0 <= target < n:
        raise IndexError(f"target class {target} out of range for {n} outputs")
    p = softmax_neg(times)
    loss = -np.log(p[target])
    # L = t_g + log sum exp(-t_i), so dL/dt_j = [j == g] - p_j
    grad = -p
    grad[target] += 1.0
    predicted = int(np.argmin(times))
    return LossOutput(float(loss), p, predicted), grad


def batch_loss_and_grad(times: np.ndarray, targets: np.ndarray):
    """Vectorised form over a batch ``[B, n]``; returns per-sample losses and dL/dt."""
    targets = np.asarray(targets)
    n = times.shape[-1]
    if np.any((targets < 0) | (targets >= n)):
        raise IndexError(f"target class out of range for {n} outputs")
    p = softmax_neg(times)
    rows = np.arange(len(targets))
    losses = -np.log(p[rows, targets])
    grad = -p
    grad[rows, targets] += 1.0
    return losses, grad


def grad_weight(trace: LayerTrace, r: int, j: int, i: int) -> float:
    """dt_j / dw_ij for ReL-PSP; zero for dead neurons and non-causal inputs."""
    if i not in trace.causal_indices(r, j):
        return 0.0
    return float((float(trace.inputs[r, i]) - float(trace.times[r, j])) / float(trace.slope[r, j]))


def grad_input_time(trace: LayerTrace, weights_col: np.ndarray, r: int, j: int, i: int) -> float:
    """dt_j / dt_i for ReL-PSP; zero for dead neurons and non-causal inputs."""
    if i not in trace.causal_indices(r, j):
        return 0.0
    return float(float(weights_col[i]) / float(trace.slope[r, j]))


@numba.njit(cache=True)
def _layer_backward_kernel(t_in, order, t_out, slope, n_causal, w_t, g_out,
                           kernel, tau, d_w_t, g_in, want_input):
    n_rows = t_in.shape[0]
    n_out = w_t.shape[0]
    for r in range(n_rows):
        for j in range(n_out):
            k = n_causal[r, j]
            go = g_out[r, j]
            if k == 0 or go == 0.0:
                continue
            g = go / slope[r, j]
            tj = t_out[r, j]
            for p in range(k):
                i = order[r, p]
                ti = t_in[r, i]
                if kernel == 0:
                    d_w_t[j, i] += (ti - tj) * g
                    if want_input:
                        g_in[r, i] += w_t[j, i] * g
                else:
                    s = tj - ti
                    e = np.exp(1.0 - s / tau)
                    d_w_t[j, i] -= (s / tau) * e * g
                    if want_input:
                        g_in[r, i] += w_t[j, i] * e * (tau - s) / (tau * tau) * g


def layer_backward(trace: LayerTrace, w_t: np.ndarray, g_out: np.ndarray,
                   kernel: str = "rel", tau: float = 1.0, want_input: bool = True):
    """Reverse pass of one spiking layer.

    ``g_out`` is dL/dt_out ``[R, M]``.  Returns ``(dL/dw_t [M, N], dL/dt_in [R, N])``;
    rows are summed in index order, so the result is reproducible.
    """
    if g_out.shape != trace.times.shape:
        raise ValueError(f"gradient shape {g_out.shape} does not match layer output {trace.times.shape}")
    if w_t.shape[1] != trace.inputs.shape[1] or w_t.shape[0] != trace.times.shape[1]:
        raise ValueError(f"weights {w_t.shape} do not match trace {trace.inputs.shape}->{trace.times.shape}")
    d_w_t = np.zeros(w_t.shape, dtype=np.float64)
    g_in = np.zeros(trace.inputs.shape, dtype=np.float64)
    _layer_backward_kernel(trace.inputs, trace.order, trace.times, trace.slope, trace.n_causal,
                           np.ascontiguousarray(w_t), np.ascontiguousarray(g_out, dtype=np.float64),
                           KERNEL_CODES[kernel], float(tau), d_w_t, g_in, want_input)
    return d_w_t, g_in


def backward(network, traces, grad_out: np.ndarray) -> list[np.ndarray]:
    """Accumulate dL/dparams over a batch from one forward pass.

    ``traces`` is what ``network.forward`` returned alongside the outputs.
    The returned list mirrors ``network.params`` in order and shape.
    """
    if len(traces) != len(network.layers):
        raise ValueError(f"{len(traces)} traces for {len(network.layers)} layers")
    grads: list = [None] * len(network.layers)
    g = np.asarray(grad_out, dtype=np.float64)
    first_param = min((k for k, layer in enumerate(network.layers) if layer.has_params), default=0)
    for k in range(len(network.layers) - 1, -1, -1):
        layer = network.layers[k]
        g, grads[k] = layer.backward(traces[k], g, want_input=k > first_param)
        if g is None:
            break
    out = []
    for layer, gr in zip(network.layers, grads):
        if not layer.has_params:
            continue
        if gr is None:
            gr = np.zeros(layer.weights.shape)
        if not np.all(np.isfinite(gr)):
            raise FloatingPointError(f"non-finite gradient in layer {layer.name}")
        out.append(gr)
    return out
