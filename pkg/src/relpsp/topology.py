"""Network composition in the spike-time domain.

Architectures use the dash notation of the benchmark tables, e.g.
``784-400-10`` or ``28x28-16C5-P2-32C5-P2-800-128-10``: the first token is
the input shape, ``kCs`` is a convolution with k kernels of size s x s,
``Pp`` is p x p pooling and bare numbers are dense layers.  A bare number
that directly follows a conv/pool stack and is not the last token names the
flattened width; it is recomputed from the shapes (valid padding, stride 1)
and only checked against the printed value.

Spatial activations are kept channels-first, ``[B, C, H, W]``.
"""
from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import alpha as alpha_mod
from .backprop import layer_backward
from .neuron import THRESHOLD, T_MAX, DimensionError, solve_layer

log = logging.getLogger(__name__)


class ArchitectureError(ValueError):
    pass


@dataclass(frozen=True)
class Input:
    shape: tuple  # (n,) or (h, w, c)


@dataclass(frozen=True)
class Dense:
    n: int


@dataclass(frozen=True)
class Conv:
    k: int
    size: int
    stride: int = 1
    padding: int = 0


@dataclass(frozen=True)
class Pool:
    p: int


@dataclass(frozen=True)
class ArchitectureSpec:
    layers: tuple
    text: str = ""
    declared_flat: int | None = field(default=None, compare=False)

    @property
    def input_shape(self) -> tuple:
        return self.layers[0].shape

    def shapes(self) -> list[tuple]:
        """Output shape after every descriptor, input included; spatial shapes are (h, w, c)."""
        return _shape_chain(self.layers)

    @property
    def n_outputs(self) -> int:
        return math.prod(self.shapes()[-1])


_INPUT_RE = re.compile(r"^(\d+)(?:x(\d+))?(?:x(\d+))?$")
_CONV_RE = re.compile(r"^(\d+)C(\d+)$", re.IGNORECASE)
_POOL_RE = re.compile(r"^P(\d+)$", re.IGNORECASE)


def _shape_chain(layers) -> list[tuple]:
    shape = tuple(layers[0].shape)
    shapes = [shape]
    for layer in layers[1:]:
        if isinstance(layer, Dense):
            shape = (layer.n,)
        elif isinstance(layer, Conv):
            if len(shape) != 3:
                raise ArchitectureError(f"convolution {layer} needs a spatial input, got {shape}")
            h, w, _ = shape
            ho = (h + 2 * layer.padding - layer.size) // layer.stride + 1
            wo = (w + 2 * layer.padding - layer.size) // layer.stride + 1
            if ho < 1 or wo < 1:
                raise ArchitectureError(f"kernel {layer.size} does not fit input {h}x{w}")
            shape = (ho, wo, layer.k)
        elif isinstance(layer, Pool):
            if len(shape) != 3:
                raise ArchitectureError(f"pooling {layer} needs a spatial input, got {shape}")
            h, w, c = shape
            shape = (-(-h // layer.p), -(-w // layer.p), c)
        else:
            raise ArchitectureError(f"unexpected layer descriptor {layer!r}")
        if any(d < 1 for d in shape):
            raise ArchitectureError(f"layer {layer} produces empty shape {shape}")
        shapes.append(shape)
    return shapes


def parse_architecture(text: str) -> ArchitectureSpec:
    if not text or not text.strip():
        raise ArchitectureError("empty architecture string")
    norm = text.strip().replace("×", "x").replace("X", "x").replace(" ", "")
    tokens = norm.split("-")
    if any(t == "" for t in tokens):
        raise ArchitectureError(f"malformed architecture {text!r}: empty token")
    m = _INPUT_RE.match(tokens[0])
    if not m:
        raise ArchitectureError(f"malformed input token {tokens[0]!r}")
    dims = [int(g) for g in m.groups() if g is not None]
    shape = (dims[0],) if len(dims) == 1 else (dims[0], dims[1], dims[2] if len(dims) == 3 else 1)
    if any(d < 1 for d in shape):
        raise ArchitectureError(f"input dimensions must be positive in {tokens[0]!r}")
    if len(tokens) < 2:
        raise ArchitectureError(f"architecture {text!r} has no layers")

    layers = [Input(shape)]
    declared_flat = None
    for pos, tok in enumerate(tokens[1:], start=1):
        last = pos == len(tokens) - 1
        if m := _CONV_RE.match(tok):
            layers.append(Conv(int(m.group(1)), int(m.group(2))))
        elif m := _POOL_RE.match(tok):
            layers.append(Pool(int(m.group(1))))
        elif tok.isdigit():
            n = int(tok)
            if n < 1:
                raise ArchitectureError(f"layer width must be positive, got {tok!r}")
            if isinstance(layers[-1], (Conv, Pool)) and not last and declared_flat is None:
                declared_flat = n
                continue
            layers.append(Dense(n))
        else:
            raise ArchitectureError(f"unknown token {tok!r} in {text!r}")
        _shape_chain(layers)

    spec = ArchitectureSpec(tuple(layers), text, declared_flat)
    if declared_flat is not None:
        flat = _flat_after_stack(spec)
        if flat != declared_flat:
            log.warning("architecture %r declares flatten width %d; shapes give %d",
                        text, declared_flat, flat)
    return spec


def _flat_after_stack(spec: ArchitectureSpec) -> int:
    idx = max(k for k, layer in enumerate(spec.layers) if isinstance(layer, (Conv, Pool, Input)))
    return math.prod(spec.shapes()[idx])


def _solver(kernel: str):
    if kernel == "rel":
        return lambda x, w_t, th, t_max, tau: solve_layer(x, w_t, th, t_max)
    if kernel == "alpha":
        return alpha_mod.solve_alpha_layer
    raise ValueError(f"unknown PSP kernel {kernel!r}")


class DenseLayer:
    has_params = True

    def __init__(self, weights, threshold=THRESHOLD, kernel="rel", t_max=T_MAX, tau=1.0, name="dense"):
        self.weights = weights
        self.threshold = threshold
        self.kernel = kernel
        self.t_max = t_max
        self.tau = tau
        self.name = name
        self._solve = _solver(kernel)

    def forward(self, x):
        w_t = np.ascontiguousarray(self.weights.T)
        trace = self._solve(x, w_t, self.threshold, self.t_max, self.tau)
        return trace.times, trace

    def backward(self, trace, g_out, want_input=True):
        w_t = np.ascontiguousarray(self.weights.T)
        d_w_t, g_in = layer_backward(trace, w_t, g_out, self.kernel, self.tau, want_input)
        return (g_in if want_input else None), d_w_t.T


class ConvLayer:
    """Shared-kernel spiking convolution; each output location is one neuron."""

    has_params = True

    def __init__(self, weights, threshold=THRESHOLD, kernel="rel", t_max=T_MAX, tau=1.0,
                 padding=0, name="conv"):
        self.weights = weights  # [k_out, k_in, s, s]
        self.threshold = threshold
        self.kernel = kernel
        self.t_max = t_max
        self.tau = tau
        self.padding = padding
        self.name = name
        self._solve = _solver(kernel)

    def _patches(self, x):
        if self.padding:
            pad = self.padding
            x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=self.t_max)
        s = self.weights.shape[-1]
        win = sliding_window_view(x, (s, s), axis=(2, 3))  # [B, C, Ho, Wo, s, s]
        b, c, ho, wo = win.shape[:4]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * s * s)
        return cols, (b, c, ho, wo, x.shape[2], x.shape[3])

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.weights.shape[1]:
            raise DimensionError(f"conv expects [B, {self.weights.shape[1]}, H, W], got {x.shape}")
        cols, geom = self._patches(x)
        w_t = self.weights.reshape(self.weights.shape[0], -1)
        trace = self._solve(cols, np.ascontiguousarray(w_t), self.threshold, self.t_max, self.tau)
        b, _, ho, wo = geom[:4]
        y = trace.times.reshape(b, ho, wo, -1).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(y), (trace, geom)

    def backward(self, trace, g_out, want_input=True):
        lt, (b, c, ho, wo, hp, wp) = trace
        k_out, _, s, _ = self.weights.shape
        g_rows = g_out.transpose(0, 2, 3, 1).reshape(b * ho * wo, k_out)
        w_t = np.ascontiguousarray(self.weights.reshape(k_out, -1))
        d_w_t, g_cols = layer_backward(lt, w_t, g_rows, self.kernel, self.tau, want_input)
        d_w = d_w_t.reshape(self.weights.shape)
        if not want_input:
            return None, d_w
        g_cols = g_cols.reshape(b, ho, wo, c, s, s)
        g_in = np.zeros((b, c, hp, wp))
        for dy in range(s):
            for dx in range(s):
                g_in[:, :, dy:dy + ho, dx:dx + wo] += g_cols[:, :, :, :, dy, dx].transpose(0, 3, 1, 2)
        if self.padding:
            pad = self.padding
            g_in = g_in[:, :, pad:-pad, pad:-pad]
        return g_in, d_w


class PoolLayer:
    """Earliest-spike pooling: a block's output is its minimum spike time."""

    has_params = False

    def __init__(self, p, t_max=T_MAX, name="pool"):
        self.p = p
        self.t_max = t_max
        self.name = name

    def forward(self, x):
        return forward_pool(x, self.p, self.t_max, with_argmin=True)

    def backward(self, trace, g_out, want_input=True):
        arg, in_shape = trace
        b, c, h, w = in_shape
        p = self.p
        ho, wo = arg.shape[2], arg.shape[3]
        blocks = np.zeros((b, c, ho, wo, p * p))
        np.put_along_axis(blocks, arg[..., None], g_out[..., None], axis=-1)
        g = blocks.reshape(b, c, ho, wo, p, p).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho * p, wo * p)
        return g[:, :, :h, :w], None


def forward_pool(x, p: int, t_max: float = T_MAX, with_argmin: bool = False):
    """Min-time pooling over ``p x p`` blocks of ``[B, C, H, W]``; ragged edges pad with no-spike."""
    b, c, h, w = x.shape
    ho, wo = -(-h // p), -(-w // p)
    if ho * p != h or wo * p != w:
        x = np.pad(x, ((0, 0), (0, 0), (0, ho * p - h), (0, wo * p - w)), constant_values=t_max)
    blocks = x.reshape(b, c, ho, p, wo, p).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho, wo, p * p)
    arg = np.argmin(blocks, axis=-1)
    y = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    if with_argmin:
        return y, (arg, (b, c, h, w))
    return y


class FlattenLayer:
    has_params = False
    name = "flatten"

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, trace, g_out, want_input=True):
        return g_out.reshape(trace), None


class Network:
    """A feed-forward spiking network built from an :class:`ArchitectureSpec`.

    ``params`` is the list of trainable weight arrays in layer order: dense
    ``[n_pre, n_post]`` and conv ``[k_out, k_in, s, s]``.
    """

    def __init__(self, arch, params, thresholds=None, kernel="rel", t_max=T_MAX, tau=1.0):
        if isinstance(arch, str):
            arch = parse_architecture(arch)
        self.arch = arch
        self.kernel = kernel
        self.t_max = t_max
        self.tau = tau
        expected = param_shapes(arch)
        if len(params) != len(expected):
            raise DimensionError(f"{arch.text or arch}: expected {len(expected)} weight tensors, got {len(params)}")
        if thresholds is None:
            thresholds = [THRESHOLD] * len(params)
        self.layers = []
        shapes = arch.shapes()
        k = 0
        for pos, desc in enumerate(arch.layers[1:], start=1):
            prev = shapes[pos - 1]
            if isinstance(desc, Dense):
                if len(prev) == 3:
                    self.layers.append(FlattenLayer())
                layer_cls, kw = DenseLayer, {}
            elif isinstance(desc, Conv):
                layer_cls, kw = ConvLayer, {"padding": desc.padding}
            else:
                self.layers.append(PoolLayer(desc.p, t_max, name=f"pool{pos}"))
                continue
            w = params[k]
            if tuple(w.shape) != expected[k]:
                raise DimensionError(
                    f"layer {pos} ({desc}): weight shape {tuple(w.shape)} != expected {expected[k]}")
            self.layers.append(layer_cls(w, thresholds[k], kernel, t_max, tau,
                                         name=f"{layer_cls.__name__[:-5].lower()}{pos}", **kw))
            k += 1

    @property
    def params(self) -> list[np.ndarray]:
        return [layer.weights for layer in self.layers if layer.has_params]

    @property
    def thresholds(self) -> list[float]:
        return [layer.threshold for layer in self.layers if layer.has_params]

    @property
    def dtype(self):
        return self.params[0].dtype

    def spiking_layers(self) -> list[int]:
        return [k for k, layer in enumerate(self.layers) if layer.has_params]

    def prepare_input(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        shape = self.arch.input_shape
        if len(shape) == 1:
            return x.reshape(-1, shape[0]) if x.ndim != 2 or x.shape[1] != shape[0] else x
        h, w, c = shape
        if x.ndim == 3 and c == 1:
            x = x[:, None, :, :]
        elif x.ndim == 2 and x.shape[1] == h * w * c:
            x = x.reshape(-1, h, w, c).transpose(0, 3, 1, 2)
        elif x.ndim == 4 and x.shape[1:] == (h, w, c):
            x = x.transpose(0, 3, 1, 2)
        if x.shape[1:] != (c, h, w):
            raise DimensionError(f"input of shape {x.shape} does not match {shape}")
        return np.ascontiguousarray(x)

    def forward(self, x):
        """Output spike times ``[B, n_out]`` and one trace per layer."""
        x = self.prepare_input(x)
        traces = []
        for layer in self.layers:
            x, tr = layer.forward(x)
            traces.append(tr)
        if x.ndim != 2:
            x = x.reshape(x.shape[0], -1)
        return x, traces

    def predict(self, x) -> np.ndarray:
        out, _ = self.forward(x)
        return np.argmin(out, axis=1)

    def layer_trace(self, traces, k):
        """The :class:`LayerTrace` of spiking layer ``k`` (unwraps conv geometry)."""
        tr = traces[k]
        return tr[0] if isinstance(tr, tuple) else tr


def param_shapes(arch: ArchitectureSpec) -> list[tuple]:
    shapes = arch.shapes()
    out = []
    for pos, desc in enumerate(arch.layers[1:], start=1):
        prev = shapes[pos - 1]
        if isinstance(desc, Dense):
            out.append((math.prod(prev), desc.n))
        elif isinstance(desc, Conv):
            out.append((desc.k, prev[2], desc.size, desc.size))
    return out


def fan_in(shape: tuple) -> int:
    return shape[0] if len(shape) == 2 else math.prod(shape[1:])
