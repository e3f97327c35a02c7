"""Dense tensors with define-by-run reverse-mode differentiation.

Every primitive records a node on the active :class:`Tape`. A node keeps
its inputs, its output and a closure ``backward(grad, mode)`` returning one
gradient per input. ReLU nodes are the only ones that look at ``mode``,
which selects ordinary, DeconvNet or guided propagation for the whole pass.
"""

from __future__ import annotations

import enum
import threading
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

DTYPE = np.float32
BN_EPS = 1e-5


class TensorError(ValueError):
    """Raised on shape mismatches and misuse of the tape."""


class ReluMode(str, enum.Enum):
    STANDARD = "standard"
    DECONV = "deconv"
    GUIDED = "guided"


class Tensor:
    """An n-dimensional array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "tape", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DTYPE)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.tape: Optional[Tape] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other, self.dtype), -1.0))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _as_tensor(other, self.dtype))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(x, dtype=DTYPE) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


@dataclass
class _Node:
    inputs: tuple
    output: Tensor
    backward: Callable
    layer_id: Optional[str] = None


_local = threading.local()


class Tape:
    """Ordered record of the primitives executed inside a ``with`` block.

    A tape is consumed by one call to :func:`backward`.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.named: dict[str, Tensor] = {}
        self.consumed = False
        self._prev: Optional[Tape] = None

    def __enter__(self) -> "Tape":
        self._prev = getattr(_local, "tape", None)
        _local.tape = self
        return self

    def __exit__(self, *exc):
        _local.tape = self._prev
        return False

    def mark(self, layer_id: str, t: Tensor) -> Tensor:
        """Name ``t`` so it can be captured later."""
        self.named[layer_id] = t
        return t

    def clear(self):
        self.nodes.clear()
        self.named.clear()


def current_tape() -> Optional[Tape]:
    return getattr(_local, "tape", None)


def mark(layer_id: str, t: Tensor) -> Tensor:
    tape = current_tape()
    if tape is not None:
        tape.mark(layer_id, t)
    return t


def _record(out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    tape = current_tape()
    if needs and tape is not None:
        out.tape = tape
        tape.nodes.append(_Node(tuple(inputs), out, backward_fn))
    return out


def backward(output: Tensor, mode: ReluMode | str = ReluMode.STANDARD, seed_grad=None) -> None:
    """Populate ``.grad`` of every tensor on ``output``'s tape.

    ``output`` must be a scalar unless ``seed_grad`` is given.
    """
    mode = ReluMode(mode)
    tape = output.tape
    if tape is None:
        raise TensorError("output was not produced under a Tape")
    if tape.consumed:
        raise TensorError("tape already consumed by a previous backward pass")
    if seed_grad is None:
        if output.data.size != 1:
            raise TensorError(f"backward target must be scalar, got shape {output.shape}")
        seed_grad = np.ones_like(output.data)
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(output): np.asarray(seed_grad, dtype=output.dtype)}
    for node in reversed(tape.nodes):
        g = grads.get(id(node.output))
        if g is None:
            continue
        node.output.grad = g
        in_grads = node.backward(g, mode)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    for node in tape.nodes:
        for t in node.inputs:
            if t.requires_grad and id(t) in grads:
                t.grad = grads[id(t)]
    output.grad = grads[id(output)]
    tape.nodes.clear()


@dataclass
class CaptureHandle:
    """Activation and activation-gradient of one named layer."""

    layer_id: str
    tensor: Tensor

    @property
    def activation(self) -> np.ndarray:
        return self.tensor.data

    @property
    def gradient(self) -> Optional[np.ndarray]:
        if self.tensor.grad is None:
            return None
        return self.tensor.grad


def register_capture(tape: Tape, layer_id: str) -> CaptureHandle:
    if layer_id not in tape.named:
        valid = ", ".join(sorted(tape.named))
        raise KeyError(f"unknown layer id {layer_id!r}; valid ids: {valid}")
    return CaptureHandle(layer_id, tape.named[layer_id])


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def bw(g, mode):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(out, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def bw(g, mode):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(out, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    out = a.data * a.dtype.type(c)

    def bw(g, mode):
        return (g * g.dtype.type(c),)

    return _record(out, (a,), bw)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(dtype=a.dtype), dtype=a.dtype)

    def bw(g, mode):
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return _record(out, (a,), bw)


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.data.size)


def relu(x: Tensor) -> Tensor:
    """Rectifier whose backward rule is chosen by the pass-level mode."""
    pos = x.data > 0
    out = np.maximum(x.data, 0)

    def bw(g, mode):
        if mode is ReluMode.STANDARD:
            return (g * pos,)
        if mode is ReluMode.DECONV:
            return (np.maximum(g, 0),)
        return (g * (pos & (g > 0)),)

    return _record(out, (x,), bw)


def sigmoid(x: Tensor) -> Tensor:
    s = _stable_sigmoid(x.data)

    def bw(g, mode):
        return (g * s * (1 - s),)

    return _record(s, (x,), bw)


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1 / (1 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1 + ez)
    return out


def log(x: Tensor) -> Tensor:
    def bw(g, mode):
        return (g / x.data,)

    return _record(np.log(x.data), (x,), bw)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)

    def bw(g, mode):
        return (np.where(inside, g, 0).astype(g.dtype),)

    return _record(np.clip(x.data, lo, hi), (x,), bw)


# ---------------------------------------------------------------- image ops


def _check4(x: Tensor, what: str):
    if x.data.ndim != 4:
        raise TensorError(f"{what}: expected 4-d input [B,C,H,W], got shape {x.shape}")


def _im2col(xp: np.ndarray, k: int, h: int, w: int) -> np.ndarray:
    # xp: padded [B, C, H+k-1, W+k-1] -> [B, C*k*k, H*W]
    b, c = xp.shape[:2]
    cols = np.empty((b, c, k, k, h, w), dtype=xp.dtype)
    for dy in range(k):
        for dx in range(k):
            cols[:, :, dy, dx] = xp[:, :, dy:dy + h, dx:dx + w]
    return cols.reshape(b, c * k * k, h * w)


def _col2im(cols: np.ndarray, c: int, k: int, h: int, w: int, pad: int) -> np.ndarray:
    b = cols.shape[0]
    cols = cols.reshape(b, c, k, k, h, w)
    hp, wp = h + k - 1, w + k - 1
    xp = np.zeros((b, c, hp, wp), dtype=cols.dtype)
    for dy in range(k):
        for dx in range(k):
            xp[:, :, dy:dy + h, dx:dx + w] += cols[:, :, dy, dx]
    if pad:
        return xp[:, :, pad:hp - pad, pad:wp - pad]
    return xp


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, padding: int = 0) -> Tensor:
    """Stride-1 cross-correlation with zero padding."""
    _check4(x, "conv2d")
    if weight.data.ndim != 4:
        raise TensorError(f"conv2d: weight must be [Cout,Cin,k,k], got {weight.shape}")
    b, cin, h, w = x.shape
    cout, wcin, k, k2 = weight.shape
    if k != k2 or k % 2 == 0:
        raise TensorError(f"conv2d: kernel must be square with odd size, got {k}x{k2}")
    if wcin != cin:
        raise TensorError(f"conv2d: input channels (dim 1) {cin} != weight input channels {wcin}")
    if bias.shape != (cout,):
        raise TensorError(f"conv2d: bias must have shape ({cout},), got {bias.shape}")
    if padding < 0:
        raise TensorError("conv2d: padding must be >= 0")
    if h + 2 * padding < k or w + 2 * padding < k:
        raise TensorError(f"conv2d: kernel {k} larger than padded input {h}x{w}")

    kern = _conv_kernels()
    out, saved = kern.forward(x.data, weight.data, bias.data, padding)
    need_x = x.requires_grad

    def bw(g, mode):
        gx, gw = kern.backward(g, x.data, weight.data, padding, saved, need_x)
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _record(out, (x, weight, bias), bw)


class NumpyConv:
    """im2col kernels; the reference path and the fallback when torch is absent."""

    name = "numpy"

    @staticmethod
    def forward(x, w, bias, padding):
        b, cin, h, wd = x.shape
        cout, _, k, _ = w.shape
        ho, wo = h + 2 * padding - k + 1, wd + 2 * padding - k + 1
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
        cols = _im2col(xp, k, ho, wo)
        out = np.matmul(w.reshape(cout, -1), cols) + bias[None, :, None]
        return out.reshape(b, cout, ho, wo).astype(x.dtype, copy=False), cols

    @staticmethod
    def backward(g, x, w, padding, cols, need_x):
        b, cin, h, wd = x.shape
        cout, _, k, _ = w.shape
        ho, wo = g.shape[2:]
        g2 = g.reshape(b, cout, ho * wo)
        gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        gx = None
        if need_x:
            gcols = np.matmul(w.reshape(cout, -1).T, g2)
            gx = _col2im(gcols, cin, k, ho, wo, padding)[:, :, :h, :wd]
        return gx, gw.astype(w.dtype, copy=False)


class TorchConv:
    """The same contract computed with torch's CPU convolution kernels."""

    name = "torch"

    def __init__(self, torch):
        self.torch = torch
        self.F = torch.nn.functional
        self.grad = torch.nn.grad

    def forward(self, x, w, bias, padding):
        t = self.torch
        out = self.F.conv2d(t.from_numpy(x), t.from_numpy(w), t.from_numpy(bias), padding=padding)
        return out.numpy(), None

    def backward(self, g, x, w, padding, saved, need_x):
        t = self.torch
        gt = t.from_numpy(np.ascontiguousarray(g))
        gw = self.grad.conv2d_weight(t.from_numpy(x), w.shape, gt, padding=padding).numpy()
        gx = None
        if need_x:
            gx = self.grad.conv2d_input(x.shape, t.from_numpy(w), gt, padding=padding).numpy()
        return gx, gw


_CONV = {"impl": None}


def _conv_kernels():
    if _CONV["impl"] is None:
        set_conv_backend("auto")
    return _CONV["impl"]


def set_conv_backend(name: str = "auto"):
    """Select ``"numpy"``, ``"torch"`` or ``"auto"`` (torch when importable)."""
    if name == "numpy":
        _CONV["impl"] = NumpyConv()
    elif name in ("torch", "auto"):
        try:
            import torch
        except ImportError:
            if name == "torch":
                raise
            _CONV["impl"] = NumpyConv()
        else:
            _CONV["impl"] = TorchConv(torch)
    else:
        raise ValueError(f"unknown conv backend {name!r}")
    return _CONV["impl"]


def conv_backend() -> str:
    return _conv_kernels().name


def maxpool2(x: Tensor) -> Tensor:
    """2x2 non-overlapping max pooling; ties go to the first element in row-major order."""
    _check4(x, "maxpool2")
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise TensorError(f"maxpool2: spatial extents must be even, got {h}x{w}")
    win = x.data.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // 2, w // 2, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def bw(g, mode):
        gw = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gx = gw.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w)
        return (gx,)

    return _record(out, (x,), bw)


def upsample_nearest2(x: Tensor) -> Tensor:
    _check4(x, "upsample_nearest2")
    b, c, h, w = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (b, c, h, 2, w, 2)).reshape(b, c, 2 * h, 2 * w)

    def bw(g, mode):
        return (g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _record(out, (x,), bw)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise TensorError(f"concat: shapes {a.shape} and {b.shape} differ outside dim 1")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)

    def bw(g, mode):
        return g[:, :ca], g[:, ca:]

    return _record(out, (a, b), bw)


class BatchNormState:
    """Per-channel running mean and variance."""

    def __init__(self, channels: int, dtype=DTYPE):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
              momentum: float = 0.4, training: bool = True, eps: float = BN_EPS) -> Tensor:
    """Per-channel batch normalisation.

    Running statistics follow ``running = (1 - momentum) * running + momentum * batch``.
    """
    _check4(x, "batchnorm")
    if not 0.0 <= momentum <= 1.0:
        raise TensorError(f"batchnorm: momentum must lie in [0, 1], got {momentum}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise TensorError(f"batchnorm: gamma/beta must have shape ({c},)")
    dt = x.dtype.type
    g4 = gamma.data[None, :, None, None]
    if training:
        m = x.shape[0] * x.shape[2] * x.shape[3]
        if m < 2:
            raise TensorError("batchnorm: training mode needs B*H*W >= 2")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        state.mean[...] = (1 - momentum) * state.mean + momentum * mu
        state.var[...] = (1 - momentum) * state.var + momentum * var
        inv = (1.0 / np.sqrt(var + dt(eps))).astype(x.dtype)
        xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
        out = xhat * g4 + beta.data[None, :, None, None]

        def bw(g, mode):
            gbeta = g.sum(axis=(0, 2, 3))
            ggamma = (g * xhat).sum(axis=(0, 2, 3))
            gxhat = g * g4
            gx = (inv[None, :, None, None] / m) * (
                m * gxhat
                - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
            return gx.astype(x.dtype), ggamma, gbeta
    else:
        inv = (1.0 / np.sqrt(state.var + dt(eps))).astype(x.dtype)
        xhat = (x.data - state.mean[None, :, None, None]) * inv[None, :, None, None]
        out = xhat * g4 + beta.data[None, :, None, None]

        def bw(g, mode):
            return (g * g4 * inv[None, :, None, None],
                    (g * xhat).sum(axis=(0, 2, 3)),
                    g.sum(axis=(0, 2, 3)))

    return _record(out.astype(x.dtype, copy=False), (x, gamma, beta), bw)


def dropout(x: Tensor, rate: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout; identity in eval mode or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise TensorError(f"dropout: rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise TensorError("dropout: training mode needs a seeded rng")
    keep = (rng.random(x.shape, dtype=np.float32) >= rate).astype(x.dtype) * x.dtype.type(1.0 / (1.0 - rate))
    out = x.data * keep

    def bw(g, mode):
        return (g * keep,)

    return _record(out, (x,), bw)


def masked_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """``sum(x * weights)`` for a constant weight array."""
    w = np.asarray(weights, dtype=x.dtype)
    out = np.asarray((x.data * w).sum(dtype=x.dtype), dtype=x.dtype)

    def bw(g, mode):
        return (np.broadcast_to(g * w, x.shape).astype(x.dtype),)

    return _record(out, (x,), bw)


def set_threads(k: int) -> None:
    """Cap BLAS and conv-kernel thread pools at ``k``."""
    from threadpoolctl import threadpool_limits

    if k < 1:
        raise ValueError(f"threads must be >= 1, got {k}")
    threadpool_limits(k)
    if conv_backend() == "torch":
        import torch

        torch.set_num_threads(k)
