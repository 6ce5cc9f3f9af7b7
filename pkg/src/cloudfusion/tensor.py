"""Minimal reverse-mode autodiff over numpy arrays.

Only the operations the cloud-removal networks need are provided. Arrays are
NCHW and 32-bit by default; :func:`float64` switches newly created tensors to
64-bit, which is what the finite-difference gradient checks run under.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_DTYPE = np.float32


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class ParameterError(ValueError):
    """Raised for invalid operator hyper-parameters."""


def default_dtype():
    return _DTYPE


@contextlib.contextmanager
def float64() -> Iterator[None]:
    """Create tensors in 64-bit precision inside the block."""
    global _DTYPE
    prev = _DTYPE
    _DTYPE = np.float64
    try:
        yield
    finally:
        _DTYPE = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64) or arr.dtype != _DTYPE:
            arr = arr.astype(_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out._parents = ()
        out._backward = None
        out.name = None
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = _topological(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # arithmetic -------------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, -_lift(other, self))

    def __rsub__(self, other):
        return add(_lift(other, self), -self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def abs(self):
        return tabs(self)


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# elementwise ----------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    b = _lift(b, a)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._make(out, (a, b), backward)


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = np.asarray(b, dtype=a.dtype)
        return Tensor._make(a.data * s, (a,), lambda g: (g * s,))
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._make(out, (a, b), backward)


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.data ** exponent
    return Tensor._make(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),))


def tabs(a: Tensor) -> Tensor:
    return Tensor._make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def tsum(a: Tensor) -> Tensor:
    return Tensor._make(np.asarray(a.data.sum(), dtype=a.dtype), (a,),
                        lambda g: (np.broadcast_to(g, a.shape).copy(),))


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    return Tensor._make(np.asarray(a.data.mean(), dtype=a.dtype), (a,),
                        lambda g: (np.full(a.shape, g / n, dtype=a.dtype),))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return Tensor._make(np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    scale = np.where(x.data > 0, 1.0, slope).astype(x.dtype)
    return Tensor._make(x.data * scale, (x,), lambda g: (g * scale,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return Tensor._make(y, (x,), lambda g: (g * (1 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    # split on sign so exp never overflows
    z = np.exp(-np.abs(x.data))
    y = np.where(x.data >= 0, 1 / (1 + z), z / (1 + z)).astype(x.dtype)
    return Tensor._make(y, (x,), lambda g: (g * y * (1 - y),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return Tensor._make(out, tuple(tensors), backward)


def dropout(x: Tensor, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout: kept activations are scaled by 1/(1-p) at train time."""
    if not training or p == 0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1 - p)
    return Tensor._make(x.data * keep, (x,), lambda g: (g * keep,))


# convolution ------------------------------------------------------------------

def _check_conv(x_shape, w_shape, stride, pad, transposed=False):
    if len(x_shape) != 4 or len(w_shape) != 4:
        raise DimensionError(f"expected 4-D input and weight, got input {x_shape} and weight {w_shape}")
    in_axis = 0 if transposed else 1
    if x_shape[1] != w_shape[in_axis]:
        raise DimensionError(
            f"input channels (axis 1 of input, {x_shape[1]}) != weight in-channels "
            f"(axis {in_axis} of weight, {w_shape[in_axis]})")
    if stride < 1 or pad < 0:
        raise ParameterError(f"need stride >= 1 and pad >= 0, got stride={stride}, pad={pad}")


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # (N, C, Ho, Wo, kh, kw) view
    return sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = _windows(xp, w.shape[2], w.shape[3], stride)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # N, Ho, Wo, O
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _conv_weight_grad(x: np.ndarray, g: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = _windows(xp, kh, kw, stride)[:, :, : g.shape[2], : g.shape[3]]
    gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # O, C, kh, kw
    return gw


def _conv_input_grad(g: np.ndarray, w: np.ndarray, in_shape: tuple[int, ...], stride: int, pad: int) -> np.ndarray:
    n, c, h, wd = in_shape
    kh, kw = w.shape[2], w.shape[3]
    ho, wo = g.shape[2], g.shape[3]
    cols = np.tensordot(g, w, axes=([1], [0]))  # N, Ho, Wo, C, kh, kw
    cols = cols.transpose(0, 3, 4, 5, 1, 2)  # N, C, kh, kw, Ho, Wo
    dxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    return dxp[:, :, pad:pad + h, pad:pad + wd]


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    _check_conv(x.shape, weight.shape, stride, pad)
    kh, kw = weight.shape[2:]
    if x.shape[2] + 2 * pad < kh or x.shape[3] + 2 * pad < kw:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {x.shape[2:]} (pad={pad})")
    out = _conv_forward(x.data, weight.data, stride, pad)
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1)

    def backward(g):
        gx = _conv_input_grad(g, weight.data, x.shape, stride, pad) if x.requires_grad else None
        gw = _conv_weight_grad(x.data, g, kh, kw, stride, pad) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, backward)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
                     pad: int = 0, out_pad: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d`. ``weight`` is laid out (in_ch, out_ch, kh, kw)."""
    if out_pad >= stride or out_pad < 0:
        raise ParameterError(f"out_pad must satisfy 0 <= out_pad < stride, got out_pad={out_pad}, stride={stride}")
    _check_conv(x.shape, weight.shape, stride, pad, transposed=True)
    n, _, h, wd = x.shape
    kh, kw = weight.shape[2:]
    ho = (h - 1) * stride - 2 * pad + kh + out_pad
    wo = (wd - 1) * stride - 2 * pad + kw + out_pad
    if ho < 1 or wo < 1:
        raise DimensionError(f"transposed conv output would be {ho}x{wo}")
    out_shape = (n, weight.shape[1], ho, wo)
    out = _conv_input_grad(x.data, weight.data, out_shape, stride, pad)
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1)

    def backward(g):
        gx = _conv_forward(g, weight.data, stride, pad)[:, :, :h, :wd] if x.requires_grad else None
        gw = _conv_weight_grad(g, x.data, kh, kw, stride, pad) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(np.ascontiguousarray(out), parents, backward)


# normalization ------------------------------------------------------------------

def instance_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    if x.ndim != 4:
        raise DimensionError(f"instance_norm expects NCHW input, got shape {x.shape}")
    m = x.shape[2] * x.shape[3]
    if m < 2:
        raise DimensionError(f"instance_norm needs H*W >= 2, got {x.shape[2]}x{x.shape[3]}")
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat
    if gamma is not None:
        out = out * gamma.data.reshape(1, -1, 1, 1)
    if beta is not None:
        out = out + beta.data.reshape(1, -1, 1, 1)

    def backward(g):
        gg = g * gamma.data.reshape(1, -1, 1, 1) if gamma is not None else g
        gx = None
        if x.requires_grad:
            gx = inv * (gg - gg.mean(axis=(2, 3), keepdims=True)
                        - xhat * (gg * xhat).mean(axis=(2, 3), keepdims=True))
        ggamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma is not None else None
        gbeta = g.sum(axis=(0, 2, 3)) if beta is not None else None
        return tuple(v for v, t in ((gx, x), (ggamma, gamma), (gbeta, beta)) if t is not None)

    parents = tuple(t for t in (x, gamma, beta) if t is not None)
    return Tensor._make(out.astype(x.dtype, copy=False), parents, backward)


def spectral_scale(weight: Tensor, u: np.ndarray, v: np.ndarray) -> Tensor:
    """``weight / sigma`` with ``sigma = u^T W v``; u and v are held constant."""
    mat = weight.data.reshape(weight.shape[0], -1)
    sigma = float(u @ mat @ v)
    outer = np.outer(u, v).reshape(weight.shape).astype(weight.dtype)

    def backward(g):
        return (g / sigma - (np.sum(g * weight.data) / sigma ** 2) * outer,)

    return Tensor._make(weight.data / np.asarray(sigma, dtype=weight.dtype), (weight,), backward)


def gram(x: Tensor) -> Tensor:
    """Per-sample channel Gram matrices normalized by C*H*W: (N, C, C)."""
    n, c, h, w = x.shape
    f = x.data.reshape(n, c, h * w)
    norm = c * h * w
    out = np.matmul(f, f.transpose(0, 2, 1)) / norm

    def backward(g):
        return (np.matmul(g + g.transpose(0, 2, 1), f).reshape(x.shape) / norm,)

    return Tensor._make(out.astype(x.dtype, copy=False), (x,), backward)
