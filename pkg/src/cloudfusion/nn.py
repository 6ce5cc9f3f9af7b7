"""Layers, parameter containers, spectral normalization and checkpoints."""
from __future__ import annotations

import struct
import warnings
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

CHECKPOINT_MAGIC = b"CFW1"


class ZeroNormWarning(RuntimeWarning):
    """Spectral normalization was asked to normalize an all-zero weight."""


class CheckpointError(ValueError):
    pass


class Module:
    """Attribute-walking parameter container.

    Parameters are ``Tensor`` attributes with ``requires_grad``; non-trainable
    arrays (spectral-norm ``u`` vectors) are registered in ``_buffers``.
    """

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, value in getattr(self, "_buffers", {}).items():
            yield f"{prefix}{key}", value
        for key, value in vars(self).items():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{key}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{prefix}{key}.{i}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, list):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = {}
        for m_prefix, m in _prefixed_modules(self):
            for key in getattr(m, "_buffers", {}):
                buffers[m_prefix + key] = (m, key)
        expected = set(params) | set(buffers)
        missing = expected - set(state)
        unexpected = set(state) - expected
        if missing or unexpected:
            raise CheckpointError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise CheckpointError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=p.dtype)
        for name, (m, key) in buffers.items():
            m._buffers[key] = np.array(state[name], dtype=np.float64)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _prefixed_modules(root: Module, prefix: str = ""):
    yield prefix, root
    for key, value in vars(root).items():
        if isinstance(value, Module):
            yield from _prefixed_modules(value, f"{prefix}{key}.")
        elif isinstance(value, list):
            for i, item in enumerate(value):
                if isinstance(item, Module):
                    yield from _prefixed_modules(item, f"{prefix}{key}.{i}.")


SN_WARMUP_ITERS = 100


def _normalize(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def spectral_normalize(weight: Tensor, u: np.ndarray, power_iters: int = 1) -> tuple[Tensor, np.ndarray]:
    """Divide ``weight`` by a power-iteration estimate of its top singular value.

    The weight is viewed as an (out_ch, rest) matrix. Returns the normalized
    weight (differentiable w.r.t. ``weight``) and the updated left vector.
    An all-zero weight is returned unchanged with a :class:`ZeroNormWarning`.
    """
    mat = weight.data.reshape(weight.shape[0], -1).astype(np.float64)
    if not np.any(mat):
        warnings.warn("spectral_normalize: zero weight matrix left unnormalized", ZeroNormWarning, stacklevel=2)
        return weight, u
    u = np.asarray(u, dtype=np.float64)
    v = _normalize(mat.T @ u)
    for _ in range(power_iters):
        v = _normalize(mat.T @ u)
        u = _normalize(mat @ v)
    return T.spectral_scale(weight, u, v), u


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, k: int, stride: int = 1, pad: int = 0,
                 bias: bool = True, spectral: bool = False):
        self.weight = Tensor(np.zeros((out_ch, in_ch, k, k)), requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch), requires_grad=True) if bias else None
        self.stride, self.pad = stride, pad
        self.spectral = spectral
        self._buffers: dict[str, np.ndarray] = {}
        if spectral:
            self._buffers["weight_u"] = _normalize(np.ones(out_ch, dtype=np.float32))

    def effective_weight(self) -> Tensor:
        if not self.spectral:
            return self.weight
        # 1 power iteration per training forward; u frozen in eval
        iters = 1 if self.training else 0
        w, u = spectral_normalize(self.weight, self._buffers["weight_u"], iters)
        if self.training:
            # buffers are stored in 32-bit like every checkpointed tensor
            self._buffers["weight_u"] = u.astype(np.float32)
        return w

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.effective_weight(), self.bias, self.stride, self.pad)


class ConvTranspose2d(Module):
    def __init__(self, in_ch: int, out_ch: int, k: int, stride: int = 1, pad: int = 0, out_pad: int = 0):
        self.weight = Tensor(np.zeros((in_ch, out_ch, k, k)), requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch), requires_grad=True)
        self.stride, self.pad, self.out_pad = stride, pad, out_pad

    def forward(self, x: Tensor) -> Tensor:
        return T.conv_transpose2d(x, self.weight, self.bias, self.stride, self.pad, self.out_pad)


class InstanceNorm(Module):
    def __init__(self, ch: int, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(ch), requires_grad=True)
        self.beta = Tensor(np.zeros(ch), requires_grad=True)
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.instance_norm(x, self.gamma, self.beta, self.eps)


def init_weights(module: Module, seed: int, std: float = 0.02) -> Module:
    """Gaussian N(0, std) conv weights, zero biases, unit norm scales.

    Draws happen in ``named_parameters`` order so a seed fixes every value.
    """
    rng = np.random.default_rng(seed)
    for m in module.modules():
        if isinstance(m, (Conv2d, ConvTranspose2d)):
            m.weight.data = rng.normal(0.0, std, m.weight.shape).astype(m.weight.dtype)
            if m.bias is not None:
                m.bias.data = np.zeros_like(m.bias.data)
            if isinstance(m, Conv2d) and m.spectral:
                # warm-start u so the very first forward already sees a converged estimate
                u = _normalize(rng.normal(size=m.weight.shape[0]))
                _, u = spectral_normalize(m.weight, u, SN_WARMUP_ITERS)
                m._buffers["weight_u"] = u.astype(np.float32)
        elif isinstance(m, InstanceNorm):
            m.gamma.data = np.ones_like(m.gamma.data)
            m.beta.data = np.zeros_like(m.beta.data)
    return module


# checkpoints ----------------------------------------------------------------------

def save_checkpoint(path: str | Path, state: dict[str, np.ndarray]) -> None:
    chunks = [CHECKPOINT_MAGIC]
    for name, arr in state.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    pos = 4
    state: dict[str, np.ndarray] = {}

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated at byte {pos}, needed {n} more")
        out = buf[pos:pos + n]
        pos += n
        return out

    while pos < len(buf):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(dims, dtype=np.int64))
        state[name] = np.frombuffer(take(4 * count), dtype="<f4").reshape(dims).astype(np.float32)
    return state
