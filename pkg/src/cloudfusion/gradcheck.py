"""Central finite-difference checks for the autodiff engine (64-bit)."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, float64


@dataclass
class GradcheckResult:
    max_rel_error: float
    checked: int
    skipped: int

    @property
    def ok(self) -> bool:
        return self.checked > 0


def numerical_grad(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], index: int, h: float) -> np.ndarray:
    x = arrays[index]
    out = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn(*[Tensor(a) for a in arrays]).item()
        flat[i] = orig - h
        fm = fn(*[Tensor(a) for a in arrays]).item()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return out


def check_gradients(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], h: float = 1e-4,
                    rtol: float = 1e-5, floor: float = 1e-3,
                    skip: Callable[[int, np.ndarray], np.ndarray] | None = None) -> GradcheckResult:
    """Compare analytic and central-difference gradients of scalar ``fn``.

    ``fn`` takes one Tensor per input and returns a scalar Tensor. The error
    per element is ``|a - n| / max(|a|, |n|, floor)``. ``skip(i, x)`` may
    return a boolean mask of elements of input ``i`` to leave out (e.g. near
    relu kinks). Raises AssertionError naming the worst element on failure.
    """
    with float64():
        arrays = [np.array(a, dtype=np.float64) for a in inputs]
        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        fn(*leaves).backward()
        worst, checked, skipped = 0.0, 0, 0
        for i, leaf in enumerate(leaves):
            analytic = leaf.grad if leaf.grad is not None else np.zeros_like(arrays[i])
            numeric = numerical_grad(fn, arrays, i, h)
            mask = np.ones(arrays[i].shape, dtype=bool)
            if skip is not None:
                mask &= ~np.asarray(skip(i, arrays[i]), dtype=bool)
            err = np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
            err = np.where(mask, err, 0.0)
            checked += int(mask.sum())
            skipped += int((~mask).sum())
            if err.size and err.max() > worst:
                worst = float(err.max())
            if err.size and err.max() >= rtol:
                j = np.unravel_index(int(np.argmax(err)), err.shape)
                raise AssertionError(
                    f"input {i} element {j}: analytic {analytic[j]:.10g} vs numeric {numeric[j]:.10g} "
                    f"(rel err {err[j]:.3g} >= {rtol})")
    return GradcheckResult(worst, checked, skipped)
