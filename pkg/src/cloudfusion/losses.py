"""Mask-weighted cycle-consistent GAN objectives and supervised paired losses.

All L1 norms are means over the elements, so values do not depend on image
size. Cloud masks broadcast across image channels.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .nn import Conv2d, Module, load_checkpoint
from .tensor import Tensor


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


@dataclass(frozen=True)
class LossWeights:
    lambda_adv: float = 5.0
    lambda_cyc: float = 10.0
    lambda_idt: float = 1.0
    lambda_aux: float = 10.0
    lambda_pix: float = 10.0
    lambda_feat: float = 1.0
    lambda_style: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be >= 0")


@dataclass
class CycleBatch:
    s1: Tensor
    s2: Tensor
    m: Tensor
    s1_hat: Tensor | None = None
    s2_hat: Tensor | None = None
    s1_breve: Tensor | None = None
    s2_breve: Tensor | None = None
    s1_dot: Tensor | None = None
    s2_dot: Tensor | None = None
    m_hat: Tensor | None = None


def _l1(x: Tensor) -> Tensor:
    return T.tabs(x).mean()


def adv_loss_g(d_s1_on_s1hat, d_s2_on_s2hat) -> Tensor:
    a, b = _t(d_s1_on_s1hat), _t(d_s2_on_s2hat)
    return ((a - 1.0) ** 2).mean() + ((b - 1.0) ** 2).mean()


def adv_loss_d(scores_real, scores_fake) -> Tensor:
    r, f = _t(scores_real), _t(scores_fake)
    return ((r - 1.0) ** 2).mean() + (f ** 2).mean()


def cyc_loss(b: CycleBatch) -> Tensor:
    m = _t(b.m)
    return _l1(m * (_t(b.s1) - b.s1_breve)) + _l1((1.0 - m) * (_t(b.s2) - b.s2_breve))


def idt_loss(b: CycleBatch) -> Tensor:
    m = _t(b.m)
    return _l1(m * (_t(b.s1) - b.s1_dot)) + _l1(m * (_t(b.s2) - b.s2_dot))


def aux_loss(m, m_hat) -> Tensor:
    m = _t(m)
    return _l1((1.0 - m) * (m - _t(m_hat)))


@dataclass
class LossComponents:
    adv: object
    cyc: object
    idt: object
    aux: object
    pix: object = None
    feat: object = None
    style: object = None


def total_loss(c: LossComponents, w: LossWeights = LossWeights()):
    """Weighted sum; paired terms are included only when present."""
    out = w.lambda_adv * c.adv + w.lambda_cyc * c.cyc + w.lambda_idt * c.idt + w.lambda_aux * c.aux
    for value, weight in ((c.pix, w.lambda_pix), (c.feat, w.lambda_feat), (c.style, w.lambda_style)):
        if value is not None:
            out = out + weight * value
    return out


# paired / perceptual ---------------------------------------------------------------

class FeatureExtractor(Module):
    """Fixed random-weight conv stack exposing intermediate ReLU activations.

    Stands in for a pretrained perceptual network. Weights are He-initialized
    from ``seed`` and never trained; ``load`` swaps in external weights stored
    as a CFW1 checkpoint with matching names.
    """

    CHANNELS = (16, 16, 32, 32, 32, 64, 64, 64)

    def __init__(self, taps: Sequence[int] = (3, 5, 8), seed: int = 1234, in_ch: int = 3):
        rng = np.random.default_rng(seed)
        self.layers = []
        prev = in_ch
        for ch in self.CHANNELS:
            conv = Conv2d(prev, ch, 3, 1, 1)
            conv.weight.data = rng.normal(0, math.sqrt(2.0 / (9 * prev)), conv.weight.shape).astype(np.float32)
            conv.weight.requires_grad = False
            conv.bias.requires_grad = False
            self.layers.append(conv)
            prev = ch
        self.taps = tuple(taps)

    def named_weights(self) -> dict[str, Tensor]:
        out = {}
        for i, conv in enumerate(self.layers):
            out[f"layers.{i}.weight"] = conv.weight
            out[f"layers.{i}.bias"] = conv.bias
        return out

    def load(self, path: str | Path) -> None:
        state = load_checkpoint(path)
        for name, t in self.named_weights().items():
            if name not in state or state[name].shape != t.shape:
                raise ValueError(f"extractor checkpoint lacks a {t.shape} entry for {name}")
            t.data = state[name].astype(t.dtype)

    def forward(self, x: Tensor) -> list[Tensor]:
        feats = []
        h = x
        for i, conv in enumerate(self.layers, start=1):
            w = Tensor(conv.weight.data)
            b = Tensor(conv.bias.data)
            h = T.relu(T.conv2d(h, w, b, 1, 1))
            if i in self.taps:
                feats.append(h)
            if i >= max(self.taps):
                break
        return feats


class IdentityExtractor:
    """Single tap returning the input unchanged."""

    taps = (0,)

    def __call__(self, x: Tensor) -> list[Tensor]:
        return [x]


def paired_losses(s2_hat, s2_target, extractor: Callable[[Tensor], list[Tensor]]) -> tuple[Tensor, Tensor, Tensor]:
    """Pixel L1, feature L1 and Gram-matrix style L1 between prediction and target."""
    pred, target = _t(s2_hat), _t(s2_target)
    pix = _l1(pred - target)
    fp, ft = extractor(pred), extractor(target)
    declared = len(getattr(extractor, "taps", fp))
    if len(fp) != declared or len(ft) != declared or not fp:
        raise ValueError(f"extractor declared {declared} taps but returned {len(fp)} and {len(ft)} feature maps")
    target_feats = [Tensor(f.data) for f in ft]
    feat = sum((_l1(a - b) for a, b in zip(fp, target_feats)), Tensor(0.0)) / len(fp)
    style = sum((_l1(T.gram(a) - T.gram(b)) for a, b in zip(fp, target_feats)), Tensor(0.0)) / len(fp)
    return pix, feat, style


# loss log ----------------------------------------------------------------------------

CSV_COLUMNS = ("iter", "L_adv", "L_cyc", "L_idt", "L_aux", "L_pix", "L_feat", "L_style", "L_total")


@dataclass(frozen=True)
class LossRecord:
    """Scalar losses of one generator update; paired terms are None when skipped."""
    iter: int
    adv: float
    cyc: float
    idt: float
    aux: float
    pix: float | None
    feat: float | None
    style: float | None
    total: float
    d_s1: float = math.nan
    d_s2: float = math.nan

    def csv_row(self) -> list[str]:
        vals = (self.adv, self.cyc, self.idt, self.aux, self.pix, self.feat, self.style, self.total)
        return [str(self.iter)] + ["" if v is None else f"{v:.6f}" for v in vals]


def append_loss_csv(path: str | Path, records: Sequence[LossRecord]) -> None:
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with path.open("a", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if new:
            writer.writerow(CSV_COLUMNS)
        for r in records:
            writer.writerow(r.csv_row())
