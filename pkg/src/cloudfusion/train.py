"""Alternating generator/discriminator training with image pools and LR decay."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .losses import (CycleBatch, FeatureExtractor, LossComponents, LossRecord, LossWeights, adv_loss_d,
                     adv_loss_g, append_loss_csv, aux_loss, cyc_loss, idt_loss, paired_losses, total_loss)
from .model import Ensemble, ModelConfig, as_batch
from .nn import save_checkpoint
from .optim import Adam, OptimizerConfig, TrainSchedule, lr_multiplier
from .raster import PatchTriplet, crop_triplet, shuffle_unpair
from .tensor import Tensor

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


class ImagePool:
    """Buffer of past generator outputs sampled for discriminator updates."""

    def __init__(self, capacity: int = 50, seed: int = 0):
        self.capacity = capacity
        self.buffer: list[np.ndarray] = []
        self.rng = np.random.default_rng(seed)

    def __len__(self) -> int:
        return len(self.buffer)

    def query(self, img: np.ndarray) -> np.ndarray:
        if self.capacity == 0:
            return img
        if len(self.buffer) < self.capacity:
            self.buffer.append(img.copy())
            return img
        if self.rng.uniform(0, 1) > 0.5:
            idx = int(self.rng.integers(0, self.capacity))
            old = self.buffer[idx]
            self.buffer[idx] = img.copy()
            return old
        return img


@dataclass(frozen=True)
class TrainConfig:
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)
    paired_fraction: float = 0.0
    ablate_mask: bool = False
    seed: int = 0
    crop: int | None = 200
    batch_size: int = 1
    pool_size: int = 50

    def __post_init__(self):
        if not 0 <= self.paired_fraction <= 1:
            raise ValueError(f"paired_fraction must be in [0, 1], got {self.paired_fraction}")
        if self.batch_size != 1:
            raise ValueError("only batch_size=1 is supported")


def paired_indices(n: int, fraction: float) -> list[int]:
    """Equally spaced indices round(i / fraction) for i < round(fraction * n)."""
    count = int(math.floor(fraction * n + 0.5))
    if count == 0:
        return []
    return sorted({min(n - 1, int(math.floor(i / fraction + 0.5))) for i in range(count)})


@dataclass
class Sample:
    s1: np.ndarray
    s2_cloudy: np.ndarray
    s2_cloudfree: np.ndarray
    mask: np.ndarray
    paired: bool


class Trainer:
    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.models = Ensemble(cfg.model, seed=cfg.seed)
        self.models.train()
        ocfg = cfg.optimizer
        self.opt_g = Adam(self.models.generator_parameters(), ocfg)
        self.opt_d1 = Adam(list(self.models.d_s1.named_parameters("d_s1.")), ocfg)
        self.opt_d2 = Adam(list(self.models.d_s2.named_parameters("d_s2.")), ocfg)
        self.pool_s1 = ImagePool(cfg.pool_size, seed=cfg.seed + 1)
        self.pool_s2 = ImagePool(cfg.pool_size, seed=cfg.seed + 2)
        self.extractor = FeatureExtractor(seed=cfg.seed + 3)
        self.iteration = 0

    def set_lr_multiplier(self, mult: float) -> None:
        for opt in (self.opt_g, self.opt_d1, self.opt_d2):
            opt.lr = self.cfg.optimizer.learning_rate * mult

    def _set_d_grad(self, flag: bool) -> None:
        for p in self.models.d_s1.parameters() + self.models.d_s2.parameters():
            p.requires_grad = flag

    def generator_forward(self, sample: Sample) -> tuple[CycleBatch, LossComponents]:
        """All generator passes of one step and the resulting loss components."""
        cfg, net = self.cfg, self.models
        g12, g21 = net.g_s1s2, net.g_s2s1
        s1 = as_batch(sample.s1)
        s2 = as_batch(sample.s2_cloudy)
        m = as_batch(np.ones_like(sample.mask) if cfg.ablate_mask else sample.mask)
        s2_hat, m_hat, _ = g12(s1, s2, m)
        s1_hat = g21(s2)
        b = CycleBatch(s1, s2, m, s1_hat=s1_hat, s2_hat=s2_hat, m_hat=m_hat,
                       s1_breve=g21(s2_hat), s2_breve=g12(s1_hat, s2, m)[0],
                       s1_dot=g21(s1), s2_dot=g12(s2, s2, m)[0])
        comps = LossComponents(adv=adv_loss_g(net.d_s1(s1_hat), net.d_s2(s2_hat, m)),
                               cyc=cyc_loss(b), idt=idt_loss(b), aux=aux_loss(m, m_hat))
        if sample.paired:
            comps.pix, comps.feat, comps.style = paired_losses(s2_hat, as_batch(sample.s2_cloudfree), self.extractor)
        return b, comps

    def train_step(self, sample: Sample) -> LossRecord:
        """One generator update followed by one update per discriminator."""
        cfg, net = self.cfg, self.models
        self._set_d_grad(False)
        self.opt_g.zero_grad()
        b, comps = self.generator_forward(sample)
        s1, m, s1_hat, s2_hat = b.s1, b.m, b.s1_hat, b.s2_hat
        real_s2 = as_batch(sample.s2_cloudfree)
        total = total_loss(comps, cfg.weights)
        for name in ("adv", "cyc", "idt", "aux", "pix", "feat", "style"):
            value = getattr(comps, name)
            if value is not None and not math.isfinite(value.item()):
                raise TrainingDiverged(f"non-finite L_{name} at iteration {self.iteration + 1}")
        if cfg.ablate_mask and comps.aux.item() != 0.0:
            raise AssertionError(f"aux loss {comps.aux.item()} != 0 under m=1 ablation")
        total.backward()
        self.opt_g.step()
        self._set_d_grad(True)

        self.opt_d1.zero_grad()
        fake_s1 = Tensor(self.pool_s1.query(s1_hat.data))
        loss_d1 = adv_loss_d(net.d_s1(s1), net.d_s1(fake_s1))
        loss_d1.backward()
        self.opt_d1.step()

        self.opt_d2.zero_grad()
        # pool stores image and its conditioning mask together
        fake = self.pool_s2.query(np.concatenate([s2_hat.data, m.data], axis=1))
        loss_d2 = adv_loss_d(net.d_s2(real_s2, m), net.d_s2(Tensor(fake[:, :3]), Tensor(fake[:, 3:])))
        loss_d2.backward()
        self.opt_d2.step()

        for name, v in (("D_S1", loss_d1), ("D_S2", loss_d2)):
            if not math.isfinite(v.item()):
                raise TrainingDiverged(f"non-finite {name} loss at iteration {self.iteration + 1}")
        self.iteration += 1

        def val(x):
            return None if x is None else x.item()

        return LossRecord(self.iteration, comps.adv.item(), comps.cyc.item(), comps.idt.item(), comps.aux.item(),
                          val(comps.pix), val(comps.feat), val(comps.style), total.item(),
                          loss_d1.item(), loss_d2.item())


def prepare_samples(dataset: Sequence[PatchTriplet], cfg: TrainConfig) -> list[Sample]:
    """Crop, cache masks, fix the paired subset and unpair the rest."""
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    items = list(dataset)
    if cfg.crop is not None:
        items = [crop_triplet(t, cfg.crop) for t in items]
    paired = set(paired_indices(len(items), cfg.paired_fraction))
    unpaired_idx = [i for i in range(len(items)) if i not in paired]
    if unpaired_idx:
        shuffled = shuffle_unpair([items[i] for i in unpaired_idx], seed=cfg.seed)
        for i, t in zip(unpaired_idx, shuffled):
            items[i] = t
    out = []
    for i, t in enumerate(items):
        if t.mask is None and not cfg.ablate_mask:
            raise ValueError(f"triplet {i} ({t.roi_id}) carries no cloud mask")
        mask = t.mask.data if t.mask is not None else np.ones((1, t.s1.height, t.s1.width), np.float32)
        out.append(Sample(t.s1.data, t.s2_cloudy.data, t.s2_cloudfree.data, mask, i in paired))
    return out


@dataclass
class FitResult:
    trainer: Trainer
    history: list[LossRecord]
    lr_trace: list[float]
    paired: list[int]
    checkpoints: list[Path]


def fit(dataset: Sequence[PatchTriplet], cfg: TrainConfig, out_dir: str | Path | None = None,
        max_steps: int | None = None) -> FitResult:
    samples = prepare_samples(dataset, cfg)
    trainer = Trainer(cfg)
    order_rng = np.random.default_rng(cfg.seed)
    history: list[LossRecord] = []
    lr_trace: list[float] = []
    checkpoints: list[Path] = []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    for epoch in range(cfg.schedule.epochs):
        mult = lr_multiplier(epoch, cfg.schedule)
        trainer.set_lr_multiplier(mult)
        lr_trace.append(cfg.optimizer.learning_rate * mult)
        epoch_records = []
        for idx in order_rng.permutation(len(samples)):
            epoch_records.append(trainer.train_step(samples[idx]))
            if max_steps is not None and trainer.iteration >= max_steps:
                break
        history.extend(epoch_records)
        log.info("epoch %d lr=%.3g mean L_total=%.4f", epoch, lr_trace[-1],
                 float(np.mean([r.total for r in epoch_records])))
        if out is not None:
            path = out / f"epoch_{epoch}.cfw1"
            save_checkpoint(path, trainer.models.state_dict())
            checkpoints.append(path)
            append_loss_csv(out / "losses.csv", epoch_records)
        if max_steps is not None and trainer.iteration >= max_steps:
            break
    paired = [i for i, s in enumerate(samples) if s.paired]
    return FitResult(trainer, history, lr_trace, paired, checkpoints)


def predict(models: Ensemble, triplet: PatchTriplet, ablate_mask: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """De-clouded image and regressed mask, eval mode, (C, H, W) arrays."""
    was_training = models.g_s1s2.training
    models.g_s1s2.eval()
    mask = triplet.mask.data if triplet.mask is not None and not ablate_mask else \
        np.ones((1, triplet.s1.height, triplet.s1.width), np.float32)
    s2_hat, m_hat, _ = models.g_s1s2(as_batch(triplet.s1.data), as_batch(triplet.s2_cloudy.data), as_batch(mask))
    models.g_s1s2.train(was_training)
    return s2_hat.data[0], m_hat.data[0]


def toy_config(seed: int = 7, **overrides) -> TrainConfig:
    """Reduced-width configuration for 16x16 desk-scale runs."""
    base = TrainConfig(schedule=TrainSchedule(10, 3), model=ModelConfig(ngf=8, ndf=8, n_blocks=9, n_layers=2),
                       seed=seed, crop=16)
    return replace(base, **overrides)
