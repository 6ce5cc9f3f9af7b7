"""Continuous cloud-probability maps and dataset coverage statistics."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .raster import Modality, Raster

THRESHOLD = 0.5
SIGMA = 2.0
RADIUS = 6  # 3 sigma
HIST_BINS = 20

# 0-indexed positions in the 13-band S2 ordering (B1..B8, B8A, B9..B12)
BLUE, GREEN, RED, CIRRUS = 1, 2, 3, 10
BASELINE_SCALE = 0.35
REFLECTANCE_SCALE = 10000.0

Detector = Callable[[np.ndarray], np.ndarray]


def baseline_detector(bands: np.ndarray) -> np.ndarray:
    """Brightness score from blue, green, red and the cirrus band.

    A stand-in for a learned detector: mean reflectance of the four bands
    divided by 0.35, clamped to [0, 1].
    """
    if bands.shape[0] != 13:
        raise ValueError(f"baseline detector needs 13 S2 bands, got {bands.shape[0]}")
    refl = bands[[BLUE, GREEN, RED, CIRRUS]].astype(np.float64) / REFLECTANCE_SCALE
    return np.clip(refl.mean(axis=0) / BASELINE_SCALE, 0.0, 1.0)


def cloud_probability(s2: Raster, detector: Detector | None = None) -> Raster:
    """Per-pixel cloud score in [0, 1] from a raw 13-band S2 raster."""
    det = baseline_detector if detector is None else detector
    score = np.asarray(det(s2.data), dtype=np.float64)
    if score.shape != (s2.height, s2.width):
        score = np.broadcast_to(score, (s2.height, s2.width))
    if not np.all(np.isfinite(score)):
        raise ValueError("detector returned non-finite scores")
    return Raster(np.clip(score, 0.0, 1.0)[None].astype(np.float32), Modality.MASK)


def gaussian_kernel(sigma: float = SIGMA, radius: int = RADIUS) -> np.ndarray:
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _blur(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    r = len(kernel) // 2
    # 'symmetric' repeats the edge pixel: (d c b a | a b c d)
    p = np.pad(img, r, mode="symmetric")
    h, w = img.shape
    rows = sum(kernel[i] * p[i:i + h, :] for i in range(len(kernel)))
    return sum(kernel[j] * rows[:, j:j + w] for j in range(len(kernel)))


def refine_mask(prob: Raster, threshold: float = THRESHOLD, sigma: float = SIGMA) -> Raster:
    """Zero scores below ``threshold``, then Gaussian-blur and clamp to [0, 1]."""
    x = prob.data[0].astype(np.float64)
    x = np.where(x >= threshold, x, 0.0)
    out = _blur(x, gaussian_kernel(sigma, int(round(3 * sigma))))
    return Raster(np.clip(out, 0.0, 1.0)[None].astype(np.float32), Modality.MASK)


def coverage_percent(m: Raster) -> float:
    return 100.0 * float(np.mean(m.data, dtype=np.float64))


@dataclass(frozen=True)
class CoverageStats:
    mean_percent: float
    std_percent: float
    histogram: tuple[int, ...]
    count: int

    def format(self, width: int = 40) -> str:
        lines = [f"mean={self.mean_percent:.2f}% std={self.std_percent:.2f}%"]
        top = max(self.histogram) or 1
        step = 100 / HIST_BINS
        for i, c in enumerate(self.histogram):
            bar = "#" * int(round(width * c / top))
            lines.append(f"{i * step:5.1f}-{(i + 1) * step:5.1f}% {c:6d} {bar}")
        return "\n".join(lines)


def coverage_stats(masks: Sequence[Raster]) -> CoverageStats:
    if len(masks) == 0:
        raise ValueError("coverage_stats needs at least one mask")
    return stats_from_percents([coverage_percent(m) for m in masks])


def stats_from_percents(percents: Sequence[float]) -> CoverageStats:
    pc = np.asarray(percents, dtype=np.float64)
    hist, _ = np.histogram(pc, bins=HIST_BINS, range=(0.0, 100.0))
    return CoverageStats(float(pc.mean()), float(pc.std()), tuple(int(c) for c in hist), len(pc))
