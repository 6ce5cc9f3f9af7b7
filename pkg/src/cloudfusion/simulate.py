"""Synthetic cloudy observations: Perlin alpha-blending and copy-paste blending.

Also generates fully synthetic scenes (S1, cloud-free and cloudy S2) so the
training and evaluation pipeline can run without the real archive.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cloudmask import cloud_probability, refine_mask
from .raster import Modality, PatchTriplet, Raster, clip_rescale, s1_three_channel, s2_rgb

CLOUD_VALUE = 1.0

_DIRECTIONS = np.array([(np.cos(a), np.sin(a)) for a in np.arange(8) * np.pi / 4])
_M64 = np.uint64(0xFFFFFFFFFFFFFFFF)


@dataclass(frozen=True)
class PerlinConfig:
    seed: int = 0
    octaves: int = 4
    persistence: float = 0.5
    lacunarity: float = 2.0
    base_period: float = 64

    def __post_init__(self):
        if self.octaves < 1:
            raise ValueError(f"octaves must be >= 1, got {self.octaves}")
        if not 0 < self.persistence <= 1:
            raise ValueError(f"persistence must be in (0, 1], got {self.persistence}")
        if self.lacunarity <= 1:
            raise ValueError(f"lacunarity must be > 1, got {self.lacunarity}")
        if self.base_period < 2:
            raise ValueError(f"base_period must be >= 2, got {self.base_period}")


def _mix(z: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def _gradient_index(ix: np.ndarray, iy: np.ndarray, octave: int, seed: int) -> np.ndarray:
    with np.errstate(over="ignore"):
        key = _mix(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) + np.uint64(0x9E3779B97F4A7C15) * np.uint64(octave + 1))
        h = _mix(key ^ ix.astype(np.int64).view(np.uint64))
        h = _mix(h ^ (iy.astype(np.int64).view(np.uint64) * np.uint64(0xD6E8FEB86659FD93)))
    return (h & np.uint64(7)).astype(np.intp)


def _fade(t: np.ndarray) -> np.ndarray:
    return t * t * t * (t * (t * 6 - 15) + 10)


def _octave(width: int, height: int, cell: float, octave: int, seed: int, origin: tuple[int, int]) -> np.ndarray:
    ys = (np.arange(height) + origin[0]) / cell
    xs = (np.arange(width) + origin[1]) / cell
    px, py = np.meshgrid(xs, ys)
    x0, y0 = np.floor(px), np.floor(py)
    fx, fy = px - x0, py - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)

    def corner(dx, dy):
        g = _DIRECTIONS[_gradient_index(x0 + dx, y0 + dy, octave, seed)]
        return g[..., 0] * (fx - dx) + g[..., 1] * (fy - dy)

    u, v = _fade(fx), _fade(fy)
    top = corner(0, 0) + u * (corner(1, 0) - corner(0, 0))
    bottom = corner(0, 1) + u * (corner(1, 1) - corner(0, 1))
    return top + v * (bottom - top)


def perlin_raw(width: int, height: int, cfg: PerlinConfig = PerlinConfig(),
               origin: tuple[int, int] = (0, 0)) -> np.ndarray:
    """Un-normalized octave sum; ``origin`` is the (row, col) of the top-left pixel."""
    total = np.zeros((height, width))
    for o in range(cfg.octaves):
        cell = cfg.base_period / cfg.lacunarity ** o
        total += cfg.persistence ** o * _octave(width, height, cell, o, cfg.seed, origin)
    return total


def perlin(width: int, height: int, cfg: PerlinConfig = PerlinConfig()) -> Raster:
    """Octave Perlin noise min-max normalized to [0, 1] as a 1-band mask."""
    raw = perlin_raw(width, height, cfg)
    span = raw.max() - raw.min()
    out = (raw - raw.min()) / span if span > 0 else np.zeros_like(raw)
    return Raster(out[None].astype(np.float32), Modality.MASK)


def _check_dims(*rasters: Raster) -> None:
    dims = {(r.height, r.width) for r in rasters}
    if len(dims) != 1:
        raise ValueError(f"raster dims differ: {sorted(dims)}")


def blend_perlin(cloudfree: Raster, alpha: Raster) -> tuple[Raster, Raster]:
    """Alpha-blend every band towards white; the alpha map doubles as the mask."""
    _check_dims(cloudfree, alpha)
    a = alpha.data[0].astype(np.float64)
    cloudy = (1 - a) * cloudfree.data + a * CLOUD_VALUE
    return cloudfree.with_data(cloudy.astype(np.float32)), Raster(alpha.data.copy(), Modality.MASK)


def blend_copy_paste(cloudfree: Raster, real_cloudy: Raster, m: Raster) -> Raster:
    _check_dims(cloudfree, real_cloudy, m)
    w = m.data[0].astype(np.float64)
    out = (1 - w) * cloudfree.data + w * real_cloudy.data
    return cloudfree.with_data(out.astype(np.float32))


# synthetic scenes ------------------------------------------------------------------

# per-band (offset, landcover gain, texture gain) in reflectance units, 13 bands
_BAND_MODEL = np.array([
    (0.10, 0.05, 0.02), (0.04, 0.06, 0.03), (0.04, 0.10, 0.04), (0.03, 0.16, 0.05),
    (0.08, 0.25, 0.06), (0.15, 0.10, 0.05), (0.18, 0.08, 0.05), (0.20, 0.05, 0.06),
    (0.20, 0.06, 0.05), (0.05, 0.02, 0.01), (0.002, 0.001, 0.001), (0.15, 0.20, 0.05),
    (0.08, 0.25, 0.04),
])
_CLOUD_REFLECTANCE = np.array([0.85, 0.85, 0.85, 0.85, 0.82, 0.8, 0.8, 0.8, 0.78, 0.6, 0.5, 0.6, 0.5])


@dataclass(frozen=True)
class Scene:
    """One synthetic acquisition: raw S1 (dB), raw S2 (DN) clear and cloudy, cloud thickness."""
    vv: np.ndarray
    vh: np.ndarray
    s2_clear: np.ndarray
    s2_cloudy: np.ndarray
    thickness: np.ndarray


def synthetic_scene(size: int, seed: int, cloud_seed: int | None = None, coverage: float | None = None) -> Scene:
    rng = np.random.default_rng(seed)
    period = max(2.0, size / 2)
    land = perlin(size, size, PerlinConfig(seed=seed, octaves=3, base_period=period)).data[0].astype(np.float64)
    texture = perlin(size, size, PerlinConfig(seed=seed + 7919, octaves=2, base_period=max(2.0, period / 2))).data[0]
    refl = _BAND_MODEL[:, 0, None, None] + _BAND_MODEL[:, 1, None, None] * land + _BAND_MODEL[:, 2, None, None] * texture
    s2_clear = np.clip(refl, 0, 1) * 10000.0

    speckle = rng.gamma(8.0, 1 / 8.0, size=(2, size, size))
    vv = -20.0 + 14.0 * land + 3.0 * texture + 10 * np.log10(speckle[0])
    vh = vv - 6.0 - 2.0 * land + 10 * np.log10(speckle[1] / speckle[0] + 1e-6) * 0.5

    crng = np.random.default_rng(seed if cloud_seed is None else cloud_seed)
    cov = crng.uniform(0.05, 0.7) if coverage is None else coverage
    field = perlin(size, size, PerlinConfig(seed=int(crng.integers(2**31)), octaves=4,
                                            base_period=period)).data[0].astype(np.float64)
    # threshold the field so roughly `cov` of the area is cloudy, soft edge
    t = np.quantile(field, 1 - cov) if 0 < cov < 1 else (2.0 if cov <= 0 else -1.0)
    thickness = np.clip((field - t) / 0.15, 0.0, 1.0)
    cloud = _CLOUD_REFLECTANCE[:, None, None] * 10000.0
    s2_cloudy = (1 - thickness) * s2_clear + thickness * cloud
    return Scene(vv, vh, s2_clear, s2_cloudy, thickness)


def scene_triplet(scene: Scene, roi_id: str = "", split: str = "train", scheme: str = "real",
                  perlin_seed: int = 0) -> PatchTriplet:
    """Normalize a scene into a training triplet with its cloud mask.

    ``scheme`` picks the cloudy image: ``real`` keeps the scene's own cloudy
    acquisition, ``perlin`` alpha-blends Perlin noise over the clear image,
    ``copy`` blends the paired cloudy image over the clear one weighted by
    its cloud mask.
    """
    s1 = clip_rescale(s1_three_channel(scene.vv, scene.vh), "S1")
    clear = clip_rescale(s2_rgb(Raster(scene.s2_clear)), "S2")
    size = clear.height
    if scheme == "perlin":
        alpha = perlin(size, size, PerlinConfig(seed=perlin_seed, base_period=max(2.0, size / 2)))
        cloudy, m = blend_perlin(clear, alpha)
    elif scheme in ("real", "copy"):
        m = refine_mask(cloud_probability(Raster(scene.s2_cloudy)))
        real = clip_rescale(s2_rgb(Raster(scene.s2_cloudy)), "S2")
        cloudy = real if scheme == "real" else blend_copy_paste(clear, real, m)
    else:
        raise ValueError(f"unknown scheme {scheme!r}; expected real, perlin or copy")
    return PatchTriplet(s1, cloudy, clear, roi_id=roi_id, split=split, mask=m)


def toy_triplets(n: int, size: int, seed: int = 0, scheme: str = "copy", split: str = "train",
                 cloud_seed: int | None = None) -> list[PatchTriplet]:
    """``n`` synthetic triplets. ``cloud_seed`` decouples cloud shapes from the land scenes."""
    out = []
    for i in range(n):
        s = seed * 100003 + i
        cs = None if cloud_seed is None else cloud_seed * 100003 + i
        scene = synthetic_scene(size, s, cloud_seed=cs)
        out.append(scene_triplet(scene, roi_id=f"roi{seed}_{i}", split=split, scheme=scheme, perlin_seed=s + 17))
    return out
