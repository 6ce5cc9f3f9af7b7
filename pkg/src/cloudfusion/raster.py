"""Raster container, normalization, tiling and patch-triplet handling."""
from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

RASTER_MAGIC = b"SR12"
_HEADER = struct.Struct("<4sBBHIII")
MAX_DIM = 1 << 20

# 1-indexed S2 bands 4, 3, 2 -> R, G, B
S2_RGB_BANDS = (3, 2, 1)

VALUE_RANGES = {"S1": (-25.0, 0.0), "S2": (0.0, 10000.0)}


class Modality(str, enum.Enum):
    S1 = "S1"
    S2 = "S2"
    MASK = "Mask"
    OTHER = "Other"


class RasterFormatError(ValueError):
    pass


class BadMagicError(RasterFormatError):
    pass


class TruncatedRasterError(RasterFormatError):
    def __init__(self, expected: int, actual: int):
        super().__init__(f"truncated payload: expected {expected} bytes, got {actual}")
        self.expected, self.actual = expected, actual


class DimensionOverflowError(RasterFormatError):
    pass


@dataclass(frozen=True)
class Raster:
    data: np.ndarray  # (bands, height, width) float32
    modality: Modality = Modality.OTHER

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim != 3:
            raise ValueError(f"raster data must be (bands, H, W), got shape {arr.shape}")
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "modality", Modality(self.modality))

    @property
    def bands(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def with_data(self, data: np.ndarray) -> "Raster":
        return replace(self, data=data)


@dataclass(frozen=True)
class PatchTriplet:
    s1: Raster
    s2_cloudy: Raster
    s2_cloudfree: Raster
    roi_id: str = ""
    split: str = "train"
    mask: Raster | None = field(default=None, compare=False)

    def __post_init__(self):
        dims = {(r.height, r.width) for r in (self.s1, self.s2_cloudy, self.s2_cloudfree)}
        if len(dims) != 1:
            raise ValueError(f"triplet rasters disagree on dims: {sorted(dims)}")
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be 'train' or 'test', got {self.split!r}")


@dataclass(frozen=True)
class TileSpec:
    patch_size: int = 256
    overlap_fraction: float = 0.5

    def __post_init__(self):
        if self.patch_size < 1:
            raise ValueError(f"patch_size must be >= 1, got {self.patch_size}")
        if not 0 <= self.overlap_fraction < 1:
            raise ValueError(f"overlap_fraction must be in [0, 1), got {self.overlap_fraction}")

    @property
    def stride(self) -> int:
        return max(1, int(round(self.patch_size * (1 - self.overlap_fraction))))


def clip_rescale(r: Raster, modality: Modality | str) -> Raster:
    """Clip to the modality's physical range and map it affinely onto [-1, 1]."""
    key = Modality(modality).value if not isinstance(modality, Modality) else modality.value
    if key not in VALUE_RANGES:
        raise ValueError(f"clip_rescale: unsupported modality {key!r}; expected S1 or S2")
    lo, hi = VALUE_RANGES[key]
    x = np.clip(r.data.astype(np.float64), lo, hi)
    out = (x - lo) / (hi - lo) * 2.0 - 1.0
    return Raster(out.astype(np.float32), Modality(key))


def s1_three_channel(vv: np.ndarray, vh: np.ndarray) -> Raster:
    vv = np.asarray(vv, dtype=np.float32)
    vh = np.asarray(vh, dtype=np.float32)
    if vv.shape != vh.shape:
        raise ValueError(f"VV {vv.shape} and VH {vh.shape} differ in shape")
    return Raster(np.stack([vv, vh, (vv + vh) / np.float32(2)]), Modality.S1)


def s2_rgb(r: Raster) -> Raster:
    if r.bands != 13:
        raise ValueError(f"expected a 13-band S2 raster, got {r.bands} bands")
    return Raster(r.data[list(S2_RGB_BANDS)], Modality.S2)


def tile_starts(size: int, patch: int, stride: int) -> list[int]:
    if size < patch:
        raise ValueError(f"scene extent {size} smaller than patch_size {patch}")
    starts = list(range(0, size - patch + 1, stride))
    if starts[-1] + patch < size:
        starts.append(size - patch)
    return starts


def tile(scene: Raster, spec: TileSpec = TileSpec()) -> list[tuple[int, int, Raster]]:
    """Overlapping windows; the last window per axis is clamped to the scene edge."""
    p = spec.patch_size
    rows = tile_starts(scene.height, p, spec.stride)
    cols = tile_starts(scene.width, p, spec.stride)
    return [(r, c, scene.with_data(scene.data[:, r:r + p, c:c + p].copy())) for r in rows for c in cols]


def untile(tiles: list[tuple[int, int, Raster]], height: int, width: int) -> Raster:
    """Reassemble tiles by averaging overlaps."""
    bands = tiles[0][2].bands
    acc = np.zeros((bands, height, width), dtype=np.float64)
    cnt = np.zeros((height, width), dtype=np.float64)
    for r, c, t in tiles:
        acc[:, r:r + t.height, c:c + t.width] += t.data
        cnt[r:r + t.height, c:c + t.width] += 1
    return Raster((acc / cnt).astype(np.float32), tiles[0][2].modality)


def center_crop(r: Raster, size: int) -> Raster:
    if size > min(r.height, r.width):
        raise ValueError(f"crop size {size} exceeds raster dims {r.height}x{r.width}")
    top = (r.height - size) // 2
    left = (r.width - size) // 2
    return r.with_data(r.data[:, top:top + size, left:left + size].copy())


def crop_triplet(t: PatchTriplet, size: int) -> PatchTriplet:
    mask = center_crop(t.mask, size) if t.mask is not None else None
    return replace(t, s1=center_crop(t.s1, size), s2_cloudy=center_crop(t.s2_cloudy, size),
                   s2_cloudfree=center_crop(t.s2_cloudfree, size), mask=mask)


def shuffle_unpair(triplets: list[PatchTriplet], seed: int = 0) -> list[PatchTriplet]:
    """Reassign cloud-free images by a seeded uniform permutation.

    The permutation is a Durstenfeld shuffle drawing ``integers(0, i + 1)``
    from ``numpy.random.default_rng(seed)`` for i = n-1 down to 1, so other
    implementations can reproduce it from the same generator stream.
    """
    if not triplets:
        raise ValueError("shuffle_unpair needs at least one triplet")
    gen = np.random.default_rng(seed)
    perm = list(range(len(triplets)))
    for i in range(len(perm) - 1, 0, -1):
        j = int(gen.integers(0, i + 1))
        perm[i], perm[j] = perm[j], perm[i]
    return [replace(t, s2_cloudfree=triplets[j].s2_cloudfree) for t, j in zip(triplets, perm)]


def passes_artifact_screen(r: Raster) -> bool:
    """Finite values and not a constant image."""
    return bool(np.all(np.isfinite(r.data)) and np.ptp(r.data) > 0)


def validation_split(items: list, fraction: float = 0.05) -> tuple[list, list]:
    """Hold out the last ``fraction`` of items (stable order) for validation."""
    n_val = int(math.floor(len(items) * fraction))
    cut = len(items) - n_val
    return items[:cut], items[cut:]


# container I/O ----------------------------------------------------------------

def write_raster(r: Raster, path: str | Path) -> None:
    header = _HEADER.pack(RASTER_MAGIC, 1, 1, 0, r.bands, r.height, r.width)
    Path(path).write_bytes(header + np.ascontiguousarray(r.data, dtype="<f4").tobytes())


def read_raster(path: str | Path, modality: Modality | str = Modality.OTHER) -> Raster:
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        if buf[:4] != RASTER_MAGIC[:len(buf[:4])]:
            raise BadMagicError(f"{path}: bad magic {buf[:4]!r}")
        raise TruncatedRasterError(_HEADER.size, len(buf))
    magic, version, dtype, _, bands, height, width = _HEADER.unpack_from(buf)
    if magic != RASTER_MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}, expected {RASTER_MAGIC!r}")
    if version != 1 or dtype != 1:
        raise RasterFormatError(f"{path}: unsupported version {version} / dtype {dtype}")
    if max(bands, height, width) > MAX_DIM:
        raise DimensionOverflowError(f"{path}: dims {bands}x{height}x{width} exceed limit {MAX_DIM}")
    expected = 4 * bands * height * width
    payload = len(buf) - _HEADER.size
    if payload < expected:
        raise TruncatedRasterError(expected, payload)
    if payload > expected:
        raise RasterFormatError(f"{path}: {payload - expected} trailing bytes after payload")
    data = np.frombuffer(buf, dtype="<f4", offset=_HEADER.size).reshape(bands, height, width)
    return Raster(data.astype(np.float32), modality)


# previews ---------------------------------------------------------------------

def to_bytes(values: np.ndarray, lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    """Affine map [lo, hi] -> [0, 255], rounding half up."""
    x = (np.clip(values.astype(np.float64), lo, hi) - lo) / (hi - lo) * 255.0
    return np.floor(x + 0.5).astype(np.uint8)


def write_preview(r: Raster, path: str | Path, lo: float = -1.0, hi: float = 1.0) -> None:
    """PGM (P5) for 1 band, PPM (P6) for 3 bands."""
    if r.bands == 1:
        header = f"P5\n{r.width} {r.height}\n255\n".encode("ascii")
        body = to_bytes(r.data[0], lo, hi).tobytes()
    elif r.bands == 3:
        header = f"P6\n{r.width} {r.height}\n255\n".encode("ascii")
        body = to_bytes(r.data.transpose(1, 2, 0), lo, hi).tobytes()
    else:
        raise ValueError(f"previews need 1 or 3 bands, got {r.bands}")
    Path(path).write_bytes(header + body)
