"""Pixel metrics, global SSIM, spectral angle and improved precision/recall."""
from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

EMBEDDING_MAGIC = b"CFE1"
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(getattr(x, "data", x), dtype=np.float64)
    y = np.asarray(getattr(y, "data", y), dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    return x, y


def to_unit_range(v: np.ndarray) -> np.ndarray:
    """Model outputs in [-1, 1] -> metric space [0, 1]."""
    return (np.asarray(v, dtype=np.float64) + 1.0) / 2.0


def mae(x, y) -> float:
    x, y = _pair(x, y)
    return float(np.mean(np.abs(x - y)))


def rmse(x, y) -> float:
    x, y = _pair(x, y)
    return float(np.sqrt(np.mean((x - y) ** 2)))


def psnr(x, y) -> float:
    """20 log10(1 / RMSE); identical images give +inf."""
    e = rmse(x, y)
    return math.inf if e == 0 else 20.0 * math.log10(1.0 / e)


def ssim(x, y, c1: float = SSIM_C1, c2: float = SSIM_C2, as_printed: bool = False) -> float:
    """Global (unwindowed) SSIM over all values of the image pair.

    ``as_printed`` switches the denominator to (mu_x + mu_y + c1)(sd_x + sd_y + c2).
    """
    x, y = _pair(x, y)
    mx, my = x.mean(), y.mean()
    vx = ((x - mx) ** 2).mean()
    vy = ((y - my) ** 2).mean()
    cov = ((x - mx) * (y - my)).mean()
    num = (2 * mx * my + c1) * (2 * cov + c2)
    if as_printed:
        den = (mx + my + c1) * (math.sqrt(vx) + math.sqrt(vy) + c2)
    else:
        den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return float(num / den)


def sam(x, y) -> float:
    """Angle in degrees between the two images as flat vectors."""
    x, y = _pair(x, y)
    nx, ny = np.sum(x * x), np.sum(y * y)
    if nx == 0 or ny == 0:
        raise ValueError("spectral angle undefined for an all-zero image")
    cos = np.sum(x * y) / math.sqrt(nx * ny)
    return math.degrees(math.acos(min(1.0, max(-1.0, float(cos)))))


def f1(precision: float, recall: float) -> float:
    if precision + recall <= 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


# embeddings and manifolds ----------------------------------------------------------

@dataclass(frozen=True)
class EmbeddingSet:
    vectors: np.ndarray
    source: str = "real"

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError(f"embeddings must be (n, d), got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("embeddings contain non-finite values")
        object.__setattr__(self, "vectors", v)

    def __len__(self) -> int:
        return self.vectors.shape[0]


def pool_embedder(grid: int = 16) -> Callable[[np.ndarray], np.ndarray]:
    """Average-pool each channel onto a grid x grid layout and flatten.

    Images smaller than the grid keep their own resolution along that axis.
    """

    def embed_one(img: np.ndarray) -> np.ndarray:
        img = np.asarray(img, dtype=np.float64)
        rows = np.array_split(np.arange(img.shape[1]), min(grid, img.shape[1]))
        cols = np.array_split(np.arange(img.shape[2]), min(grid, img.shape[2]))
        out = np.empty((img.shape[0], len(rows), len(cols)))
        for i, r in enumerate(rows):
            for j, c in enumerate(cols):
                out[:, i, j] = img[:, r[0]:r[-1] + 1, c[0]:c[-1] + 1].mean(axis=(1, 2))
        return out.reshape(-1)

    return embed_one


def embed(images: Iterable[np.ndarray], embedder: Callable[[np.ndarray], np.ndarray] | None = None,
          source: str = "real") -> EmbeddingSet:
    fn = embedder if embedder is not None else pool_embedder()
    return EmbeddingSet(np.stack([np.asarray(fn(np.asarray(getattr(im, "data", im)))) for im in images]), source)


def _distances(a: np.ndarray, b: np.ndarray, chunk: int = 256) -> np.ndarray:
    # exact Euclidean distances, same expression for every pair
    out = np.empty((a.shape[0], b.shape[0]))
    for s in range(0, a.shape[0], chunk):
        diff = a[s:s + chunk, None, :] - b[None, :, :]
        out[s:s + chunk] = np.sqrt(np.sum(diff * diff, axis=-1))
    return out


def knn_radius(s: EmbeddingSet, k: int) -> np.ndarray:
    """Distance from each point to its k-th nearest other point."""
    n = len(s)
    if k < 1 or n <= k:
        raise ValueError(f"need 1 <= k < n, got k={k}, n={n}")
    d = _distances(s.vectors, s.vectors)
    np.fill_diagonal(d, np.inf)
    return np.partition(d, k - 1, axis=1)[:, k - 1]


def in_manifold(phi: np.ndarray, s: EmbeddingSet, radii: np.ndarray) -> int:
    d = _distances(np.asarray(phi, dtype=np.float64)[None], s.vectors)[0]
    return int(np.any(d <= radii))


def _coverage(points: EmbeddingSet, ref: EmbeddingSet, radii: np.ndarray) -> float:
    d = _distances(points.vectors, ref.vectors)
    return float(np.mean(np.any(d <= radii[None, :], axis=1)))


def precision_recall(real: EmbeddingSet, gen: EmbeddingSet, k: int = 10) -> tuple[float, float]:
    if len(real) <= k or len(gen) <= k:
        raise ValueError(f"both sets need more than k={k} points, got {len(real)} real and {len(gen)} generated")
    precision = _coverage(gen, real, knn_radius(real, k))
    recall = _coverage(real, gen, knn_radius(gen, k))
    return precision, recall


def write_embeddings(path: str | Path, vectors: np.ndarray) -> None:
    v = np.asarray(vectors)
    Path(path).write_bytes(EMBEDDING_MAGIC + struct.pack("<II", *v.shape) + np.ascontiguousarray(v, "<f4").tobytes())


def read_embeddings(path: str | Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:4] != EMBEDDING_MAGIC:
        raise ValueError(f"{path}: bad magic {buf[:4]!r}, expected {EMBEDDING_MAGIC!r}")
    n, d = struct.unpack_from("<II", buf, 4)
    expected = 4 * n * d
    if len(buf) - 12 != expected:
        raise ValueError(f"{path}: payload is {len(buf) - 12} bytes, expected {expected}")
    return np.frombuffer(buf, dtype="<f4", offset=12).reshape(n, d).astype(np.float64)


# reports -----------------------------------------------------------------------------

@dataclass
class MetricReport:
    mae: float | None = None
    rmse: float | None = None
    psnr: float | None = None
    ssim: float | None = None
    sam: float | None = None
    precision: float | None = None
    recall: float | None = None
    f1: float | None = None

    def as_dict(self) -> dict[str, float | None]:
        return asdict(self)

    def csv_header(self) -> str:
        return ",".join(self.as_dict())

    def csv_line(self) -> str:
        return ",".join(_fmt(v) for v in self.as_dict().values())

    def table(self) -> str:
        return "\n".join(f"{k:<10} {_fmt(v):>10}" for k, v in self.as_dict().items())


def _fmt(v: float | None) -> str:
    if v is None:
        return ""
    if math.isinf(v):
        return "inf"
    return f"{v:.6f}"


def pixel_report(preds: Sequence[np.ndarray], targets: Sequence[np.ndarray]) -> MetricReport:
    """Mean pixel/image metrics over pairs already mapped to [0, 1]."""
    if len(preds) != len(targets) or not preds:
        raise ValueError(f"need equally many predictions and targets, got {len(preds)} and {len(targets)}")
    vals = {name: [] for name in ("mae", "rmse", "psnr", "ssim", "sam")}
    for p, t in zip(preds, targets):
        vals["mae"].append(mae(p, t))
        vals["rmse"].append(rmse(p, t))
        vals["psnr"].append(psnr(p, t))
        vals["ssim"].append(ssim(p, t))
        vals["sam"].append(sam(p, t))
    return MetricReport(**{k: float(np.mean(v)) for k, v in vals.items()})


def evaluate(preds: Sequence[np.ndarray], targets: Sequence[np.ndarray], k: int = 10,
             embedder: Callable | None = None, pixel_aligned: bool = True) -> MetricReport:
    report = pixel_report(preds, targets) if pixel_aligned else MetricReport()
    real = embed(targets, embedder, "real")
    gen = embed(preds, embedder, "generated")
    report.precision, report.recall = precision_recall(real, gen, k)
    report.f1 = f1(report.precision, report.recall)
    return report
