"""Desk-scale versions of the three experiments, run on synthetic scenes.

Each runner trains toy models, evaluates them on held-out synthetic data and
returns a :class:`ResultTable`; :func:`write_run` stores the table, a replay
manifest and per-model loss logs.
"""
from __future__ import annotations

import hashlib
import platform
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .losses import append_loss_csv
from .metrics import MetricReport, evaluate, f1, to_unit_range
from .model import ModelConfig
from .optim import TrainSchedule
from .raster import PatchTriplet, Raster, write_preview
from .simulate import toy_triplets
from .train import FitResult, TrainConfig, fit, predict

FRACTIONS = (0.0, 0.1, 0.2, 0.5, 1.0)
PIXEL_ROWS = ("MAE", "RMSE", "PSNR", "SSIM", "SAM")


@dataclass(frozen=True)
class ExperimentSpec:
    name: str
    dataset_size: int = 64
    patch_size: int = 32
    test_size: int = 32
    n_iter: int = 8
    n_decay: int = 4
    seeds: tuple[int, ...] = (0,)
    fractions: tuple[float, ...] = FRACTIONS
    k: int = 3
    ngf: int = 8
    ndf: int = 8
    n_blocks: int = 9
    max_steps: int | None = None

    def __post_init__(self):
        if self.name not in ("paired_fraction", "ablation", "synthetic_vs_real"):
            raise ValueError(f"unknown experiment {self.name!r}")
        bad = set(self.fractions) - set(FRACTIONS)
        if bad:
            raise ValueError(f"fractions must come from {FRACTIONS}, got {sorted(bad)}")
        # size caps keep each run well under half an hour on one CPU core
        if self.dataset_size > 256 or self.patch_size > 64 or self.n_iter + self.n_decay > 40:
            raise ValueError("experiment exceeds desk-scale caps (256 triplets, 64 px, 40 epochs)")

    def train_config(self, **overrides) -> TrainConfig:
        n_layers = 2 if self.patch_size < 32 else 3
        cfg = TrainConfig(schedule=TrainSchedule(self.n_iter, self.n_decay),
                          model=ModelConfig(ngf=self.ngf, ndf=self.ndf, n_blocks=self.n_blocks, n_layers=n_layers),
                          seed=self.seeds[0], crop=self.patch_size)
        return replace(cfg, **overrides)

    def digest(self) -> str:
        return hashlib.sha256(repr(sorted(asdict(self).items())).encode()).hexdigest()[:16]


@dataclass
class ResultTable:
    columns: list[str]
    rows: list[tuple[str, list[float | None]]] = field(default_factory=list)
    index_name: str = "row"

    def add(self, label: str, values) -> None:
        self.rows.append((label, list(values)))

    def column(self, name: str) -> list[float | None]:
        j = self.columns.index(name)
        return [vals[j] for _, vals in self.rows]

    def value(self, row: str, col: str) -> float | None:
        return dict(self.rows)[row][self.columns.index(col)]

    def to_csv(self) -> str:
        lines = [",".join([self.index_name] + self.columns)]
        lines += [",".join([label] + [_cell(v) for v in vals]) for label, vals in self.rows]
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        width = max([len(self.index_name)] + [len(label) for label, _ in self.rows]) + 2
        colw = max(10, max(len(c) for c in self.columns) + 2)
        head = self.index_name.ljust(width) + "".join(c.rjust(colw) for c in self.columns)
        lines = [head, "-" * len(head)]
        for label, vals in self.rows:
            lines.append(label.ljust(width) + "".join(_cell(v, 3).rjust(colw) for v in vals))
        return "\n".join(lines) + "\n"


def _cell(v, digits: int = 6) -> str:
    if v is None:
        return "-"
    return f"{v:.{digits}f}"


@dataclass
class ExperimentRun:
    spec: ExperimentSpec
    table: ResultTable
    fits: dict[str, FitResult]
    notes: list[str] = field(default_factory=list)


def _datasets(spec: ExperimentSpec, scheme: str = "copy"):
    seed = spec.seeds[0]
    train = toy_triplets(spec.dataset_size, spec.patch_size, seed=seed, scheme=scheme)
    test = toy_triplets(spec.test_size, spec.patch_size, seed=seed + 1000, scheme=scheme, split="test")
    return train, test


def _predictions(fit_result: FitResult, test: list[PatchTriplet], ablate: bool = False) -> list[np.ndarray]:
    return [to_unit_range(predict(fit_result.trainer.models, t, ablate_mask=ablate)[0]) for t in test]


def _targets(test: list[PatchTriplet]) -> list[np.ndarray]:
    return [to_unit_range(t.s2_cloudfree.data) for t in test]


def run_paired_fraction(spec: ExperimentSpec) -> ExperimentRun:
    train, test = _datasets(spec)
    targets = _targets(test)
    table = ResultTable(["precision", "recall", "F1"], index_name="paired(%)")
    fits = {}
    for frac in spec.fractions:
        label = f"{int(round(frac * 100))}"
        res = fit(train, spec.train_config(paired_fraction=frac), max_steps=spec.max_steps)
        fits[label] = res
        rep = evaluate(_predictions(res, test), targets, k=spec.k, pixel_aligned=False)
        table.add(label, [rep.precision, rep.recall, f1(rep.precision, rep.recall)])
    return ExperimentRun(spec, table, fits)


def _report_row(rep: MetricReport) -> list[float | None]:
    return [rep.mae, rep.rmse, rep.psnr, rep.ssim, rep.sam, rep.precision, rep.recall, rep.f1]


def run_ablation(spec: ExperimentSpec) -> ExperimentRun:
    train, test = _datasets(spec)
    targets = _targets(test)
    cols = ["MAE", "RMSE", "PSNR", "SSIM", "SAM", "precision", "recall", "F1"]
    table = ResultTable(cols, index_name="model")
    # raw-input baselines need no training and come first
    vv = [to_unit_range(np.repeat(t.s1.data[:1], 3, axis=0)) for t in test]
    vh = [to_unit_range(np.repeat(t.s1.data[1:2], 3, axis=0)) for t in test]
    cloudy = [to_unit_range(t.s2_cloudy.data) for t in test]
    for label, preds in (("S1 VV", vv), ("S1 VH", vh), ("S2 cloudy", cloudy)):
        table.add(label, _report_row(evaluate(preds, targets, k=spec.k)))
    fits = {}
    notes = []
    for label, overrides, ablate in (("ours-0 (m=1)", dict(ablate_mask=True), True),
                                     ("ours-0", {}, False),
                                     ("ours-100", dict(paired_fraction=1.0), False)):
        res = fit(train, spec.train_config(**overrides), max_steps=spec.max_steps)
        fits[label] = res
        if ablate:
            worst = max(r.aux for r in res.history)
            notes.append(f"ablation: max aux loss over {len(res.history)} steps = {worst!r}")
        table.add(label, _report_row(evaluate(_predictions(res, test, ablate), targets, k=spec.k)))
    return ExperimentRun(spec, table, fits, notes)


def run_synthetic_vs_real(spec: ExperimentSpec) -> ExperimentRun:
    """Train on Perlin or copy-paste clouds; test on that scheme and on a seed-disjoint stand-in for real clouds."""
    seed = spec.seeds[0]
    real_test = toy_triplets(spec.test_size, spec.patch_size, seed=seed + 1000, scheme="copy",
                             split="test", cloud_seed=seed + 777)
    real_targets = _targets(real_test)
    rows = list(PIXEL_ROWS) + ["precision synth", "precision real", "recall synth", "recall real",
                               "F1 synth", "F1 real"]
    columns, cells, fits = [], [], {}
    for model_label, frac in (("ours-0", 0.0), ("ours-100", 1.0)):
        for scheme, scheme_label in (("perlin", "Perlin"), ("copy", "copy")):
            train, test = _datasets(spec, scheme)
            res = fit(train, spec.train_config(paired_fraction=frac), max_steps=spec.max_steps)
            key = f"{model_label} {scheme_label}"
            fits[key] = res
            synth = evaluate(_predictions(res, test), _targets(test), k=spec.k)
            # pixel metrics only where cloudy and clear images are pixel-paired by construction
            real = evaluate(_predictions(res, real_test), real_targets, k=spec.k, pixel_aligned=False)
            columns.append(key)
            cells.append([synth.mae, synth.rmse, synth.psnr, synth.ssim, synth.sam,
                          synth.precision, real.precision, synth.recall, real.recall, synth.f1, real.f1])
    table = ResultTable(columns, index_name="metric")
    for i, label in enumerate(rows):
        table.add(label, [c[i] for c in cells])
    return ExperimentRun(spec, table, fits)


RUNNERS = {"paired_fraction": run_paired_fraction, "ablation": run_ablation,
           "synthetic_vs_real": run_synthetic_vs_real}


def run_experiment(spec: ExperimentSpec) -> ExperimentRun:
    return RUNNERS[spec.name](spec)


def write_run(run: ExperimentRun, root: str | Path = "runs", stamp: str | None = None,
              previews: bool = True) -> Path:
    stamp = stamp or time.strftime("%Y%m%d-%H%M%S")
    out = Path(root) / run.spec.name / stamp
    out.mkdir(parents=True, exist_ok=True)
    (out / "table.csv").write_text(run.table.to_csv())
    (out / "table.txt").write_text(run.table.to_text())
    manifest = [f"experiment={run.spec.name}", f"config_hash={run.spec.digest()}",
                f"seeds={','.join(map(str, run.spec.seeds))}", f"cloudfusion={__version__}",
                f"numpy={np.__version__}", f"python={platform.python_version()}"]
    manifest += [f"{k}={v}" for k, v in asdict(run.spec).items() if k != "name"]
    manifest += [f"note={n}" for n in run.notes]
    (out / "manifest.txt").write_text("\n".join(manifest) + "\n")
    for label, res in run.fits.items():
        slug = label.replace(" ", "_").replace("(", "").replace(")", "").replace("=", "")
        append_loss_csv(out / f"losses_{slug}.csv", res.history)
    if previews and run.fits:
        first = next(iter(run.fits.values()))
        test = toy_triplets(1, run.spec.patch_size, seed=run.spec.seeds[0] + 1000)[0]
        pred, m_hat = predict(first.trainer.models, test)
        write_preview(Raster(pred), out / "preview_pred.ppm")
        write_preview(test.s2_cloudy, out / "preview_cloudy.ppm")
        write_preview(Raster(m_hat), out / "preview_mask.pgm", lo=0.0, hi=1.0)
    return out
