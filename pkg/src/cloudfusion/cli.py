"""``cloudfusion`` command-line entry point.

Every command accepts ``--config FILE`` with ``key=value`` lines; flags given
on the command line override file values. Exit codes: 0 success, 1 runtime
failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import contextlib
import os
import sys
from dataclasses import fields
from pathlib import Path
from typing import Sequence

import numpy as np

DEFAULT_SEED = 0


class ConfigError(ValueError):
    pass


class Config:
    """Flat string map with typed accessors; unknown keys are rejected."""

    def __init__(self, values: dict[str, str], known: Sequence[str]):
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise ConfigError(f"unknown config key(s) {', '.join(unknown)}; known keys: {', '.join(sorted(known))}")
        self.values = dict(values)

    def __contains__(self, key: str) -> bool:
        return key in self.values

    def str(self, key: str, default: str | None = None) -> str | None:
        return self.values.get(key, default)

    def _typed(self, key, default, conv, kind):
        if key not in self.values:
            return default
        try:
            return conv(self.values[key])
        except ValueError:
            raise ConfigError(f"{key}={self.values[key]!r} is not a valid {kind}") from None

    def int(self, key: str, default: int | None = None) -> int | None:
        return self._typed(key, default, int, "integer")

    def float(self, key: str, default: float | None = None) -> float | None:
        return self._typed(key, default, float, "number")

    def bool(self, key: str, default: bool = False) -> bool:
        def conv(v: str) -> bool:
            low = v.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(v)
        return self._typed(key, default, conv, "boolean")


def read_config_file(path: str | Path) -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


TRAIN_KEYS = ("data_dir", "out_dir", "toy_n", "toy_size", "max_steps", "n_iter", "n_decay", "learning_rate",
              "beta1", "beta2", "epsilon", "lambda_adv", "lambda_cyc", "lambda_idt", "lambda_aux", "lambda_pix",
              "lambda_feat", "lambda_style", "paired_fraction", "ablate_mask", "seed", "crop", "batch_size",
              "pool_size", "ngf", "ndf", "n_blocks", "n_layers", "dropout")

COMMANDS = {
    "mask": ("input", "out", "preview"),
    "simulate": ("mode", "seed", "octaves", "persistence", "lacunarity", "base_period", "input", "cloudy", "mask",
                 "out", "preview"),
    "tile": ("input", "out", "patch_size", "overlap"),
    "train": TRAIN_KEYS,
    "eval": ("pred", "target", "embeddings", "k", "range"),
    "stats": ("masks",),
    "preview": ("input", "out", "range"),
    "experiment": ("name", "out", "seed", "dataset_size", "patch_size", "test_size", "n_iter", "n_decay", "k",
                   "max_steps"),
}

_FLAG_ONLY = {"preview", "ablate_mask"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cloudfusion", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, keys in COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="key=value file; command-line flags win")
        for key in keys:
            flag = "--" + key.replace("_", "-")
            if key in _FLAG_ONLY:
                p.add_argument(flag, dest=key, action="store_const", const="true", default=None)
            else:
                p.add_argument(flag, dest=key, default=None)
    return parser


def parse_args(argv: Sequence[str]) -> tuple[str, Config]:
    args = build_parser().parse_args(list(argv))
    known = COMMANDS[args.command]
    values = read_config_file(args.config) if args.config else {}
    for key in known:
        v = getattr(args, key)
        if v is not None:
            values[key] = v
    return args.command, Config(values, known)


def _require(cfg: Config, key: str) -> str:
    v = cfg.str(key)
    if v is None:
        raise ConfigError(f"missing required option --{key.replace('_', '-')}")
    return v


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"no such file or directory: {p}")
    return p


def _rasters_in(path: Path) -> list[Path]:
    return sorted(path.glob("*.sr12")) if path.is_dir() else [path]


# commands -------------------------------------------------------------------------

def cmd_mask(cfg: Config) -> int:
    from .cloudmask import cloud_probability, refine_mask
    from .raster import read_raster, write_preview, write_raster

    src = _existing(_require(cfg, "input"))
    out = Path(_require(cfg, "out"))
    preview = cfg.bool("preview")
    out.mkdir(parents=True, exist_ok=True)
    for path in _rasters_in(src):
        m = refine_mask(cloud_probability(read_raster(path, "S2")))
        dest = out / f"{path.stem}_mask.sr12"
        write_raster(m, dest)
        print(dest)
        if preview:
            write_preview(m, dest.with_suffix(".pgm"), lo=0.0, hi=1.0)
            print(dest.with_suffix(".pgm"))
    return 0


def cmd_simulate(cfg: Config) -> int:
    from .raster import read_raster, write_preview, write_raster
    from .simulate import PerlinConfig, blend_copy_paste, blend_perlin, perlin

    mode = cfg.str("mode", "perlin")
    if mode not in ("perlin", "copy"):
        raise ConfigError(f"--mode must be perlin or copy, got {mode!r}")
    seed = cfg.int("seed", DEFAULT_SEED)
    pcfg = PerlinConfig(seed=seed, octaves=cfg.int("octaves", 4), persistence=cfg.float("persistence", 0.5),
                        lacunarity=cfg.float("lacunarity", 2.0), base_period=cfg.float("base_period", 64.0))
    out = Path(_require(cfg, "out"))
    preview = cfg.bool("preview")
    clear = read_raster(_existing(_require(cfg, "input")), "S2")
    print(f"seed={seed}")
    out.mkdir(parents=True, exist_ok=True)
    if mode == "perlin":
        cloudy, m = blend_perlin(clear, perlin(clear.width, clear.height, pcfg))
    else:
        real = read_raster(_existing(_require(cfg, "cloudy")), "S2")
        m = read_raster(_existing(_require(cfg, "mask")), "Mask")
        cloudy = blend_copy_paste(clear, real, m)
    written = [(cloudy, out / "cloudy.sr12"), (m, out / "mask.sr12")]
    for r, path in written:
        write_raster(r, path)
        print(path)
        if preview:
            p = path.with_suffix(".ppm" if r.bands == 3 else ".pgm")
            write_preview(r, p, lo=-1.0 if r.bands == 3 else 0.0)
            print(p)
    return 0


def cmd_tile(cfg: Config) -> int:
    from .raster import TileSpec, read_raster, tile, write_raster

    scene = read_raster(_existing(_require(cfg, "input")))
    spec = TileSpec(cfg.int("patch_size", 256), cfg.float("overlap", 0.5))
    out = Path(_require(cfg, "out"))
    out.mkdir(parents=True, exist_ok=True)
    for r, c, patch in tile(scene, spec):
        dest = out / f"patch_r{r:05d}_c{c:05d}.sr12"
        write_raster(patch, dest)
        print(dest)
    return 0


def train_config_from(cfg: Config):
    from .losses import LossWeights
    from .model import ModelConfig
    from .optim import OptimizerConfig, TrainSchedule
    from .train import TrainConfig

    def pick(dc, conv):
        return {f.name: conv(f.name) for f in fields(dc) if f.name in cfg}

    crop = cfg.str("crop")
    return TrainConfig(
        schedule=TrainSchedule(**pick(TrainSchedule, cfg.int)),
        optimizer=OptimizerConfig(**pick(OptimizerConfig, cfg.float)),
        weights=LossWeights(**pick(LossWeights, cfg.float)),
        model=ModelConfig(**{f.name: (cfg.float(f.name) if f.name == "dropout" else cfg.int(f.name))
                             for f in fields(ModelConfig) if f.name in cfg}),
        paired_fraction=cfg.float("paired_fraction", 0.0),
        ablate_mask=cfg.bool("ablate_mask"),
        seed=cfg.int("seed", DEFAULT_SEED),
        crop=None if crop in (None, "none") else cfg.int("crop"),
        batch_size=cfg.int("batch_size", 1),
        pool_size=cfg.int("pool_size", 50),
    )


def load_triplets(data_dir: Path):
    """Triplets stored as <id>_s1.sr12, <id>_s2cloudy.sr12, <id>_s2free.sr12 and <id>_mask.sr12."""
    from .raster import PatchTriplet, read_raster

    ids = sorted(p.name[: -len("_s1.sr12")] for p in data_dir.glob("*_s1.sr12"))
    if not ids:
        raise FileNotFoundError(f"no *_s1.sr12 triplets found in {data_dir}")
    out = []
    for i in ids:
        mask_path = data_dir / f"{i}_mask.sr12"
        out.append(PatchTriplet(read_raster(data_dir / f"{i}_s1.sr12", "S1"),
                                read_raster(data_dir / f"{i}_s2cloudy.sr12", "S2"),
                                read_raster(data_dir / f"{i}_s2free.sr12", "S2"), roi_id=i,
                                mask=read_raster(mask_path, "Mask") if mask_path.exists() else None))
    return out


def cmd_train(cfg: Config) -> int:
    from .simulate import toy_triplets
    from .train import fit

    tcfg = train_config_from(cfg)
    max_steps = cfg.int("max_steps")
    out = Path(cfg.str("out_dir", "train_out"))
    data_dir = cfg.str("data_dir")
    print(f"seed={tcfg.seed}")
    if data_dir is None or data_dir == "toy":
        data = toy_triplets(cfg.int("toy_n", 16), cfg.int("toy_size", 16), seed=tcfg.seed)
    else:
        data = load_triplets(_existing(data_dir))
    result = fit(data, tcfg, out_dir=out, max_steps=max_steps)
    for p in result.checkpoints:
        print(p)
    print(out / "losses.csv")
    return 0


def cmd_eval(cfg: Config) -> int:
    from .metrics import MetricReport, evaluate, f1, precision_recall, read_embeddings, EmbeddingSet, to_unit_range
    from .raster import read_raster

    pred_dir = _existing(_require(cfg, "pred"))
    target_dir = _existing(_require(cfg, "target"))
    k = cfg.int("k", 10)
    value_range = cfg.str("range", "signed")
    if value_range not in ("signed", "unit"):
        raise ConfigError(f"--range must be signed or unit, got {value_range!r}")
    names = sorted(p.name for p in _rasters_in(pred_dir))
    missing = [n for n in names if not (target_dir / n).exists()]
    if missing:
        raise FileNotFoundError(f"targets missing for {', '.join(missing)} in {target_dir}")

    def load(path):
        data = read_raster(path).data
        return to_unit_range(data) if value_range == "signed" else data.astype(np.float64)

    preds = [load(pred_dir / n) for n in names]
    targets = [load(target_dir / n) for n in names]
    emb = cfg.str("embeddings")
    if emb is None:
        report = evaluate(preds, targets, k=k)
    else:
        from .metrics import pixel_report
        vectors = read_embeddings(_existing(emb))
        if vectors.shape[0] != 2 * len(names):
            raise ValueError(f"{emb}: expected {2 * len(names)} rows (targets then predictions), got {vectors.shape[0]}")
        report = pixel_report(preds, targets)
        n = len(names)
        report.precision, report.recall = precision_recall(EmbeddingSet(vectors[:n]), EmbeddingSet(vectors[n:], "generated"), k)
        report.f1 = f1(report.precision, report.recall)
    print(report.table())
    print(report.csv_header())
    print(report.csv_line())
    return 0


def cmd_stats(cfg: Config) -> int:
    from .cloudmask import coverage_stats
    from .raster import read_raster

    src = _existing(_require(cfg, "masks"))
    paths = _rasters_in(src)
    if not paths:
        raise FileNotFoundError(f"no .sr12 masks in {src}")
    print(coverage_stats([read_raster(p, "Mask") for p in paths]).format())
    return 0


def cmd_preview(cfg: Config) -> int:
    from .raster import read_raster, write_preview

    src = _existing(_require(cfg, "input"))
    r = read_raster(src)
    lo = 0.0 if cfg.str("range", "signed") == "unit" else -1.0
    dest = Path(cfg.str("out") or src.with_suffix(".ppm" if r.bands == 3 else ".pgm"))
    write_preview(r, dest, lo=lo)
    print(dest)
    return 0


def cmd_experiment(cfg: Config) -> int:
    from .experiments import ExperimentSpec, run_experiment, write_run

    seed = cfg.int("seed", DEFAULT_SEED)
    kwargs = {k: cfg.int(k) for k in ("dataset_size", "patch_size", "test_size", "n_iter", "n_decay", "k",
                                       "max_steps") if k in cfg}
    spec = ExperimentSpec(name=_require(cfg, "name"), seeds=(seed,), **kwargs)
    print(f"seed={seed}")
    run = run_experiment(spec)
    out = write_run(run, cfg.str("out", "runs"))
    print(run.table.to_text(), end="")
    print(out)
    return 0


HANDLERS = {"mask": cmd_mask, "simulate": cmd_simulate, "tile": cmd_tile, "train": cmd_train, "eval": cmd_eval,
            "stats": cmd_stats, "preview": cmd_preview, "experiment": cmd_experiment}


def _thread_limit():
    raw = os.environ.get("CLOUDFUSION_THREADS")
    if not raw:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=max(1, int(raw)))


def run(command: str, cfg: Config) -> int:
    try:
        with _thread_limit():
            return HANDLERS[command](cfg)
    except Exception as exc:  # surfaced as a one-line diagnostic
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"cloudfusion {command}: error: {msg}", file=sys.stderr)
        return 1


def main(argv: Sequence[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        command, cfg = parse_args(argv)
    except (ConfigError, OSError) as exc:
        print(f"cloudfusion: error: {exc}", file=sys.stderr)
        return 2
    return run(command, cfg)


if __name__ == "__main__":
    sys.exit(main())
