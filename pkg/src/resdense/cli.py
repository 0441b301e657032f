"""Command-line entry point: synth | train | eval | predict.

One JSON config file drives model, training and data settings; every
defaulted field is materialized into the ``effective-config.json`` written
next to the training outputs, so feeding that file back reproduces the run.
All randomness fans out from the single top-level seed into named sub-streams
(split, init, shuffle, augment).

Exit codes: 0 success, 2 usage or validation error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .data import (
    AugmentConfig,
    DataError,
    SLICE_EXTENSIONS,
    SeriesSample,
    generate_synthetic_dataset,
    load_dataset,
    split_train_val,
)
from .metrics import evaluate, predict_series, write_metrics_json
from .model import (
    CheckpointError,
    ConfigError,
    ModelConfig,
    build_model,
    load_checkpoint,
)
from .rng import derive_seed
from .train import TrainConfig, TrainingDiverged, fit, write_history_csv

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3


@dataclass
class DataConfig:
    path: Optional[str] = None
    split_ratio: float = 0.75
    augment: bool = True
    flip_horizontal: bool = True
    flip_vertical: bool = False
    rotation_fraction: float = 0.2

    def problems(self) -> list[str]:
        errs = []
        if not 0.0 < self.split_ratio < 1.0:
            errs.append(f"data.split_ratio must be in (0, 1), got {self.split_ratio}")
        if not 0.0 <= self.rotation_fraction <= 0.5:
            errs.append(
                f"data.rotation_fraction must be in [0, 0.5], got {self.rotation_fraction}")
        return errs

    def augment_config(self) -> Optional[AugmentConfig]:
        if not self.augment:
            return None
        return AugmentConfig(flip_horizontal=self.flip_horizontal,
                             flip_vertical=self.flip_vertical,
                             rotation_fraction=self.rotation_fraction)

    def to_dict(self) -> dict:
        return {
            "path": self.path,
            "split_ratio": self.split_ratio,
            "augment": self.augment,
            "flip_horizontal": self.flip_horizontal,
            "flip_vertical": self.flip_vertical,
            "rotation_fraction": self.rotation_fraction,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DataConfig":
        return cls(
            path=d.get("path"),
            split_ratio=float(d.get("split_ratio", 0.75)),
            augment=bool(d.get("augment", True)),
            flip_horizontal=bool(d.get("flip_horizontal", True)),
            flip_vertical=bool(d.get("flip_vertical", False)),
            rotation_fraction=float(d.get("rotation_fraction", 0.2)),
        )


@dataclass
class RunConfig:
    """Aggregated run settings; the top-level seed is the only seed."""

    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    output_dir: Optional[str] = None

    def __post_init__(self):
        self.train.seed = self.seed

    def problems(self) -> list[str]:
        errs = []
        errs.extend(self.model.problems())
        errs.extend(self.train.problems())
        errs.extend(self.data.problems())
        return errs

    def to_dict(self) -> dict:
        d = {
            "seed": self.seed,
            "model": self.model.to_dict(),
            "train": {
                "batch_size": self.train.batch_size,
                "epochs": self.train.epochs,
                "learning_rate": self.train.learning_rate,
                "optimizer": self.train.optimizer,
                "loss": self.train.loss,
                "stage1_fraction": self.train.stage1_fraction,
                "stage2_unfreeze_fraction": self.train.stage2_unfreeze_fraction,
                "seed": self.train.seed,
            },
            "data": self.data.to_dict(),
            "output_dir": self.output_dir,
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        t = d.get("train", {})
        train = TrainConfig(
            batch_size=int(t.get("batch_size", 32)),
            epochs=int(t.get("epochs", 20)),
            learning_rate=float(t.get("learning_rate", 1e-4)),
            optimizer=str(t.get("optimizer", "rmsprop")),
            loss=str(t.get("loss", "binary_ce")),
            stage1_fraction=float(t.get("stage1_fraction", 0.25)),
            stage2_unfreeze_fraction=float(t.get("stage2_unfreeze_fraction", 0.5)),
        )
        return cls(
            seed=int(d.get("seed", 0)),
            model=ModelConfig.from_dict(d.get("model", {})),
            train=train,
            data=DataConfig.from_dict(d.get("data", {})),
            output_dir=d.get("output_dir"),
        )

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                return cls.from_dict(json.load(fh))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True, indent=2)
            fh.write("\n")


def _fail(messages) -> int:
    if isinstance(messages, str):
        messages = [messages]
    for msg in messages:
        print(f"error: {msg}", file=sys.stderr)
    return EXIT_USAGE


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    manifest = generate_synthetic_dataset(
        args.out, n_series=args.series, slices_per_series=args.slices,
        image_size=args.size, class_signal=args.signal, seed=args.seed)
    print(f"wrote {manifest['n_series']} series "
          f"({manifest['n_covid']} covid / {manifest['n_non_covid']} non_covid), "
          f"{manifest['n_series'] * manifest['slices_per_series']} slices of "
          f"{args.size}x{args.size} to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    if args.data:
        cfg.data.path = args.data
    if args.out:
        cfg.output_dir = args.out

    problems = cfg.problems()
    if cfg.data.path is None:
        problems.append("data.path is required (set it in the config or pass --data)")
    elif not Path(cfg.data.path).is_dir():
        problems.append(f"data.path {cfg.data.path!r} is not a directory")
    if cfg.output_dir is None:
        problems.append("output_dir is required (set it in the config or pass --out)")
    if problems:
        return _fail(problems)

    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    samples = load_dataset(cfg.data.path)
    split = split_train_val(samples, cfg.data.split_ratio, derive_seed(cfg.seed, "split"))
    model = build_model(cfg.model, derive_seed(cfg.seed, "init"))
    result = fit(model, split, cfg.train, augment_config=cfg.data.augment_config(),
                 out_dir=out_dir)

    write_history_csv(result.history, out_dir / "history.csv")
    cfg.write(out_dir / "effective-config.json")
    last = result.history[-1]
    print(f"trained {cfg.train.epochs} epochs on {len(split.train)} train / "
          f"{len(split.val)} val series; best epoch {result.best_epoch} "
          f"(val macro-F1 {max(h.val_macro_f1 for h in result.history):.4f}); "
          f"final val loss {last.val_loss:.4f}")
    print(f"artifacts: {out_dir / 'checkpoint.rdnc'}, {out_dir / 'history.csv'}, "
          f"{out_dir / 'effective-config.json'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    samples = load_dataset(args.data)
    if not samples:
        return _fail(f"no series found under {args.data}")

    if args.split != "all":
        if args.config:
            cfg = RunConfig.from_file(args.config)
            ratio, seed = cfg.data.split_ratio, cfg.seed
        else:
            ratio, seed = args.split_ratio, args.seed
        split = split_train_val(samples, ratio, derive_seed(seed, "split"))
        samples = split.train if args.split == "train" else split.val

    report = evaluate(model, samples, workers=args.workers)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_metrics_json(report, out_dir / "metrics.json")
    print(report.format_table())
    return EXIT_OK


def cmd_predict(args) -> int:
    model = load_checkpoint(args.checkpoint)
    series_dir = Path(args.series)
    if not series_dir.is_dir():
        return _fail(f"series directory {series_dir} does not exist")
    slices = tuple(sorted(
        p for p in series_dir.iterdir() if p.is_file() and p.suffix in SLICE_EXTENSIONS))
    if not slices:
        return _fail(f"series directory {series_dir} contains no readable slices")
    sample = SeriesSample(series_id=series_dir.name, slice_paths=slices, label=None)
    record = predict_series(model, sample)

    if args.json:
        payload = {
            "series_id": record.series_id,
            "slices": [{"path": str(p), "probability": prob}
                       for p, prob in zip(slices, record.per_slice_probs)],
            "aggregate": record.aggregate_score,
            "label": record.predicted_label,
            "threshold": record.threshold,
        }
        print(json.dumps(payload, indent=2, sort_keys=True))
    else:
        for p, prob in zip(slices, record.per_slice_probs):
            print(f"{p.name}  {prob:.6f}")
        print(f"aggregate  {record.aggregate_score:.6f}")
        print(f"label  {record.predicted_label}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="resdense",
        description="Dual-backbone fusion classifier for CT-scan series.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic desk-scale dataset")
    p.add_argument("--out", required=True, help="output directory (must be empty or absent)")
    p.add_argument("--series", type=int, default=40, help="number of series")
    p.add_argument("--slices", type=int, default=8, help="slices per series")
    p.add_argument("--size", type=int, default=32, help="square image size in pixels")
    p.add_argument("--signal", type=float, default=0.9, help="class signal strength in (0, 1]")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model and keep the best checkpoint")
    p.add_argument("--config", help="JSON run config (defaults are used when omitted)")
    p.add_argument("--data", help="dataset root (overrides config data.path)")
    p.add_argument("--out", help="output directory (overrides config output_dir)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a labeled dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset root")
    p.add_argument("--out", required=True, help="directory for metrics.json")
    p.add_argument("--split", choices=("all", "train", "val"), default="all",
                   help="evaluate everything, or one side of the deterministic split")
    p.add_argument("--config", help="run config supplying the split ratio and seed")
    p.add_argument("--split-ratio", type=float, default=0.75)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1,
                   help="parallel series evaluation (never changes results)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="score one series directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--series", required=True, help="directory of slice files")
    p.add_argument("--json", action="store_true", help="machine-readable output")
    p.set_defaults(func=cmd_predict)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except TrainingDiverged as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, CheckpointError, DataError) as exc:
        return _fail(str(exc))
    except (ValueError, OSError) as exc:
        return _fail(str(exc))


if __name__ == "__main__":
    sys.exit(main())
