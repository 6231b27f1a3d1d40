"""Command-line entry point.

Every subcommand reads an optional flat key=value config file (--config) and
then key=value overrides given on the command line; later values win. Keys
name fields of TrainConfig, SplitConfig or the run options below.

Exit codes: 0 on success, 1 on numeric failure, 2 on usage or config errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import sys
import time
from contextlib import nullcontext
from pathlib import Path
from typing import Optional

import numpy as np

from . import dataio
from .errors import DamError, NotConverged, NumericFailure
from .model import DamModel, LabeledDataset, classify
from .numerics import make_rng
from .saddle import clamped_state_from_model, stability_spectrum, stationarity_residual
from .splitting import SplitConfig, SplitReport, apply_split, splitting_descent
from .training import (
    History,
    OptimizerState,
    TrainConfig,
    evaluate,
    train_supervised,
    train_unsupervised,
)

EXIT_OK = 0
EXIT_NUMERIC = 1
EXIT_USAGE = 2


class ConfigError(Exception):
    """A config key or value is invalid, or a referenced path is missing."""


@dataclasses.dataclass
class RunOptions:
    data: Optional[str] = None  # MNIST IDX directory or a pixels+label CSV file
    test_data: Optional[str] = None
    checkpoint: Optional[str] = None
    max_examples: Optional[int] = None
    label_smoothing: float = 0.0
    eps: float = 0.1
    patch_size: int = 6
    patch_stride: int = 6
    max_images: Optional[int] = None
    spectrum: int = 0
    duplicate: int = 0
    n_teacher: int = 5
    n_dim: int = 200
    beta_star: float = 100.0
    n_examples: int = 50_000
    overlap_patterns: int = 0


@dataclasses.dataclass
class RunConfig:
    train: TrainConfig
    split: SplitConfig
    run: RunOptions
    out: Path
    seed: int
    as_json: bool
    explicit: frozenset = frozenset()  # keys set by the config file or overrides


def _convert(value: str, annotation):
    text = str(annotation)
    if value.lower() in ("none", "null") and "Optional" in text:
        return None
    if "bool" in text:
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {value}")
    try:
        if "int" in text:
            return int(value)
        if "float" in text:
            return float(value)
    except ValueError as exc:
        raise ConfigError(f"bad number {value!r}") from exc
    return value


def parse_pairs(lines) -> list:
    """Split 'key=value' strings, skipping blanks and '#' comments."""
    pairs = []
    for raw in lines:
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"expected key=value, got {raw.strip()!r}")
        pairs.append((key.strip(), value.strip()))
    return pairs


def build_config(args: argparse.Namespace) -> RunConfig:
    pairs = []
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        pairs += parse_pairs(path.read_text().splitlines())
    pairs += parse_pairs(args.overrides)
    targets = [TrainConfig(), SplitConfig(), RunOptions()]
    fields = [{f.name: f for f in dataclasses.fields(t)} for t in targets]
    for key, value in pairs:
        hits = [(t, fs[key]) for t, fs in zip(targets, fields) if key in fs]
        if not hits:
            raise ConfigError(f"unknown config key: {key}")
        for target, field in hits:
            setattr(target, key, _convert(value, field.type))
    train, split, run = targets
    if args.seed is not None:
        train.seed = args.seed
    try:
        train.validate()
        split.validate()
    except DamError as exc:
        raise ConfigError(str(exc)) from exc
    for name in ("data", "test_data", "checkpoint"):
        value = getattr(run, name)
        if value is not None and not Path(value).exists():
            raise ConfigError(f"{name} path not found: {value}")
    return RunConfig(train, split, run, Path(args.out), train.seed, args.json, frozenset(k for k, _ in pairs))


def _load_data(path: str, run: RunOptions, split: str = "train") -> LabeledDataset:
    p = Path(path)
    if p.is_dir():
        data = dataio.load_mnist(p, split, run.label_smoothing)
    else:
        data = dataio.load_digits_csv(p, run.label_smoothing, n_classes=10)
    if run.max_examples is not None:
        data = data.subset(np.arange(min(run.max_examples, len(data))))
    return data


def _require(value, name: str):
    if value is None:
        raise ConfigError(f"{name} is required for this command")
    return value


def _write_history(path: Path, history: History) -> None:
    dataio.write_table_csv(
        path,
        ["epoch", "loss", "accuracy", "beta", "sinkhorn_failures", "seconds"],
        [
            (i + 1, e.loss, e.accuracy, e.beta, e.sinkhorn_failures, e.seconds)
            for i, e in enumerate(history.epochs)
        ],
    )


def _export_images(model: DamModel, out: Path) -> None:
    side = math.isqrt(model.n_dim)
    if side * side == model.n_dim:
        dataio.export_memories_pgm(model, side, out / "memories")


def _metrics_dict(model: DamModel, data: LabeledDataset) -> dict:
    m = evaluate(model, data)
    return {
        "accuracy": m.accuracy,
        "effective_loss": m.effective_loss,
        "nll": m.nll,
        "fidelity": list(m.fidelity),
        "n_examples": len(data),
    }


def _report(cfg: RunConfig, summary: dict) -> None:
    if cfg.as_json:
        print(json.dumps(summary, sort_keys=True))
    else:
        for key, value in summary.items():
            print(f"{key}: {value}")


def cmd_train(cfg: RunConfig) -> int:
    data = _load_data(_require(cfg.run.data, "data"), cfg.run)
    out = dataio.ensure_dir(cfg.out)
    model, history = train_supervised(data, cfg.train, rng=make_rng(cfg.seed, "train"))
    dataio.save_checkpoint(out / "model.ckpt", model, seed=cfg.seed)
    _write_history(out / "metrics.csv", history)
    _export_images(model, out)
    summary = {"command": "train", "n_hidden": model.n_hidden, "beta": model.beta, "train": _metrics_dict(model, data)}
    if cfg.run.test_data:
        summary["test"] = _metrics_dict(model, _load_data(cfg.run.test_data, cfg.run, "test"))
    _report(cfg, summary)
    return EXIT_OK


def cmd_split_train(cfg: RunConfig) -> int:
    data = _load_data(_require(cfg.run.data, "data"), cfg.run)
    out = dataio.ensure_dir(cfg.out)
    start = time.perf_counter()
    model, history = splitting_descent(data, cfg.split, cfg.train, rng=make_rng(cfg.seed, "train"))
    seconds = time.perf_counter() - start
    dataio.save_checkpoint(out / "model.ckpt", model, seed=cfg.seed)
    _write_history(out / "metrics.csv", history.epochs)
    dataio.write_table_csv(
        out / "phases.csv",
        ["phase", "p_cur", "epochs", "sgd_seconds", "eigen_seconds", "n_split", "lambda_min", "loss", "accuracy"],
        [
            (i, ph.p_cur, ph.epochs, ph.sgd_seconds, ph.eigen_seconds, ph.n_split, ph.lambda_min, ph.loss, ph.accuracy)
            for i, ph in enumerate(history.phases)
        ],
    )
    _export_images(model, out)
    summary = {
        "command": "split-train",
        "n_hidden": model.n_hidden,
        "p_trajectory": history.p_trajectory,
        "stop_reason": history.stop_reason,
        "seconds": seconds,
        "train": _metrics_dict(model, data),
    }
    if cfg.run.test_data:
        summary["test"] = _metrics_dict(model, _load_data(cfg.run.test_data, cfg.run, "test"))
    _report(cfg, summary)
    return EXIT_OK


def cmd_train_unsup(cfg: RunConfig) -> int:
    data = _load_data(_require(cfg.run.data, "data"), cfg.run)
    side = math.isqrt(data.inputs.shape[1])
    if side * side != data.inputs.shape[1]:
        raise ConfigError("unsupervised patch training needs square images")
    images = data.inputs.reshape(-1, side, side)
    if cfg.run.max_images is not None:
        images = images[: cfg.run.max_images]
    patches = dataio.extract_patches(images, cfg.run.patch_size, cfg.run.patch_stride)
    train_cfg = cfg.train
    if train_cfg.n_classes is None:
        train_cfg = dataclasses.replace(train_cfg, n_classes=10)
    out = dataio.ensure_dir(cfg.out)
    model, history = train_unsupervised(patches, train_cfg, cfg.run.eps, rng=make_rng(cfg.seed, "train"))
    dataio.save_checkpoint(out / "model.ckpt", model, seed=cfg.seed)
    _write_history(out / "metrics.csv", history)
    dataio.export_memories_pgm(model, cfg.run.patch_size, out / "memories")
    latent = np.argmax(model.class_weights.entries[1:], axis=1)
    dataio.write_table_csv(out / "latent_classes.csv", ["unit", "class"], enumerate(latent.tolist()))
    _report(
        cfg,
        {
            "command": "train-unsup",
            "n_patches": len(patches),
            "dropped_patches": patches.meta["dropped"],
            "distinct_classes": int(len(set(latent.tolist()))),
            "class_counts": np.bincount(latent, minlength=model.n_classes + 1).tolist(),
            "final_loss": history.losses[-1] if history.epochs else None,
        },
    )
    return EXIT_OK


def _load_model(cfg: RunConfig):
    model, opt, header = dataio.load_checkpoint(_require(cfg.run.checkpoint, "checkpoint"))
    return model, opt, header


def _check_dims(model: DamModel, data: LabeledDataset) -> None:
    if data.inputs.shape[1] != model.n_dim:
        raise ConfigError(f"data dimension {data.inputs.shape[1]} does not match the model's {model.n_dim}")
    if data.soft_labels.shape[1] != model.n_classes + 1:
        raise ConfigError("data classes do not match the model")


def cmd_eval(cfg: RunConfig) -> int:
    model, _, _ = _load_model(cfg)
    data = _load_data(_require(cfg.run.data, "data"), cfg.run, "test")
    _check_dims(model, data)
    _report(cfg, {"command": "eval", **_metrics_dict(model, data)})
    return EXIT_OK


def cmd_saddle(cfg: RunConfig) -> int:
    model, _, _ = _load_model(cfg)
    data = _load_data(_require(cfg.run.data, "data"), cfg.run)
    _check_dims(model, data)
    out = dataio.ensure_dir(cfg.out)
    if cfg.run.duplicate:
        r = cfg.run.duplicate
        if not 1 <= r <= model.n_hidden:
            raise ConfigError(f"duplicate must lie in 1..{model.n_hidden}")
        report = SplitReport(np.zeros(model.n_hidden), np.zeros_like(model.memories))
        model, _, _ = apply_split(model, OptimizerState.zeros_like(model), np.arange(r), report, cfg.split, delta=0.0)
        dataio.save_checkpoint(out / "duplicated.ckpt", model, seed=cfg.seed)
    residual = stationarity_residual(model, data)
    summary = {
        "command": "saddle",
        "n_hidden": model.n_hidden,
        "residual_memories": residual.memories,
        "residual_class_weights": residual.class_weights,
    }
    if cfg.run.spectrum:
        state = clamped_state_from_model(model, data.inputs)
        spec = stability_spectrum(state, data.inputs, data.soft_labels, k=cfg.run.spectrum, seed=cfg.seed)
        summary["spectrum_moduli"] = spec.moduli.tolist()
        summary["unstable"] = bool(spec.moduli[0] > 1.0)
    _report(cfg, summary)
    return EXIT_OK


def cmd_teacher_student(cfg: RunConfig) -> int:
    run = cfg.run
    n_classes = cfg.train.n_classes or run.n_teacher
    spec, data = dataio.generate_teacher_student(
        run.n_teacher, run.n_dim, n_classes, run.beta_star, run.n_examples, rng=make_rng(cfg.seed, "teacher")
    )
    n_hidden = cfg.train.n_hidden if "n_hidden" in cfg.explicit else run.n_teacher
    train_cfg = dataclasses.replace(cfg.train, n_hidden=n_hidden)
    model, history = train_supervised(data, train_cfg, rng=make_rng(cfg.seed, "student"))
    overlaps = model.memories @ spec.memories.T
    best = np.argmax(overlaps, axis=1)
    student_class = np.argmax(model.class_weights.entries[1:], axis=1)
    teacher_class = np.argmax(spec.class_profiles, axis=1)
    out = dataio.ensure_dir(cfg.out)
    dataio.save_checkpoint(out / "student.ckpt", model, seed=cfg.seed)
    _write_history(out / "metrics.csv", history)
    _report(
        cfg,
        {
            "command": "teacher-student",
            "best_overlap": overlaps.max(axis=1).tolist(),
            "mean_best_overlap": float(overlaps.max(axis=1).mean()),
            "best_teacher": best.tolist(),
            "class_recovered": bool(np.all(student_class == teacher_class[best])),
            "upsilon": spec.upsilon,
            "alpha_per_unit": run.n_examples / (run.n_teacher * run.n_dim),
        },
    )
    return EXIT_OK


def cmd_export(cfg: RunConfig) -> int:
    model, _, _ = _load_model(cfg)
    out = dataio.ensure_dir(cfg.out)
    side = math.isqrt(model.n_dim)
    written = {}
    if side * side == model.n_dim:
        written["pgm"] = len(dataio.export_memories_pgm(model, side, out / "memories"))
    if cfg.run.data:
        data = _load_data(cfg.run.data, cfg.run)
        _check_dims(model, data)
        k = cfg.run.overlap_patterns or len(data)
        written["csv_rows"] = dataio.export_overlaps_csv(data.inputs, [(0, model)], out / "overlaps.csv", k)
        preds = classify(model, data.inputs)
        written["accuracy"] = float(np.mean(preds == data.hard_labels))
    _report(cfg, {"command": "export", **written})
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "split-train": cmd_split_train,
    "train-unsup": cmd_train_unsup,
    "eval": cmd_eval,
    "saddle": cmd_saddle,
    "teacher-student": cmd_teacher_student,
    "export": cmd_export,
}

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dam", description="Dense associative memory training and analysis.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("overrides", nargs="*", metavar="key=value", help="config overrides")
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--seed", type=int, help="master seed for every random stream")
        p.add_argument("--threads", type=int, help="BLAS threads (default: library default)")
        p.add_argument("--out", default="dam_out", help="output directory")
        p.add_argument("--json", action="store_true", help="print a JSON summary")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        cfg = build_config(args)
        if args.threads is not None:
            if args.threads < 1:
                raise ConfigError("--threads must be positive")
            from threadpoolctl import threadpool_limits

            limiter = threadpool_limits(limits=args.threads)
        else:
            limiter = nullcontext()
        with limiter:
            return COMMANDS[args.command](cfg)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericFailure, NotConverged, FloatingPointError, ArithmeticError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DamError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
