"""Command-line entry point.

Every command writes into one run directory: its outputs, ``config.json``
(the resolved configuration) and ``manifest.json`` (every produced file with
its sha256, plus headline results). Nothing time-dependent is recorded, so
re-running a command reproduces the directory byte for byte.

Exit codes: 0 success, 2 usage or configuration error, 1 runtime failure.
"""

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import evalstats, fileio, nets, pipeline, scenes
from .corruption import CalibrationError, calibrate_corruption, corrupt_dataset, write_corrupted

SCHEMA_VERSION = 1
OUT_ROOT_ENV = "MOTIONSEG_OUT_ROOT"
TEST_START = 100000
PRIOR_START = 200000
NOISE_NAMES = {"erosion": "systematic_erosion", "eros-dil": "erosion_dilation", "tool-drop": "tool_drop"}


class UsageError(Exception):
    pass


@dataclass
class DataConfig:
    n_train: int = 256
    n_test: int = 64
    n_priors: int = 256


@dataclass
class SweepConfig:
    w_list: list = field(default_factory=lambda: [1, 4, 8, 16, 32, 64])
    eps_list: list = field(default_factory=lambda: [0.0, 0.2, 0.4, 0.5, 0.6, 0.8, 1.0])


@dataclass
class NoiseConfig:
    kinds: list = field(default_factory=lambda: ["systematic_erosion", "erosion_dilation", "tool_drop"])
    targets: list = field(default_factory=lambda: [0.8, 0.6, 0.4, 0.2])
    corruption_seed: int = 0


@dataclass
class ExperimentConfig:
    scene: scenes.SceneConfig = field(default_factory=scenes.SceneConfig)
    train: pipeline.TrainConfig = field(default_factory=pipeline.TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    output_dir: str = None

    def to_dict(self):
        return {"schema_version": SCHEMA_VERSION, "scene": self.scene.to_dict(), "train": self.train.to_dict(),
                "data": dataclasses.asdict(self.data), "sweep": dataclasses.asdict(self.sweep),
                "noise": dataclasses.asdict(self.noise), "output_dir": self.output_dir}


def _section(cls, d, name):
    if not isinstance(d, dict):
        raise UsageError(f"config section {name!r} must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise UsageError(f"unknown keys in config section {name!r}: {sorted(unknown)}")
    return cls(**d)


def parse_config(doc, source="<config>"):
    """Validate a config document; every problem is reported as a UsageError naming ``source``."""
    try:
        if not isinstance(doc, dict):
            raise UsageError("config must be a JSON object")
        version = doc.get("schema_version")
        if version != SCHEMA_VERSION:
            raise UsageError(f"schema_version must be {SCHEMA_VERSION}, got {version!r}")
        unknown = set(doc) - {"schema_version", "scene", "train", "data", "sweep", "noise", "output_dir"}
        if unknown:
            raise UsageError(f"unknown top-level keys: {sorted(unknown)}")
        cfg = ExperimentConfig(
            scene=scenes.SceneConfig.from_dict(doc.get("scene", {})),
            train=pipeline.TrainConfig.from_dict(doc.get("train", {})),
            data=_section(DataConfig, doc.get("data", {}), "data"),
            sweep=_section(SweepConfig, doc.get("sweep", {}), "sweep"),
            noise=_section(NoiseConfig, doc.get("noise", {}), "noise"),
            output_dir=doc.get("output_dir"),
        )
        cfg.scene.validate()
        if min(cfg.data.n_train, cfg.data.n_test, cfg.data.n_priors) < 1:
            raise UsageError("data sizes must be >= 1")
        bad = set(cfg.noise.kinds) - set(NOISE_NAMES.values())
        if bad:
            raise UsageError(f"unknown noise kinds: {sorted(bad)}")
    except (UsageError, ValueError, TypeError) as e:
        raise UsageError(f"{source}: {e}") from e
    return cfg


def load_config(path):
    if path is None:
        return ExperimentConfig()
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise UsageError(f"{p}: invalid JSON: {e}") from e
    return parse_config(doc, str(p))


# -- run directory ----------------------------------------------------------

def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _run_dir(args, cfg, command):
    if args.out:
        return Path(args.out)
    if cfg is not None and cfg.output_dir:
        return Path(cfg.output_dir) / command
    return Path(os.environ.get(OUT_ROOT_ENV, "runs")) / command


def finish_run(out, command, cfg, argv_opts, results=None):
    """Write config.json and manifest.json listing every file under ``out``."""
    out = Path(out)
    snapshot = {"command": command, "options": argv_opts, "config": cfg.to_dict() if cfg is not None else None}
    (out / "config.json").write_text(json.dumps(snapshot, indent=1, sort_keys=True))
    files = sorted(p.relative_to(out).as_posix() for p in out.rglob("*")
                   if p.is_file() and p != out / "manifest.json")
    manifest = {"command": command, "artifacts": {f: _sha256(out / f) for f in files}, "results": results or {}}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def _options(args):
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "out")}


# -- data helpers -----------------------------------------------------------

def load_split(directory):
    root = Path(directory)
    if not root.is_dir():
        raise UsageError(f"data directory not found: {root}")
    man = scenes.load_external_dataset(root, with_masks=(root / "masks").is_dir(),
                                       with_flows=(root / "flows").is_dir())
    return man.load()


def _data_root(path):
    root = Path(path)
    if not (root / "train").is_dir():
        raise UsageError(f"{root}: expected a gen-data output directory with train/ test/ priors/")
    return root


def load_priors(directory):
    d = Path(directory) / "masks"
    files = sorted(d.glob("*.png"))
    if not files:
        raise scenes.DatasetError(f"no prior masks in {d}")
    return np.stack([fileio.read_mask(f) for f in files])


def load_masks_for(split, directory):
    d = Path(directory) / "masks"
    out = []
    for pid in split.ids:
        p = d / f"{pid}_a.png"
        if not p.is_file():
            raise scenes.DatasetError(f"missing label mask: {p}")
        out.append(fileio.read_mask(p))
    return np.stack(out)


def _seeded(cfg, args):
    if getattr(args, "seed", None) is not None:
        cfg.scene.seed = args.seed
        cfg.train.seed = args.seed
    return cfg


# -- commands ---------------------------------------------------------------

def cmd_gen_data(args):
    cfg = _seeded(load_config(args.config), args)
    out = _run_dir(args, cfg, "gen-data")
    scenes.gen_dataset(cfg.scene, cfg.data.n_train, out / "train")
    scenes.gen_dataset(cfg.scene, cfg.data.n_test, out / "test", start=TEST_START)
    (out / "priors" / "masks").mkdir(parents=True, exist_ok=True)
    for i, m in enumerate(scenes.make_priors(cfg.scene, cfg.data.n_priors, start=PRIOR_START)):
        fileio.write_mask(out / "priors" / "masks" / f"{i:06d}.png", m)
    finish_run(out, "gen-data", cfg, _options(args),
               {"n_train": cfg.data.n_train, "n_test": cfg.data.n_test, "n_priors": cfg.data.n_priors})
    return out


def cmd_corrupt(args):
    split = load_split(args.data)
    if split.masks is None:
        raise UsageError(f"{args.data}: corruption needs ground-truth masks")
    kind = NOISE_NAMES[args.noise]
    out = _run_dir(args, None, "corrupt")
    spec, level = calibrate_corruption(list(split.masks), kind, args.target_iou, seed=args.seed or 0)
    noisy = corrupt_dataset(list(split.masks), spec)
    write_corrupted(out, split.ids, noisy, spec, level)
    finish_run(out, "corrupt", None, _options(args),
               {"kind": kind, "target_iou": args.target_iou, "achieved_iou": level.achieved_iou,
                "expected_iou": level.expected_iou, "spec": dataclasses.asdict(spec)})
    return out


def cmd_train(args):
    cfg = _seeded(load_config(args.config), args)
    if args.mode:
        cfg.train.mode = args.mode
    cfg.train.validate()
    root = _data_root(args.data)
    train, test = load_split(root / "train"), load_split(root / "test")
    priors = load_priors(root / "priors")
    out = _run_dir(args, cfg, "train")
    res = pipeline.run_training(cfg.train, train, priors, test, out_dir=out)
    keys = ("pseudo_label_iou", "teacher_test_iou", "proxy_test_iou", "student_test_iou")
    finish_run(out, "train", cfg, _options(args), {k: res.report.get(k) for k in keys})
    return out


def cmd_pseudo_label(args):
    teacher, _ = nets.load_checkpoint(args.checkpoint)
    split = load_split(args.data)
    out = _run_dir(args, None, "pseudo-label")
    labels = pipeline.make_pseudo_labels(teacher, split, args.eps)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    for lab in labels:
        fileio.write_mask(out / "masks" / f"{lab.source_id}_a.png", lab.y_t)
    results = {"n": len(labels)}
    if split.masks is not None:
        results["label_iou"] = pipeline.mean_iou(pipeline.label_stack(labels), split.masks)
    finish_run(out, "pseudo-label", None, _options(args), results)
    return out


def cmd_eval(args):
    net, _ = nets.load_checkpoint(args.checkpoint)
    split = load_split(args.data)
    source = args.source or ("flows" if net.spec.role == "teacher_segmenter" else "frames")
    out = _run_dir(args, None, "eval")
    out.mkdir(parents=True, exist_ok=True)
    rep = evalstats.evaluate(net, split, source, args.eps)
    evalstats.write_json(out / "metrics.json", rep.to_dict())
    evalstats.write_csv(out / "per_sample.csv",
                        [{"id": i, "iou": v} for i, v in zip(split.ids, rep.per_sample_iou)], ["id", "iou"])
    finish_run(out, "eval", None, _options(args), {"mean_iou": rep.mean_iou, "pixel_accuracy": rep.pixel_accuracy})
    return out


def _parse_list(text, conv):
    try:
        return [conv(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise UsageError(f"bad list {text!r}: {e}") from e


def cmd_sweep(args):
    cfg = load_config(args.config)
    split = load_split(args.data)
    if split.masks is None:
        raise UsageError(f"{args.data}: the sweep needs ground-truth masks")
    proxy, _ = nets.load_checkpoint(args.proxy)
    if args.labels:
        labels = load_masks_for(split, args.labels)
    elif args.teacher:
        teacher, _ = nets.load_checkpoint(args.teacher)
        labels = pipeline.label_stack(pipeline.make_pseudo_labels(teacher, split, cfg.train.eps_t))
    else:
        raise UsageError("sweep needs --labels DIR or --teacher CHECKPOINT")
    w_list = _parse_list(args.w_list, int) if args.w_list else cfg.sweep.w_list
    eps_list = _parse_list(args.eps_list, float) if args.eps_list else cfg.sweep.eps_list
    out = _run_dir(args, cfg, "sweep")
    out.mkdir(parents=True, exist_ok=True)
    rows = evalstats.sweep_lociou(labels, nets.segment(proxy, split.frames), split.masks, w_list, eps_list,
                                  cfg.train.eps_p)
    evalstats.write_csv(out / "sweep.csv", rows, ["w", "eps", "fraction", "eff_iou", "n_selected_samples"])
    evalstats.plot_sweep(rows, out / "sweep.png")
    finish_run(out, "sweep", cfg, _options(args),
               {"label_iou": pipeline.mean_iou(labels, split.masks), "cells": len(rows)})
    return out


def cmd_noise_study(args):
    cfg = _seeded(load_config(args.config), args)
    root = _data_root(args.data)
    train, test = load_split(root / "train"), load_split(root / "test")
    kinds = [NOISE_NAMES.get(k, k) for k in _parse_list(args.kinds, str)] if args.kinds else cfg.noise.kinds
    targets = _parse_list(args.targets, float) if args.targets else cfg.noise.targets
    out = _run_dir(args, cfg, "noise-study")
    out.mkdir(parents=True, exist_ok=True)
    study = evalstats.noise_study(train, test, targets, kinds, cfg.train, cfg.noise.corruption_seed,
                                  histograms_only=args.histograms_only)
    evalstats.write_json(out / "study.json", study.to_dict())
    if study.cells:
        evalstats.write_csv(out / "study.csv", study.cells, ["kind", "target", "label_iou", "model", "test_iou"])
    evalstats.plot_histograms(study.histograms, out / "histograms.png")
    finish_run(out, "noise-study", cfg, _options(args), {"cells": len(study.cells)})
    return out


def cmd_plot(args):
    run = Path(args.run)
    if not run.is_dir():
        raise UsageError(f"run directory not found: {run}")
    out = Path(args.out) if args.out else run / "plots"
    out.mkdir(parents=True, exist_ok=True)
    made = []
    if (run / "metrics.csv").is_file():
        import csv
        with open(run / "metrics.csv") as f:
            evalstats.plot_trace(list(csv.DictReader(f)), out / "trace.png")
        made.append("trace.png")
    if (run / "sweep.csv").is_file():
        import csv
        with open(run / "sweep.csv") as f:
            rows = [{"w": int(r["w"]), "eps": float(r["eps"]), "fraction": float(r["fraction"]),
                     "eff_iou": float(r["eff_iou"]) if r["eff_iou"] else None} for r in csv.DictReader(f)]
        evalstats.plot_sweep(rows, out / "sweep.png")
        made.append("sweep.png")
    if (run / "study.json").is_file():
        evalstats.plot_histograms(json.loads((run / "study.json").read_text())["histograms"], out / "histograms.png")
        made.append("histograms.png")
    if not made:
        raise UsageError(f"{run}: nothing to plot (no metrics.csv, sweep.csv or study.json)")
    finish_run(out, "plot", None, _options(args), {"plots": made})
    return out


# -- parser -----------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="motionseg", description="Motion-supervised tool segmentation pipeline.")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    def add(name, func, help_text, config=True, seed=True):
        sp = sub.add_parser(name, help=help_text)
        sp.set_defaults(func=func)
        if config:
            sp.add_argument("--config", help="JSON experiment config")
        if seed:
            sp.add_argument("--seed", type=int, help="master seed (overrides the config)")
        sp.add_argument("--out", help=f"run directory (default ${OUT_ROOT_ENV}/<command>)")
        return sp

    sp = add("gen-data", cmd_gen_data, "generate train/test/prior splits")

    sp = add("corrupt", cmd_corrupt, "write calibrated corrupted labels for a split", config=False)
    sp.add_argument("--data", required=True, help="split directory with masks")
    sp.add_argument("--noise", required=True, choices=sorted(NOISE_NAMES))
    sp.add_argument("--target-iou", required=True, type=float)

    sp = add("train", cmd_train, "run the full training pipeline")
    sp.add_argument("--data", required=True, help="gen-data output directory")
    sp.add_argument("--mode", choices=pipeline.MODES)

    sp = add("pseudo-label", cmd_pseudo_label, "binarized teacher labels for a split", config=False, seed=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--eps", type=float, default=0.5)

    sp = add("eval", cmd_eval, "score a checkpoint against ground truth", config=False, seed=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--source", choices=("frames", "flows"), help="default: flows for the teacher, else frames")
    sp.add_argument("--eps", type=float, default=0.5)

    sp = add("sweep", cmd_sweep, "effective fraction / IoU over (window, threshold)", seed=False)
    sp.add_argument("--data", required=True, help="split directory with masks")
    sp.add_argument("--proxy", required=True, help="proxy checkpoint")
    sp.add_argument("--labels", help="pseudo-label directory (from pseudo-label)")
    sp.add_argument("--teacher", help="teacher checkpoint (alternative to --labels)")
    sp.add_argument("--w-list", help="comma-separated window sizes")
    sp.add_argument("--eps-list", help="comma-separated thresholds")

    sp = add("noise-study", cmd_noise_study, "proxy/student on calibrated corrupted labels")
    sp.add_argument("--data", required=True, help="gen-data output directory")
    sp.add_argument("--kinds", help="comma-separated: erosion, eros-dil, tool-drop")
    sp.add_argument("--targets", help="comma-separated target IoUs")
    sp.add_argument("--histograms-only", action="store_true", help="skip training")

    sp = add("plot", cmd_plot, "render plots for a run directory", config=False, seed=False)
    sp.add_argument("--run", required=True)
    return p


_RUNTIME_ERRORS = (scenes.DatasetError, CalibrationError, nets.CheckpointError, nets.ShapeError,
                   pipeline.TrainingDivergenceError, pipeline.DatasetRejectionError, pipeline.IngestionError,
                   evalstats.EvaluationError, fileio.FlowFormatError, OSError, RuntimeError, ValueError)


def run_command(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        args.func(args)
    except UsageError as e:
        print(f"motionseg: usage error: {e}", file=sys.stderr)
        return 2
    except _RUNTIME_ERRORS as e:
        print(f"motionseg: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run_command())


if __name__ == "__main__":
    main()
