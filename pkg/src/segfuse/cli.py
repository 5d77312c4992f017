"""Command-line pipeline around the library.

Subcommands mirror the workflow: ``synth-gen`` builds a benchmark dataset,
``pretrain`` fits a single-organ teacher on a source domain, ``adapt``
tunes a frozen teacher to unlabeled target images, ``ensemble`` distills
adapted teachers into one multi-organ student, and ``eval`` / ``render``
score or visualize any checkpoint.

Every command accepts ``--config FILE`` (a JSON object of parameter
overrides); explicit command-line flags win over the file.  The resolved
parameters are written to ``config.json`` in the output directory, and
their path-independent fingerprint is embedded in any checkpoint the run
produces, so artifacts can be traced back to the exact configuration.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure during training.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .adaptation import ORGAN_ENTROPY_THRESHOLDS, AdaptConfig, run_model_adaptation
from .checkpoint import config_fingerprint, load_checkpoint, save_checkpoint
from .ensemble import STRATEGIES, EnsembleConfig, TeacherPool, run_model_ensemble
from .exceptions import ConfigError, DataError, NumericalError
from .metrics import evaluate_segmentation
from .network import SegNetConfig, init_network
from .render import render_gallery
from .rng import derive_seed
from .synthbench import (
    IMAGE_SIZE,
    ORGAN_CLASS_IDS,
    dataset_digest,
    default_domain_specs,
    generate_dataset,
    load_dataset,
    save_dataset,
)
from .training import train_supervised, write_trace_csv

_TEACHER_KINDS = ("pretrained-teacher", "adapted-teacher")


# ---------------------------------------------------------------------------
# configuration plumbing


def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """Merge defaults <- config file <- explicit flags, in that order."""
    resolved = dict(defaults)
    config_path = getattr(args, "config", None)
    if config_path:
        path = Path(config_path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            loaded = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        unknown = sorted(set(loaded) - set(defaults))
        if unknown:
            raise ConfigError(f"unknown config keys {unknown}; expected a subset of {sorted(defaults)}")
        resolved.update(loaded)
    for key in defaults:
        flag_value = getattr(args, key, None)
        if flag_value is not None:
            resolved[key] = flag_value
    return resolved


def _write_run(params: dict, command: str) -> tuple[Path, str]:
    """Create the output directory and persist the resolved config.json."""
    out_dir = Path(str(_require(params, "out")))
    out_dir.mkdir(parents=True, exist_ok=True)
    fingerprint = config_fingerprint({"command": command, **params})
    doc = {
        "command": command,
        "version": __version__,
        "fingerprint": fingerprint,
        "parameters": params,
    }
    (out_dir / "config.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return out_dir, fingerprint


def _start_run(args: argparse.Namespace, command: str, defaults: dict) -> tuple[dict, Path, str]:
    params = _resolve(args, defaults)
    out_dir, fingerprint = _write_run(params, command)
    return params, out_dir, fingerprint


def _require(params: dict, key: str) -> object:
    if params.get(key) is None:
        raise ConfigError(f"missing required parameter: {key}")
    return params[key]


def _load_split(dataset_dir: str, split: str | None):
    dataset = load_dataset(dataset_dir)
    if split is not None and split not in dataset.splits:
        raise ConfigError(
            f"dataset at {dataset_dir} has no split {split!r}; available: {sorted(dataset.splits)}"
        )
    return dataset, dataset.images(split), dataset.labels(split)


def _read_unlabeled_images(directory: Path, split: str | None) -> np.ndarray:
    """Image stack of a dataset directory whose labels.bin is absent."""
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"no dataset manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("kind") != "synth-dataset":
        raise DataError(f"not a dataset directory: kind={manifest.get('kind')!r}")
    n = int(manifest["n"])
    shape = tuple(manifest["image_shape"])
    images = np.frombuffer(
        (directory / "images.bin").read_bytes(), dtype="<f8"
    ).reshape((n, *shape))
    if split is not None:
        indices = manifest.get("splits", {}).get(split)
        if indices is None:
            raise ConfigError(f"dataset at {directory} has no split {split!r}")
        images = images[list(indices)]
    return images.copy()


def _write_metrics(out_dir: Path, name: str, report) -> None:
    report.write_json(out_dir / f"{name}.json")
    report.write_csv(out_dir / f"{name}.csv")


# ---------------------------------------------------------------------------
# synth-gen


_SYNTH_DEFAULTS = {
    "out": None,
    "domain": None,
    "n": 40,
    "seed": 0,
    "train": None,
    "test": None,
}


def cmd_synth_gen(args: argparse.Namespace) -> int:
    params, out_dir, _ = _start_run(args, "synth-gen", _SYNTH_DEFAULTS)
    domain = str(_require(params, "domain"))
    specs = default_domain_specs()
    if domain not in specs:
        raise ConfigError(f"unknown domain {domain!r}; choose from {sorted(specs)}")
    split_counts = None
    if params["train"] is not None or params["test"] is not None:
        if params["train"] is None or params["test"] is None:
            raise ConfigError("custom splits need both --train and --test counts")
        split_counts = {"train": int(params["train"]), "test": int(params["test"])}
    dataset = generate_dataset(
        specs[domain], int(params["n"]), int(params["seed"]), split_counts=split_counts
    )
    save_dataset(dataset, out_dir)
    digest = dataset_digest(dataset)
    print(f"wrote {dataset.n} {domain} images ({IMAGE_SIZE}x{IMAGE_SIZE}) to {out_dir} [{digest[:12]}]")
    return 0


# ---------------------------------------------------------------------------
# pretrain


_PRETRAIN_DEFAULTS = {
    "out": None,
    "dataset": None,
    "organ": None,
    "epochs": 48,
    "batch_size": 4,
    "lr": 2e-3,
    "final_lr_fraction": 0.1,
    "fg_weight": 3.0,
    "seed": 0,
}


def cmd_pretrain(args: argparse.Namespace) -> int:
    params, out_dir, fingerprint = _start_run(args, "pretrain", _PRETRAIN_DEFAULTS)
    organ = str(_require(params, "organ"))
    if organ not in ORGAN_CLASS_IDS:
        raise ConfigError(f"unknown organ {organ!r}; choose from {sorted(ORGAN_CLASS_IDS)}")
    organ_id = ORGAN_CLASS_IDS[organ]
    dataset, images, labels = _load_split(str(_require(params, "dataset")), "train")

    binding = (0, organ_id)
    seed = int(params["seed"])
    net = init_network(
        SegNetConfig(num_classes=2, aux_decoders=0),
        seed=derive_seed(seed, f"pretrain-init-{organ}"),
        class_binding=binding,
    )
    local = (labels == organ_id).astype(np.int64)
    trace = train_supervised(
        net,
        images,
        local,
        epochs=int(params["epochs"]),
        batch_size=int(params["batch_size"]),
        lr=float(params["lr"]),
        seed=derive_seed(seed, f"pretrain-batches-{organ}"),
        final_lr_fraction=float(params["final_lr_fraction"]),
        class_weights=(1.0, float(params["fg_weight"])),
    )
    write_trace_csv(out_dir / "trace.csv", trace)
    save_checkpoint(
        out_dir / "teacher.ckpt",
        net,
        "pretrained-teacher",
        fingerprint=fingerprint,
        extra={"organ": organ, "organ_id": organ_id, "dataset_digest": dataset_digest(dataset)},
    )
    report = evaluate_segmentation(net.predict(dataset.images("test")), dataset.labels("test"), [organ_id])
    _write_metrics(out_dir, "metrics", report)
    print(f"pretrained {organ} teacher: source-test dice {report.mean_dice:.3f} -> {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# adapt


_ADAPT_DEFAULTS = {
    "out": None,
    "teacher": None,
    "dataset": None,
    "split": "train",
    "entropy_threshold": None,
    "aux_decoders": 4,
    "consistency_weight": 0.1,
    "infomax_weight": 1.0,
    "diversity_weight": 0.1,
    "epochs": 8,
    "batch_size": 4,
    "lr": 2e-3,
    "seed": 0,
    "eval": False,
}


def cmd_adapt(args: argparse.Namespace) -> int:
    params = _resolve(args, _ADAPT_DEFAULTS)
    bundle = load_checkpoint(str(_require(params, "teacher")), expect_kind=_TEACHER_KINDS)
    teacher = bundle.net
    if teacher.config.num_classes != 2:
        raise ConfigError(
            f"adaptation expects a single-organ teacher (2 classes), got {teacher.config.num_classes}"
        )
    organ = bundle.manifest.get("extra", {}).get("organ")
    if params["entropy_threshold"] is None:
        if organ not in ORGAN_ENTROPY_THRESHOLDS:
            raise ConfigError(
                "checkpoint does not record its organ; pass --entropy-threshold explicitly"
            )
        params["entropy_threshold"] = ORGAN_ENTROPY_THRESHOLDS[organ]
    out_dir, fingerprint = _write_run(params, "adapt")

    dataset, images, labels = _load_split(str(_require(params, "dataset")), str(params["split"]))
    config = AdaptConfig(
        entropy_threshold=float(params["entropy_threshold"]),
        aux_decoders=int(params["aux_decoders"]),
        consistency_weight=float(params["consistency_weight"]),
        infomax_weight=float(params["infomax_weight"]),
        diversity_weight=float(params["diversity_weight"]),
        epochs=int(params["epochs"]),
        batch_size=int(params["batch_size"]),
        lr=float(params["lr"]),
        seed=int(params["seed"]),
    )
    # target labels feed evaluation only, never the adaptation itself
    result = run_model_adaptation(teacher, images, config)
    write_trace_csv(out_dir / "trace.csv", result.trace)
    extra = dict(bundle.manifest.get("extra", {}))
    extra["adapted_from"] = bundle.manifest.get("fingerprint")
    save_checkpoint(
        out_dir / "adapted.ckpt", result.net, "adapted-teacher", fingerprint=fingerprint, extra=extra
    )
    organ_ids = list(teacher.foreground_classes)
    if params["eval"]:
        test_images = dataset.images("test")
        test_labels = dataset.labels("test")
        before = evaluate_segmentation(teacher.predict(test_images), test_labels, organ_ids)
        after = evaluate_segmentation(result.net.predict(test_images), test_labels, organ_ids)
        _write_metrics(out_dir, "metrics_before", before)
        _write_metrics(out_dir, "metrics_after", after)
        print(
            f"adapted teacher: target-test dice {before.mean_dice:.3f} -> {after.mean_dice:.3f} ({out_dir})"
        )
    else:
        print(f"adapted teacher -> {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# ensemble


_ENSEMBLE_DEFAULTS = {
    "out": None,
    "teachers": None,
    "dataset": None,
    "split": "train",
    "strategy": "certainty_norm",
    "feature_weight": 0.001,
    "proj_channels": 32,
    "epochs": 12,
    "batch_size": 2,
    "lr": 2e-3,
    "seed": 0,
    "eval": False,
}


def _save_selection(out_dir: Path, selection, pool: TeacherPool, strategy: str, split: str) -> None:
    selected = np.ascontiguousarray(selection.selected.astype(np.uint8))
    (out_dir / "selection.bin").write_bytes(selected.tobytes())
    doc = {
        "shape": list(selected.shape),
        "dtype": "u1",
        "strategy": strategy,
        "split": split,
        "teachers": [list(t.foreground_classes) for t in pool.teachers],
    }
    (out_dir / "selection.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def cmd_ensemble(args: argparse.Namespace) -> int:
    params, out_dir, fingerprint = _start_run(args, "ensemble", _ENSEMBLE_DEFAULTS)
    paths = _require(params, "teachers")
    if isinstance(paths, str):
        paths = [paths]
    bundles = [load_checkpoint(str(p), expect_kind=_TEACHER_KINDS) for p in paths]
    pool = TeacherPool([b.net for b in bundles])
    dataset, images, labels = _load_split(str(_require(params, "dataset")), str(params["split"]))
    config = EnsembleConfig(
        strategy=str(params["strategy"]),
        feature_weight=float(params["feature_weight"]),
        proj_channels=int(params["proj_channels"]),
        epochs=int(params["epochs"]),
        batch_size=int(params["batch_size"]),
        lr=float(params["lr"]),
        seed=int(params["seed"]),
    )
    result = run_model_ensemble(pool, images, config)
    write_trace_csv(out_dir / "trace.csv", result.trace)
    _save_selection(out_dir, result.selection, pool, config.strategy, str(params["split"]))
    extra = {
        "organs": sorted(pool.foreground_classes),
        "teacher_fingerprints": [b.manifest.get("fingerprint") for b in bundles],
        "strategy": config.strategy,
    }
    save_checkpoint(
        out_dir / "student.ckpt", result.student, "student", fingerprint=fingerprint, extra=extra
    )
    if params["eval"]:
        test_images = dataset.images("test")
        test_labels = dataset.labels("test")
        report = evaluate_segmentation(
            result.student.predict(test_images), test_labels, pool.foreground_classes
        )
        _write_metrics(out_dir, "metrics", report)
        print(f"student ({config.strategy}): target-test dice {report.mean_dice:.3f} -> {out_dir}")
    else:
        print(f"student ({config.strategy}) -> {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# eval / render


_EVAL_DEFAULTS = {
    "out": None,
    "checkpoint": None,
    "dataset": None,
    "split": "test",
}


def cmd_eval(args: argparse.Namespace) -> int:
    params, out_dir, _ = _start_run(args, "eval", _EVAL_DEFAULTS)
    bundle = load_checkpoint(str(_require(params, "checkpoint")))
    dataset_dir = Path(str(_require(params, "dataset")))
    if not (dataset_dir / "labels.bin").exists():
        raise DataError(f"evaluation needs ground-truth labels, none under {dataset_dir}")
    dataset, images, labels = _load_split(str(dataset_dir), params["split"])
    report = evaluate_segmentation(
        bundle.net.predict(images), labels, bundle.net.foreground_classes
    )
    _write_metrics(out_dir, "metrics", report)
    for cls in sorted(report.per_class):
        m = report.per_class[cls]
        print(f"class {cls}: dice {m.dice:.4f}  surface-distance {m.asd:.3f}")
    print(f"mean: dice {report.mean_dice:.4f}  surface-distance {report.mean_asd:.3f}")
    return 0


_RENDER_DEFAULTS = {
    "out": None,
    "checkpoint": None,
    "dataset": None,
    "split": "test",
    "limit": 8,
    "selection": None,
}


def _load_selection_planes(path: str):
    sidecar = Path(path) / "selection.json"
    plane_file = Path(path) / "selection.bin"
    if not sidecar.exists() or not plane_file.exists():
        raise DataError(f"no selection.bin/selection.json pair under {path}")
    doc = json.loads(sidecar.read_text())
    shape = tuple(int(s) for s in doc["shape"])
    planes = np.frombuffer(plane_file.read_bytes(), dtype=np.uint8)
    if planes.size != int(np.prod(shape)):
        raise DataError(f"selection plane size {planes.size} does not match shape {shape}")
    return planes.reshape(shape), doc.get("split")


def cmd_render(args: argparse.Namespace) -> int:
    params, out_dir, _ = _start_run(args, "render", _RENDER_DEFAULTS)
    bundle = load_checkpoint(str(_require(params, "checkpoint")))
    dataset_dir = Path(str(_require(params, "dataset")))
    split = params["split"]
    if (dataset_dir / "labels.bin").exists():
        _, images, truths = _load_split(str(dataset_dir), split)
    else:
        # unlabeled corpus: fall back to prediction-only overlays
        images = _read_unlabeled_images(dataset_dir, split)
        truths = None
    limit = int(params["limit"])
    if limit <= 0:
        raise ConfigError(f"--limit must be positive, got {limit}")
    images = images[:limit]
    if truths is not None:
        truths = truths[:limit]
    preds = bundle.net.predict(images)
    selected = None
    if params["selection"] is not None:
        planes, planes_split = _load_selection_planes(str(params["selection"]))
        if planes_split is not None and planes_split != split:
            raise DataError(
                f"selection planes were cached for split {planes_split!r}, "
                f"cannot pair them with split {split!r} images"
            )
        if planes.shape[1:] != images.shape[-2:]:
            raise DataError(
                f"selection planes {planes.shape} do not match image size {images.shape[-2:]}"
            )
        selected = planes[: len(images)]
        if len(selected) < len(images):
            raise DataError(
                f"selection covers {len(planes)} images, render asked for {len(images)}"
            )
    paths = render_gallery(images, preds, truths, out_dir, selected=selected)
    print(f"wrote {len(paths)} images to {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="JSON file of parameter overrides")
    sub.add_argument("--out", help="output directory for this run")
    sub.add_argument("--seed", type=int, help="root seed for this run")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="segfuse",
        description="Single-organ teachers, source-free adaptation, and certainty-guided fusion.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("synth-gen", help="generate a synthetic abdominal dataset")
    _add_common(p)
    p.add_argument("--domain", help="domain name from the built-in benchmark")
    p.add_argument("--n", type=int, help="number of images")
    p.add_argument("--train", type=int, help="training split size (with --test)")
    p.add_argument("--test", type=int, help="test split size (with --train)")
    p.set_defaults(func=cmd_synth_gen)

    p = commands.add_parser("pretrain", help="train a single-organ teacher on a source domain")
    _add_common(p)
    p.add_argument("--dataset", help="source dataset directory")
    p.add_argument("--organ", help="organ the teacher segments")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--final-lr-fraction", type=float, dest="final_lr_fraction")
    p.add_argument("--fg-weight", type=float, dest="fg_weight", help="foreground class weight")
    p.set_defaults(func=cmd_pretrain)

    p = commands.add_parser("adapt", help="adapt a frozen teacher to unlabeled target images")
    _add_common(p)
    p.add_argument("--teacher", help="pretrained teacher checkpoint")
    p.add_argument("--dataset", help="target dataset directory")
    p.add_argument("--split", help="dataset split to adapt on (default train)")
    p.add_argument(
        "--entropy-threshold",
        type=float,
        dest="entropy_threshold",
        help="prediction-entropy cutoff for relabeling (defaults per organ)",
    )
    p.add_argument("--aux-decoders", type=int, dest="aux_decoders")
    p.add_argument("--consistency-weight", type=float, dest="consistency_weight")
    p.add_argument("--infomax-weight", type=float, dest="infomax_weight")
    p.add_argument("--diversity-weight", type=float, dest="diversity_weight")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--eval", action="store_true", default=None, help="score before/after on the test split")
    p.set_defaults(func=cmd_adapt)

    p = commands.add_parser("ensemble", help="distill teachers into one multi-organ student")
    _add_common(p)
    p.add_argument("--teachers", nargs="+", help="adapted teacher checkpoints")
    p.add_argument("--dataset", help="target dataset directory")
    p.add_argument("--split", help="dataset split to distill on (default train)")
    p.add_argument("--strategy", choices=STRATEGIES, help="per-pixel teacher arbitration rule")
    p.add_argument("--feature-weight", type=float, dest="feature_weight")
    p.add_argument("--proj-channels", type=int, dest="proj_channels")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--eval", action="store_true", default=None, help="score the student on the test split")
    p.set_defaults(func=cmd_ensemble)

    p = commands.add_parser("eval", help="score a checkpoint against dataset labels")
    _add_common(p)
    p.add_argument("--checkpoint", help="checkpoint to evaluate")
    p.add_argument("--dataset", help="labeled dataset directory")
    p.add_argument("--split", help="dataset split to score (default test)")
    p.set_defaults(func=cmd_eval)

    p = commands.add_parser("render", help="write prediction overlays as PNG files")
    _add_common(p)
    p.add_argument("--checkpoint", help="checkpoint to visualize")
    p.add_argument("--dataset", help="dataset directory")
    p.add_argument("--split", help="dataset split to draw from (default test)")
    p.add_argument("--limit", type=int, help="maximum images to render")
    p.add_argument("--selection", help="ensemble run directory with cached selection planes")
    p.set_defaults(func=cmd_render)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return int(args.func(args) or 0)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
