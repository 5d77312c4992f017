"""Reference end-to-end runs on the built-in synthetic benchmark.

One call covers the whole workflow for a root seed: generate the domain
datasets, pretrain one teacher per requested organ on its source domain,
adapt each teacher to the shared unlabeled target split, then distill
teacher subsets into multi-organ students.  Everything is scored on the
held-out target test split, and wall-clock times are recorded per stage
so callers can account runtime against whichever subset they use.

The numbers here are deliberate: 48 pretraining epochs with a 3x
foreground class weight gives teachers that clear 0.85 Dice on their
source test split while leaving a visible zero-shot gap on the target,
and 8 adaptation epochs recover most of that gap.  Distillation needs
fewer passes because the student only has to fit fixed pseudo-labels.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .adaptation import ORGAN_ENTROPY_THRESHOLDS, AdaptConfig, run_model_adaptation
from .ensemble import EnsembleConfig, TeacherPool, run_model_ensemble
from .exceptions import ConfigError
from .metrics import evaluate_segmentation
from .network import SegNet, SegNetConfig, init_network
from .synthbench import ORGAN_CLASS_IDS, SynthDataset, default_domain_specs, generate_dataset
from .training import train_supervised

SOURCE_N = 40
TARGET_N = 80
TARGET_SPLIT_COUNTS = {"train": 60, "test": 20}
PRETRAIN_EPOCHS = 48
PRETRAIN_FG_WEIGHT = 3.0
ADAPT_EPOCHS = 8
DISTILL_EPOCHS = 10

# per-organ offsets keep every dataset and network seed distinct under one root
_DATASET_OFFSET = {"liver": 0, "spleen": 100, "kidney": 200}
_TARGET_OFFSET = 300


@dataclass(frozen=True)
class TeacherOutcome:
    """Scores for one organ's teacher, all on held-out test splits."""

    organ: str
    source_dice: float
    zero_shot_dice: float
    adapted_dice: float
    seconds: float

    @property
    def gain(self) -> float:
        return self.adapted_dice - self.zero_shot_dice


@dataclass(frozen=True)
class StudentOutcome:
    strategy: str
    organs: tuple[str, ...]
    dice: dict[str, float]
    seconds: float

    @property
    def mean_dice(self) -> float:
        return float(np.mean([self.dice[o] for o in self.organs]))


@dataclass
class BenchmarkRun:
    root_seed: int
    teachers: dict[str, TeacherOutcome] = field(default_factory=dict)
    students: dict[str, StudentOutcome] = field(default_factory=dict)
    adapted_nets: dict[str, SegNet] = field(default_factory=dict)
    datasets: dict[str, SynthDataset] = field(default_factory=dict)
    dataset_seconds: float = 0.0


def build_datasets(root_seed: int, organs) -> dict[str, SynthDataset]:
    """Source datasets for the requested organs plus the shared target."""
    specs = default_domain_specs()
    out: dict[str, SynthDataset] = {}
    for organ in organs:
        if organ not in _DATASET_OFFSET:
            raise ConfigError(f"unknown benchmark organ {organ!r}")
        out[organ] = generate_dataset(
            specs[f"source_{organ}"], SOURCE_N, root_seed * 10000 + _DATASET_OFFSET[organ]
        )
    out["target"] = generate_dataset(
        specs["target"],
        TARGET_N,
        root_seed * 10000 + _TARGET_OFFSET,
        split_counts=TARGET_SPLIT_COUNTS,
    )
    return out


def train_teacher(
    root_seed: int,
    organ: str,
    source: SynthDataset,
    *,
    epochs: int = PRETRAIN_EPOCHS,
) -> SegNet:
    """Pretrain a single-organ teacher on its source domain."""
    organ_id = ORGAN_CLASS_IDS[organ]
    net = init_network(
        SegNetConfig(num_classes=2, aux_decoders=0),
        seed=root_seed * 10000 + 7 + organ_id,
        class_binding=(0, organ_id),
    )
    labels = (source.labels("train") == organ_id).astype(np.int64)
    train_supervised(
        net,
        source.images("train"),
        labels,
        epochs=epochs,
        batch_size=4,
        lr=2e-3,
        seed=root_seed * 10000 + 70 + organ_id,
        final_lr_fraction=0.1,
        class_weights=(1.0, PRETRAIN_FG_WEIGHT),
    )
    return net


def adapt_teacher(
    root_seed: int,
    organ: str,
    teacher: SegNet,
    target: SynthDataset,
    *,
    epochs: int = ADAPT_EPOCHS,
) -> SegNet:
    """Source-free adaptation of a frozen teacher to the target train split."""
    organ_id = ORGAN_CLASS_IDS[organ]
    config = AdaptConfig(
        entropy_threshold=ORGAN_ENTROPY_THRESHOLDS[organ],
        epochs=epochs,
        seed=root_seed * 10000 + 700 + organ_id,
    )
    return run_model_adaptation(teacher, target.images("train"), config).net


def _organ_dice(net: SegNet, images: np.ndarray, labels: np.ndarray, organ: str) -> float:
    organ_id = ORGAN_CLASS_IDS[organ]
    report = evaluate_segmentation(net.predict(images), labels, [organ_id])
    return report.per_class[organ_id].dice


def run_teacher_stage(
    root_seed: int,
    organ: str,
    source: SynthDataset,
    target: SynthDataset,
    *,
    pretrain_epochs: int = PRETRAIN_EPOCHS,
    adapt_epochs: int = ADAPT_EPOCHS,
) -> tuple[SegNet, TeacherOutcome]:
    started = time.perf_counter()
    teacher = train_teacher(root_seed, organ, source, epochs=pretrain_epochs)
    adapted = adapt_teacher(root_seed, organ, teacher, target, epochs=adapt_epochs)
    outcome = TeacherOutcome(
        organ=organ,
        source_dice=_organ_dice(teacher, source.images("test"), source.labels("test"), organ),
        zero_shot_dice=_organ_dice(teacher, target.images("test"), target.labels("test"), organ),
        adapted_dice=_organ_dice(adapted, target.images("test"), target.labels("test"), organ),
        seconds=time.perf_counter() - started,
    )
    return adapted, outcome


def distill_student(
    root_seed: int,
    organs,
    adapted_nets: dict[str, SegNet],
    target: SynthDataset,
    *,
    strategy: str = "certainty_norm",
    epochs: int = DISTILL_EPOCHS,
    seed_salt: int = 0,
) -> tuple[SegNet, StudentOutcome]:
    """Distill the named adapted teachers into one multi-organ student."""
    organs = tuple(organs)
    started = time.perf_counter()
    pool = TeacherPool([adapted_nets[o] for o in organs])
    config = EnsembleConfig(
        strategy=strategy,
        epochs=epochs,
        seed=root_seed * 10000 + 7000 + seed_salt,
    )
    result = run_model_ensemble(pool, target.images("train"), config)
    dice = {
        o: _organ_dice(result.student, target.images("test"), target.labels("test"), o)
        for o in organs
    }
    outcome = StudentOutcome(
        strategy=strategy,
        organs=organs,
        dice=dice,
        seconds=time.perf_counter() - started,
    )
    return result.student, outcome


def run_benchmark(
    root_seed: int,
    *,
    organs=("liver", "spleen"),
    student_specs=None,
    pretrain_epochs: int = PRETRAIN_EPOCHS,
    adapt_epochs: int = ADAPT_EPOCHS,
    distill_epochs: int = DISTILL_EPOCHS,
) -> BenchmarkRun:
    """Full benchmark pass for one root seed.

    ``student_specs`` maps a label to ``(strategy, organs)``; the default
    distills all requested organs with the certainty-guided strategy.
    """
    organs = tuple(organs)
    if student_specs is None:
        student_specs = {"student": ("certainty_norm", organs)}
    run = BenchmarkRun(root_seed=root_seed)
    started = time.perf_counter()
    run.datasets = build_datasets(root_seed, organs)
    run.dataset_seconds = time.perf_counter() - started
    for organ in organs:
        adapted, outcome = run_teacher_stage(
            root_seed,
            organ,
            run.datasets[organ],
            run.datasets["target"],
            pretrain_epochs=pretrain_epochs,
            adapt_epochs=adapt_epochs,
        )
        run.adapted_nets[organ] = adapted
        run.teachers[organ] = outcome
    for salt, (label, (strategy, subset)) in enumerate(sorted(student_specs.items())):
        _, outcome = distill_student(
            root_seed,
            subset,
            run.adapted_nets,
            run.datasets["target"],
            strategy=strategy,
            epochs=distill_epochs,
            seed_salt=salt,
        )
        run.students[label] = outcome
    return run
