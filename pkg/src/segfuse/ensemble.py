"""Stage II: fuse several single-organ teachers into one multi-organ student.

Each pixel of the unlabeled target image is supervised by exactly one
teacher, picked by a certainty rule: per-teacher prediction entropy is
normalized within groups of pixels sharing that teacher's own hard
prediction, a pre-selection step removes teachers that cannot know the
locally claimed class, and the least-entropy eligible teacher wins.  The
winning teacher supplies the label; its intermediate features are also
distilled into the student through small learnable projection convs,
masked to the pixels it won.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    AdamState,
    Parameter,
    Tensor,
    adam_step,
    add,
    bilinear_upsample,
    conv2d,
    cross_entropy,
    mul,
    no_grad,
    scale,
    shannon_entropy,
    softmax,
    tsum,
)
from .exceptions import ConfigError, DataError
from .network import SegNet, SegNetConfig, he_init, init_network
from .rng import derive_seed, generator
from .training import check_finite_loss, collect_grads, epoch_batches, zero_grads

STRATEGIES = ("certainty_norm", "certainty_raw", "average")

_SIGMA_FLOOR = 1e-6
_CHUNK = 8


class TeacherPool:
    """Ordered frozen teachers with disjoint foreground classes.

    ``class_sets[i]`` is the set of global foreground ids teacher i was
    trained on (singleton for single-organ teachers, but kept as a set).
    """

    def __init__(self, teachers):
        teachers = tuple(teachers)
        if not teachers:
            raise ConfigError("teacher pool must not be empty")
        class_sets = []
        seen: set[int] = set()
        for i, t in enumerate(teachers):
            fg = frozenset(t.foreground_classes)
            if not fg:
                raise ConfigError(f"teacher {i} has no foreground class")
            if seen & fg:
                raise ConfigError(
                    f"teacher {i} shares foreground classes {sorted(seen & fg)} "
                    "with an earlier teacher; single-organ teachers must be disjoint"
                )
            seen |= fg
            class_sets.append(fg)
        self.teachers = teachers
        self.class_sets = tuple(class_sets)
        self.foreground_classes = tuple(sorted(seen))

    def __len__(self) -> int:
        return len(self.teachers)

    def ignorant_of(self, class_id: int) -> tuple[int, ...]:
        """Indices of teachers whose training never saw ``class_id``."""
        return tuple(
            i for i, ks in enumerate(self.class_sets) if class_id not in ks
        )


@dataclass(frozen=True)
class EnsembleConfig:
    strategy: str = "certainty_norm"
    feature_weight: float = 0.001
    proj_channels: int = 32
    epochs: int = 200
    batch_size: int = 2
    lr: float = 2e-3
    seed: int = 0

    def __post_init__(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ConfigError(
                f"strategy must be one of {STRATEGIES}, got {self.strategy!r}"
            )
        if self.feature_weight < 0:
            raise ConfigError("feature_weight must be nonnegative")
        if self.proj_channels < 1:
            raise ConfigError("proj_channels must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")


@dataclass(frozen=True)
class CertaintyMap:
    """Per-teacher prediction entropy, raw and group-normalized.

    ``raw`` and ``normalized`` are [T, N, H, W]. ``class_stats`` maps
    (teacher, image, predicted global class) to (mean, population std,
    count) of the raw entropies in that group; groups with count < 2 or
    std at or below the floor normalize to exactly 0.
    """

    raw: np.ndarray
    normalized: np.ndarray
    class_stats: dict


@dataclass(frozen=True)
class SelectionMap:
    """Per-pixel teacher assignment.

    ``selected`` is [N, H, W] teacher indices, ``eligible`` the [T, N, H, W]
    pre-selection outcome, ``masks`` the [T, N, H, W] per-teacher weights
    (one-hot for the certainty strategies, uniform 1/T for ``average``).
    """

    selected: np.ndarray
    eligible: np.ndarray
    masks: np.ndarray


def normalize_entropy(raw: np.ndarray, hard_preds: np.ndarray):
    """Mean/std-normalize entropies within (image, predicted-class) groups.

    raw, hard_preds: [N, H, W] for one teacher. Population std; degenerate
    groups (fewer than 2 pixels, or std <= 1e-6) map to 0 so they cannot
    win an argmin on spread alone. Returns (normalized, stats) with stats
    keyed by (image index, class id).
    """
    raw = np.asarray(raw, dtype=np.float64)
    hard_preds = np.asarray(hard_preds)
    if raw.shape != hard_preds.shape or raw.ndim != 3:
        raise ValueError(
            f"raw {raw.shape} and hard_preds {hard_preds.shape} must both be [N,H,W]"
        )
    normalized = np.zeros_like(raw)
    stats: dict[tuple[int, int], tuple[float, float, int]] = {}
    for n in range(raw.shape[0]):
        for cls in np.unique(hard_preds[n]):
            group = hard_preds[n] == cls
            values = raw[n][group]
            mu = float(values.mean())
            sigma = float(values.std())  # population
            stats[(n, int(cls))] = (mu, sigma, int(values.size))
            if values.size >= 2 and sigma > _SIGMA_FLOOR:
                normalized[n][group] = (raw[n][group] - mu) / sigma
    return normalized, stats


def certainty_from_probs(pool: TeacherPool, probs, hard_preds: np.ndarray) -> CertaintyMap:
    """Entropy maps for every teacher from its probability maps.

    ``probs`` is a per-teacher sequence of [N, C, H, W] arrays (channel
    counts may differ between teachers); hard_preds: [T, N, H, W] global-id
    predictions.
    """
    raws = []
    normalized = []
    stats: dict = {}
    for i in range(len(pool)):
        raw = shannon_entropy(np.asarray(probs[i], dtype=np.float64), axis=1)
        norm, st = normalize_entropy(raw, hard_preds[i])
        raws.append(raw)
        normalized.append(norm)
        for (n, cls), v in st.items():
            stats[(i, n, cls)] = v
    return CertaintyMap(
        raw=np.stack(raws), normalized=np.stack(normalized), class_stats=stats
    )


def _teacher_outputs(pool: TeacherPool, images: np.ndarray):
    """Frozen forward of every teacher: probabilities, global hard
    predictions, and the two feature taps, all as plain arrays."""
    probs: list[np.ndarray] = []
    hard: list[np.ndarray] = []
    lows: list[np.ndarray] = []
    highs: list[np.ndarray] = []
    with no_grad():
        for teacher in pool.teachers:
            p_parts, low_parts, high_parts = [], [], []
            for s in range(0, len(images), _CHUNK):
                logits, taps = teacher.forward(images[s : s + _CHUNK])
                p_parts.append(softmax(logits, axis=-3).data)
                low_parts.append(taps.low.data)
                high_parts.append(taps.high.data)
            p = np.concatenate(p_parts)
            probs.append(p)
            binding = np.asarray(teacher.class_binding, dtype=np.int64)
            hard.append(binding[p.argmax(axis=1)])
            lows.append(np.concatenate(low_parts))
            highs.append(np.concatenate(high_parts))
    return probs, np.stack(hard), lows, highs


def certainty_map(pool: TeacherPool, images: np.ndarray) -> CertaintyMap:
    """Run the pool on ``images`` and build its certainty maps."""
    images = np.asarray(images, dtype=np.float64)
    probs, hard_preds, _, _ = _teacher_outputs(pool, images)
    return certainty_from_probs(pool, probs, hard_preds)


def preselect_teachers(pool: TeacherPool, pixel_preds) -> tuple[int, ...]:
    """Eligible teacher indices at one pixel given each teacher's prediction.

    pixel_preds: per-teacher global class id at the pixel. If every teacher
    predicts background the whole pool stays eligible. Otherwise, for each
    foreground class whose ignorant teachers all predict background, those
    ignorant teachers are removed: they cannot supervise a pixel that only
    the class owner recognizes.
    """
    preds = tuple(int(p) for p in pixel_preds)
    if len(preds) != len(pool):
        raise ValueError(f"expected {len(pool)} predictions, got {len(preds)}")
    everyone = tuple(range(len(pool)))
    if all(p == 0 for p in preds):
        return everyone
    removed: set[int] = set()
    for cls in pool.foreground_classes:
        ignorant = pool.ignorant_of(cls)
        if all(preds[i] == 0 for i in ignorant):
            removed.update(ignorant)
    eligible = tuple(i for i in everyone if i not in removed)
    if not eligible:
        raise AssertionError(
            "pre-selection removed every teacher; impossible for disjoint "
            f"single-organ teachers (preds {preds})"
        )
    return eligible


def _preselect_grid(pool: TeacherPool, hard_preds: np.ndarray) -> np.ndarray:
    """Vectorized pre-selection: [T, N, H, W] eligibility booleans."""
    all_bg = (hard_preds == 0).all(axis=0)
    eligible = np.ones_like(hard_preds, dtype=bool)
    for cls in pool.foreground_classes:
        ignorant = pool.ignorant_of(cls)
        if not ignorant:
            continue
        unopposed = np.logical_and.reduce([hard_preds[i] == 0 for i in ignorant])
        for i in ignorant:
            eligible[i] &= ~unopposed
    eligible |= all_bg[None]
    if not eligible.any(axis=0).all():
        raise AssertionError("pre-selection produced an empty set at some pixel")
    return eligible


def build_selection_map(
    pool: TeacherPool,
    certainty: CertaintyMap,
    hard_preds: np.ndarray,
    strategy: str = "certainty_norm",
) -> SelectionMap:
    """Pick one supervising teacher per pixel.

    The certainty strategies take the eligible teacher with the smallest
    (normalized or raw) entropy, ties to the lowest index, and one-hot
    masks. ``average`` keeps uniform masks over the whole pool and only
    records the lowest eligible index for bookkeeping.
    """
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}")
    hard_preds = np.asarray(hard_preds)
    eligible = _preselect_grid(pool, hard_preds)
    t = len(pool)
    if strategy == "average":
        selected = eligible.argmax(axis=0)
        masks = np.full(hard_preds.shape, 1.0 / t)
    else:
        score = certainty.normalized if strategy == "certainty_norm" else certainty.raw
        if score.shape != hard_preds.shape:
            raise ValueError(
                f"certainty {score.shape} does not match predictions {hard_preds.shape}"
            )
        selected = np.where(eligible, score, np.inf).argmin(axis=0)
        masks = np.zeros(hard_preds.shape)
        np.put_along_axis(masks, selected[None], 1.0, axis=0)
    return SelectionMap(selected=selected, eligible=eligible, masks=masks)


def aggregate_labels(
    pool: TeacherPool,
    selection: SelectionMap,
    hard_preds: np.ndarray,
    strategy: str = "certainty_norm",
    probs=None,
) -> np.ndarray:
    """Compose the multi-organ pseudo-label map, in global class ids.

    Certainty strategies pass through the selected teacher's prediction.
    ``average`` embeds each teacher's binary output into the global class
    space (zero probability on classes it does not own), averages, and
    takes the argmax; it needs ``probs``.
    """
    hard_preds = np.asarray(hard_preds)
    if strategy in ("certainty_norm", "certainty_raw"):
        return np.take_along_axis(hard_preds, selection.selected[None], axis=0)[0]
    if probs is None:
        raise ConfigError("strategy 'average' needs the per-teacher probability maps")
    classes = (0,) + pool.foreground_classes
    n, h, w = hard_preds.shape[1:]
    mean = np.zeros((len(classes), n, h, w))
    for i, teacher in enumerate(pool.teachers):
        p = np.asarray(probs[i], dtype=np.float64)
        binding = teacher.class_binding
        for local, global_id in enumerate(binding):
            mean[classes.index(global_id)] += p[:, local]
    mean /= len(pool)
    mean /= mean.sum(axis=0, keepdims=True)
    return np.asarray(classes, dtype=np.int64)[mean.argmax(axis=0)]


def label_agg_loss(student_probs: Tensor, labels: np.ndarray) -> Tensor:
    """Cross-entropy of the student against the aggregated pseudo-labels.

    ``labels`` must already be in student-local channel ids; they are a
    constant, so gradient reaches only the student.
    """
    return cross_entropy(student_probs, labels)


def init_projections(pool: TeacherPool, student: SegNet, proj_channels: int, seed: int):
    """One learnable bias-free 3x3 projection conv per feature endpoint.

    Endpoints: the student's low/high taps plus each teacher's low/high
    taps; all project into the same ``proj_channels``-dim space.
    """
    rng = generator(derive_seed(seed, "proj-init"))
    low_c = student.config.encoder_channels[-1]
    high_c = student.config.head_channels
    params: dict[str, Parameter] = {}
    endpoints = [("student", low_c, high_c)]
    for i, t in enumerate(pool.teachers):
        endpoints.append((f"teacher{i}", t.config.encoder_channels[-1], t.config.head_channels))
    for name, lc, hc in endpoints:
        for tap, c in (("low", lc), ("high", hc)):
            pname = f"proj.{name}.{tap}"
            params[pname] = Parameter(
                pname, he_init(pname, (proj_channels, c, 3, 3), rng)
            )
    return params


def project_features(feat: Tensor, kernel: Tensor) -> Tensor:
    """3x3 same-padding projection into the shared distillation space."""
    return conv2d(feat, kernel, padding=1)


def feature_agg_loss(
    student_taps: dict,
    teacher_taps: list[dict],
    masks: np.ndarray,
    projections: dict,
    out_size: tuple[int, int],
) -> Tensor:
    """Masked squared distance between projected student and teacher features.

    ``student_taps`` / ``teacher_taps[i]`` map tap name ("low", "high") to
    feature tensors; teacher features are constants. Both sides are
    projected, upsampled to ``out_size``, and compared under teacher i's
    mask; each teacher's term is normalized by its own mask mass, so an
    unselected teacher contributes exactly 0.
    """
    masks = np.asarray(masks, dtype=np.float64)
    if tuple(masks.shape[-2:]) != tuple(out_size):
        raise ValueError(
            f"masks {masks.shape} do not live at the comparison resolution {out_size}"
        )
    total: Tensor | None = None
    student_proj = {}
    for tap in ("low", "high"):
        p = project_features(student_taps[tap], projections[f"proj.student.{tap}"].tensor)
        if p.shape[-2:] != out_size:
            p = bilinear_upsample(p, out_size)
        student_proj[tap] = p
    for i, taps in enumerate(teacher_taps):
        mass = float(masks[i].sum())
        if mass == 0.0:
            continue
        mask_t = Tensor(np.asarray(masks[i], dtype=np.float64)[:, None])
        for tap in ("low", "high"):
            feat = taps[tap]
            t = feat if isinstance(feat, Tensor) else Tensor(np.asarray(feat, dtype=np.float64))
            p = project_features(t, projections[f"proj.teacher{i}.{tap}"].tensor)
            if p.shape[-2:] != out_size:
                p = bilinear_upsample(p, out_size)
            diff = add(student_proj[tap], scale(p, -1.0))
            term = scale(tsum(mul(mul(diff, diff), mask_t)), 1.0 / mass)
            total = term if total is None else add(total, term)
    if total is None:
        return Tensor(np.zeros(()))
    return total


@dataclass
class EnsembleResult:
    student: SegNet
    trace: list[dict]
    selection: SelectionMap
    labels: np.ndarray  # aggregated pseudo-labels, global ids, [N, H, W]


def run_model_ensemble(
    pool: TeacherPool, images: np.ndarray, config: EnsembleConfig
) -> EnsembleResult:
    """Distill the teacher pool into one multi-organ student.

    Teacher outputs, the selection map, and the aggregated labels are
    precomputed once (the teachers are frozen, so they never change), then
    the student trains on label cross-entropy plus the weighted feature
    distillation term.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or len(images) == 0:
        raise DataError("ensemble needs a non-empty [N, 1, H, W] image stack")

    probs, hard_preds, taps_low, taps_high = _teacher_outputs(pool, images)
    certainty = certainty_from_probs(pool, probs, hard_preds)
    selection = build_selection_map(pool, certainty, hard_preds, config.strategy)
    labels_global = aggregate_labels(
        pool, selection, hard_preds, config.strategy, probs=probs
    )

    student_binding = (0,) + pool.foreground_classes
    student = init_network(
        SegNetConfig(num_classes=len(student_binding), aux_decoders=0),
        seed=derive_seed(config.seed, "student-init"),
        class_binding=student_binding,
    )
    to_local = np.zeros(max(student_binding) + 1, dtype=np.int64)
    for local, global_id in enumerate(student_binding):
        to_local[global_id] = local
    labels_local = to_local[labels_global]

    projections = init_projections(pool, student, config.proj_channels, config.seed)
    params = student.parameters() + list(projections.values())
    state = AdamState(lr=config.lr)
    order_rng = generator(derive_seed(config.seed, "ensemble-batch-order"))
    out_size = images.shape[-2:]
    trace: list[dict] = []
    for epoch in range(config.epochs):
        sums = {"label": 0.0, "feature": 0.0, "total": 0.0}
        batches = epoch_batches(len(images), config.batch_size, order_rng)
        for bi, idx in enumerate(batches):
            logits, staps = student.forward(images[idx])
            student_probs = softmax(logits, axis=-3)
            label_term = label_agg_loss(student_probs, labels_local[idx])
            teacher_batch = [
                {"low": taps_low[i][idx], "high": taps_high[i][idx]}
                for i in range(len(pool))
            ]
            feature_term = feature_agg_loss(
                {"low": staps.low, "high": staps.high},
                teacher_batch,
                selection.masks[:, idx],
                projections,
                out_size,
            )
            loss = add(label_term, scale(feature_term, config.feature_weight))
            check_finite_loss(loss.item(), f"epoch {epoch}, batch {bi}")
            zero_grads(params)
            loss.backward()
            adam_step(params, collect_grads(params), state)
            sums["label"] += label_term.item()
            sums["feature"] += feature_term.item()
            sums["total"] += loss.item()
        trace.append(
            {"epoch": epoch, **{k: v / len(batches) for k, v in sums.items()}}
        )
    return EnsembleResult(
        student=student, trace=trace, selection=selection, labels=labels_global
    )
