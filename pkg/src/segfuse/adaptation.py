"""Stage I: self-supervised adaptation of a frozen-source teacher.

The teacher's own target-domain predictions are refined with class
prototypes (feature centroids weighted by predicted probability) and used
as pseudo-labels; auxiliary decoders on perturbed features are pulled
toward the main decoder's predictions; an information-maximization term
keeps predictions confident per pixel but diverse across the batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    AdamState,
    Tensor,
    adam_step,
    add,
    cross_entropy,
    log,
    mean_axes,
    mul,
    no_grad,
    scale,
    shannon_entropy,
    softmax,
    tsum,
)
from .exceptions import ConfigError, DataError
from .network import SegNet, attach_fresh_aux
from .rng import derive_seed, generator
from .training import check_finite_loss, collect_grads, epoch_batches, zero_grads

# entropy gates (nats) chosen per organ: large smooth structures get a
# strict gate, small ones a permissive gate that lets more pixels be
# reassigned by prototype similarity
ORGAN_ENTROPY_THRESHOLDS = {"liver": 0.1, "spleen": 0.4, "kidney": 0.2}

_PROTOTYPE_EPS = 1e-6


@dataclass(frozen=True)
class Prototype:
    """Feature centroid of one network output channel.

    ``class_id`` is the network-local channel index (0 = background),
    not a global organ id.
    """

    class_id: int
    vector: np.ndarray


@dataclass(frozen=True)
class AdaptConfig:
    entropy_threshold: float
    aux_decoders: int = 4
    consistency_weight: float = 0.1
    infomax_weight: float = 1.0
    diversity_weight: float = 0.1
    epochs: int = 100
    batch_size: int = 4
    lr: float = 2e-3
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.entropy_threshold < math.log(2.0):
            raise ConfigError(
                f"entropy_threshold must lie in (0, ln 2) for binary teachers, "
                f"got {self.entropy_threshold}"
            )
        if self.aux_decoders < 0:
            raise ConfigError("aux_decoders must be >= 0")
        for name in ("consistency_weight", "infomax_weight", "diversity_weight"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")


@dataclass(frozen=True)
class RefinedLabels:
    """Pseudo-labels after the entropy/prototype refinement step.

    ``labels`` are network-local channel ids. ``kept_mask`` is True exactly
    where pixel entropy was at or below the threshold; ``reassigned_mask``
    marks pixels whose label came from prototype similarity instead of the
    network's argmax. ``prototypes_missing`` flags the degenerate case where
    no class had enough soft mass to form any prototype.
    """

    labels: np.ndarray
    kept_mask: np.ndarray
    reassigned_mask: np.ndarray
    prototypes_missing: bool = False

    def select(self, idx) -> "RefinedLabels":
        """The same refinement restricted to a batch of image indices."""
        return RefinedLabels(
            labels=self.labels[idx],
            kept_mask=self.kept_mask[idx],
            reassigned_mask=self.reassigned_mask[idx],
            prototypes_missing=self.prototypes_missing,
        )


def prototypes_from_maps(
    probs: np.ndarray, features: np.ndarray, eps: float = _PROTOTYPE_EPS
) -> list[Prototype]:
    """Probability-weighted feature centroids from explicit maps.

    probs: [N, C, H, W] soft assignments; features: [N, D, H, W]. A class
    whose total soft mass is <= eps gets no prototype.
    """
    probs = np.asarray(probs, dtype=np.float64)
    features = np.asarray(features, dtype=np.float64)
    if probs.ndim != 4 or features.ndim != 4:
        raise ValueError("probs and features must be [N, C, H, W] / [N, D, H, W]")
    if probs.shape[0] != features.shape[0] or probs.shape[2:] != features.shape[2:]:
        raise ValueError(
            f"probs {probs.shape} and features {features.shape} do not align"
        )
    out: list[Prototype] = []
    for c in range(probs.shape[1]):
        w = probs[:, c]
        mass = float(w.sum())
        if mass <= eps:
            continue
        vec = np.einsum("nhw,ndhw->d", w, features) / mass
        if not np.isfinite(vec).all():
            raise DataError(f"non-finite prototype for channel {c}")
        out.append(Prototype(class_id=c, vector=vec))
    return out


def compute_prototypes(
    net: SegNet, images: np.ndarray, chunk: int = 8
) -> list[Prototype]:
    """Centroids of decision features over a full image set, one per class
    with soft mass above the epsilon floor.

    Accumulates sums in a fixed image order so the result is independent of
    chunking and bit-stable across runs.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or len(images) == 0:
        raise DataError("compute_prototypes needs a non-empty [N, 1, H, W] stack")
    c_total: np.ndarray | None = None
    v_total: np.ndarray | None = None
    with no_grad():
        for start in range(0, len(images), chunk):
            logits, taps = net.forward(images[start : start + chunk])
            probs = softmax(logits, axis=-3).data
            feats = taps.decision.data
            mass = probs.sum(axis=(0, 2, 3))
            vecs = np.einsum("nchw,ndhw->cd", probs, feats)
            c_total = mass if c_total is None else c_total + mass
            v_total = vecs if v_total is None else v_total + vecs
    out: list[Prototype] = []
    for c in range(c_total.shape[0]):
        if c_total[c] <= _PROTOTYPE_EPS:
            continue
        out.append(Prototype(class_id=c, vector=v_total[c] / c_total[c]))
    return out


def prototype_similarity(feature: np.ndarray, proto: Prototype) -> float:
    """Signed cosine similarity between one feature vector and a prototype.

    Either vector having near-zero norm yields 0 (neutral).
    """
    f = np.asarray(feature, dtype=np.float64)
    p = np.asarray(proto.vector, dtype=np.float64)
    if f.shape != p.shape:
        raise ValueError(f"feature {f.shape} and prototype {p.shape} differ")
    nf = float(np.linalg.norm(f))
    npv = float(np.linalg.norm(p))
    if nf <= 1e-12 or npv <= 1e-12:
        return 0.0
    return float(f @ p / (nf * npv))


def _similarity_maps(
    features: np.ndarray, prototypes: list[Prototype], num_classes: int
) -> np.ndarray:
    """[N, C, H, W] cosine similarity per class; absent classes get -inf."""
    n, d, h, w = features.shape
    norms = np.linalg.norm(features, axis=1)
    sims = np.full((n, num_classes, h, w), -np.inf)
    for proto in prototypes:
        pn = float(np.linalg.norm(proto.vector))
        dot = np.einsum("ndhw,d->nhw", features, proto.vector)
        with np.errstate(invalid="ignore", divide="ignore"):
            s = np.where(
                (norms > 1e-12) & (pn > 1e-12), dot / (norms * pn + 1e-300), 0.0
            )
        sims[:, proto.class_id] = s
    return sims


def refine_pseudo_labels(
    probs: np.ndarray,
    features: np.ndarray,
    prototypes: list[Prototype],
    entropy_threshold: float,
) -> RefinedLabels:
    """Entropy-gated pseudo-label refinement.

    Confident pixels (entropy <= threshold) keep the network's argmax;
    uncertain pixels are reassigned to the class whose prototype their
    decision feature is most similar to. Classes without a prototype do
    not compete, and a pixel predicted as such a class keeps its label.
    """
    probs = np.asarray(probs, dtype=np.float64)
    features = np.asarray(features, dtype=np.float64)
    squeeze = probs.ndim == 3
    if squeeze:
        probs = probs[None]
        features = features[None]
    if probs.ndim != 4 or features.ndim != 4:
        raise ValueError("probs/features must be 3-D or 4-D maps")
    if entropy_threshold < 0:
        raise ValueError("entropy_threshold must be >= 0")
    num_classes = probs.shape[1]
    preds = probs.argmax(axis=1)
    lam = shannon_entropy(probs, axis=1)
    kept = lam <= entropy_threshold

    labels = preds.copy()
    reassigned = np.zeros_like(kept)
    missing = len(prototypes) == 0
    if not missing:
        present = {p.class_id for p in prototypes}
        sims = _similarity_maps(features, prototypes, num_classes)
        by_sim = sims.argmax(axis=1)
        pred_has_proto = np.isin(preds, sorted(present))
        reassign = ~kept & pred_has_proto
        labels[reassign] = by_sim[reassign]
        reassigned = reassign
    if squeeze:
        return RefinedLabels(labels[0], kept[0], reassigned[0], missing)
    return RefinedLabels(labels, kept, reassigned, missing)


def pseudo_label_loss(probs: Tensor, refined: RefinedLabels) -> Tensor:
    """Cross-entropy of the network's probabilities against refined labels."""
    return cross_entropy(probs, refined.labels)


def consistency_loss(
    main: Tensor, aux: list[Tensor], reference: np.ndarray | None = None
) -> Tensor:
    """Mean squared disagreement between auxiliary and main predictions.

    The main prediction acts as a fixed target: gradients flow through the
    auxiliary branches only. ``reference`` supplies the target values
    explicitly (useful when the caller already holds them); by default the
    main tensor's current values are used, detached.
    """
    if len(aux) == 0:
        raise ConfigError("consistency needs at least one auxiliary prediction")
    ref = main.data if reference is None else np.asarray(reference, dtype=np.float64)
    if ref.shape != main.shape:
        raise ValueError(f"reference {ref.shape} does not match main {main.shape}")
    ref_t = Tensor(ref.copy())
    total: Tensor | None = None
    for a in aux:
        if a.shape != main.shape:
            raise ValueError(f"aux prediction {a.shape} does not match {main.shape}")
        diff = add(a, scale(ref_t, -1.0))
        term = scale(tsum(mul(diff, diff)), 1.0 / diff.data.size)
        total = term if total is None else add(total, term)
    return scale(total, 1.0 / len(aux))


def infomax_loss(probs: Tensor, diversity_weight: float) -> Tensor:
    """Per-pixel entropy plus weighted negative entropy of the batch marginal.

    Minimizing the first term sharpens individual predictions; minimizing
    the second (a sum of m*ln m over the per-class mean probability m)
    spreads predictions across classes instead of collapsing to one.
    """
    if probs.ndim == 3:
        pixel_axes = (1, 2)
        count = probs.shape[1] * probs.shape[2]
    elif probs.ndim == 4:
        pixel_axes = (0, 2, 3)
        count = probs.shape[0] * probs.shape[2] * probs.shape[3]
    else:
        raise ValueError(f"probs must be 3-D or 4-D, got {probs.shape}")
    ent = scale(tsum(mul(probs, log(probs))), -1.0 / count)
    marginal = mean_axes(probs, pixel_axes)
    div = tsum(mul(marginal, log(marginal)))
    return add(ent, scale(div, diversity_weight))


@dataclass
class AdaptResult:
    net: SegNet
    trace: list[dict]
    refined: RefinedLabels


def run_model_adaptation(
    teacher: SegNet, images: np.ndarray, config: AdaptConfig
) -> AdaptResult:
    """Adapt a pretrained teacher to unlabeled target images, in two parts
    per batch: pseudo-label refinement loss on the main decoder, and the
    consistency plus information-maximization regularizers.

    The refined pseudo-labels are produced once, up front, from the frozen
    input teacher: its prototypes reassign its own uncertain predictions,
    and the result supervises every epoch.  Anchoring the labels this way
    keeps self-training from chasing its own drifting predictions, which
    otherwise runs away to an all-foreground fixed point.

    Returns a network without auxiliary decoders (they only serve training),
    a per-epoch loss trace, and the refined labels that supervised it.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or len(images) == 0:
        raise DataError("adaptation needs a non-empty [N, 1, H, W] image stack")
    if config.entropy_threshold >= math.log(teacher.config.num_classes):
        raise ConfigError(
            f"entropy_threshold {config.entropy_threshold} is not below ln(C) "
            f"for C={teacher.config.num_classes}"
        )
    probs_parts: list[np.ndarray] = []
    feats_parts: list[np.ndarray] = []
    with no_grad():
        for start in range(0, len(images), 8):
            logits, taps = teacher.forward(images[start : start + 8])
            probs_parts.append(softmax(logits, axis=-3).data)
            feats_parts.append(taps.decision.data)
    teacher_probs = np.concatenate(probs_parts)
    teacher_feats = np.concatenate(feats_parts)
    prototypes = prototypes_from_maps(teacher_probs, teacher_feats)
    refined = refine_pseudo_labels(
        teacher_probs, teacher_feats, prototypes, config.entropy_threshold
    )
    net = attach_fresh_aux(teacher, config.aux_decoders, config.seed)
    params = net.parameters()
    state = AdamState(lr=config.lr)
    order_rng = generator(derive_seed(config.seed, "adapt-batch-order"))
    trace: list[dict] = []
    for epoch in range(config.epochs):
        sums = {"label": 0.0, "consistency": 0.0, "infomax": 0.0, "total": 0.0}
        batches = epoch_batches(len(images), config.batch_size, order_rng)
        for bi, idx in enumerate(batches):
            batch = images[idx]
            if config.aux_decoders > 0:
                drop_seed = derive_seed(config.seed, f"dropout-e{epoch}-b{bi}")
                main_probs, aux_probs, _ = net.forward_with_aux(batch, drop_seed)
            else:
                logits, _ = net.forward(batch)
                main_probs = softmax(logits, axis=-3)
                aux_probs = []
            label_term = pseudo_label_loss(main_probs, refined.select(idx))
            im_term = infomax_loss(main_probs, config.diversity_weight)
            loss = add(label_term, scale(im_term, config.infomax_weight))
            if aux_probs:
                con_term = consistency_loss(main_probs, aux_probs)
                loss = add(loss, scale(con_term, config.consistency_weight))
                con_value = con_term.item()
            else:
                con_value = 0.0
            check_finite_loss(loss.item(), f"epoch {epoch}, batch {bi}")
            zero_grads(params)
            loss.backward()
            adam_step(params, collect_grads(params), state)
            sums["label"] += label_term.item()
            sums["consistency"] += con_value
            sums["infomax"] += im_term.item()
            sums["total"] += loss.item()
        trace.append(
            {"epoch": epoch, **{k: v / len(batches) for k, v in sums.items()}}
        )
    return AdaptResult(net=net.copy(drop_aux=True), trace=trace, refined=refined)
