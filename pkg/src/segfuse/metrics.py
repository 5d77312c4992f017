"""Overlap and surface-distance metrics for label maps.

Conventions chosen once and used everywhere:

* Dice of two empty masks is 1.0 (perfect agreement on "nothing there").
* Boundary pixels are foreground pixels with at least one 4-neighbor that
  is background; pixels on the image border count their outside neighbors
  as background.
* ASD is the symmetric mean of nearest-boundary distances (Euclidean, in
  pixels), averaged over both boundary sets. Two empty masks give 0; if
  exactly one is empty the image diagonal is returned as a penalty
  (override with ``empty_penalty``).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np


def _as_bool_mask(mask, name: str) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr.astype(bool)


def dice_score(pred, truth) -> float:
    """2|P∩T| / (|P|+|T|); 1.0 when both masks are empty."""
    p = _as_bool_mask(pred, "pred")
    t = _as_bool_mask(truth, "truth")
    if p.shape != t.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {t.shape}")
    denom = int(p.sum()) + int(t.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, t).sum()) / denom


def boundary_map(mask) -> np.ndarray:
    """Boolean map of boundary pixels (4-connectivity, border = background)."""
    m = _as_bool_mask(mask, "mask")
    padded = np.pad(m, 1, constant_values=False)
    has_bg_neighbor = ~(
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return m & has_bg_neighbor


def extract_boundary(mask) -> np.ndarray:
    """Boundary pixel coordinates as an [K, 2] array of (row, col)."""
    return np.argwhere(boundary_map(mask))


def average_surface_distance(pred, truth, empty_penalty: float | None = None) -> float:
    """Symmetric mean distance between the two mask boundaries, in pixels."""
    p = _as_bool_mask(pred, "pred")
    t = _as_bool_mask(truth, "truth")
    if p.shape != t.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {t.shape}")
    bp = extract_boundary(p).astype(np.float64)
    bt = extract_boundary(t).astype(np.float64)
    if len(bp) == 0 and len(bt) == 0:
        return 0.0
    if len(bp) == 0 or len(bt) == 0:
        if empty_penalty is None:
            empty_penalty = math.hypot(*p.shape)
        return float(empty_penalty)
    d2 = ((bp[:, None, :] - bt[None, :, :]) ** 2).sum(axis=2)
    d_p_to_t = np.sqrt(d2.min(axis=1))
    d_t_to_p = np.sqrt(d2.min(axis=0))
    return float((d_p_to_t.mean() + d_t_to_p.mean()) / 2.0)


@dataclass(frozen=True)
class ClassMetrics:
    dice: float
    asd: float


@dataclass(frozen=True)
class MetricReport:
    """Per-class Dice/ASD plus their means over the evaluated classes."""

    per_class: dict[int, ClassMetrics]
    mean_dice: float
    mean_asd: float

    def to_dict(self) -> dict:
        return {
            "per_class": {
                str(c): {"dice": m.dice, "asd": m.asd} for c, m in sorted(self.per_class.items())
            },
            "mean_dice": self.mean_dice,
            "mean_asd": self.mean_asd,
        }

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def write_csv(self, path: str | Path) -> None:
        lines = ["class,dice,asd"]
        for c, m in sorted(self.per_class.items()):
            lines.append(f"{c},{m.dice:.6f},{m.asd:.6f}")
        lines.append(f"mean,{self.mean_dice:.6f},{self.mean_asd:.6f}")
        Path(path).write_text("\n".join(lines) + "\n")


def evaluate_segmentation(pred_labels, true_labels, class_ids) -> MetricReport:
    """Mean per-class metrics over a stack of label maps.

    ``pred_labels``/``true_labels``: [N, H, W] integer maps in a shared
    class space; ``class_ids``: foreground ids to score. Per class, Dice
    and ASD are averaged over the N images.
    """
    preds = np.asarray(pred_labels)
    truths = np.asarray(true_labels)
    if preds.ndim == 2:
        preds = preds[None]
        truths = truths[None]
    if preds.shape != truths.shape:
        raise ValueError(f"prediction/truth shapes differ: {preds.shape} vs {truths.shape}")
    class_ids = [int(c) for c in class_ids]
    if not class_ids:
        raise ValueError("no class ids to evaluate")
    per_class: dict[int, ClassMetrics] = {}
    for c in class_ids:
        dices = []
        asds = []
        for p, t in zip(preds, truths):
            dices.append(dice_score(p == c, t == c))
            asds.append(average_surface_distance(p == c, t == c))
        per_class[c] = ClassMetrics(dice=float(np.mean(dices)), asd=float(np.mean(asds)))
    return MetricReport(
        per_class=per_class,
        mean_dice=float(np.mean([m.dice for m in per_class.values()])),
        mean_asd=float(np.mean([m.asd for m in per_class.values()])),
    )
