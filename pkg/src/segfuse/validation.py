"""Input checking shared by the estimator layer and the CLI."""

from __future__ import annotations

import numpy as np

from .exceptions import DataError


def check_image_stack(images, *, name: str = "X") -> np.ndarray:
    """Coerce to a float64 [N, 1, H, W] stack.

    A [N, H, W] array grows a channel axis; anything else with the wrong
    rank, an empty batch, or non-finite values is rejected.
    """
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[:, None]
    if arr.ndim != 4 or arr.shape[1] != 1:
        raise DataError(
            f"{name} must be [N, H, W] or [N, 1, H, W] grayscale, got shape {arr.shape}"
        )
    if arr.shape[0] == 0:
        raise DataError(f"{name} is empty")
    if not np.isfinite(arr).all():
        raise DataError(f"{name} contains non-finite values")
    return arr


def check_label_stack(labels, images: np.ndarray | None = None, *, name: str = "y") -> np.ndarray:
    """Coerce to an int64 [N, H, W] label-map stack, matched to ``images``."""
    arr = np.asarray(labels)
    if not np.issubdtype(arr.dtype, np.integer):
        as_float = np.asarray(arr, dtype=np.float64)
        rounded = np.rint(as_float)
        if not np.array_equal(rounded, as_float):
            raise DataError(f"{name} must hold integer class ids")
        arr = rounded
    arr = arr.astype(np.int64)
    if arr.ndim != 3:
        raise DataError(f"{name} must be [N, H, W] class ids, got shape {arr.shape}")
    if (arr < 0).any():
        raise DataError(f"{name} contains negative class ids")
    if images is not None:
        expected = (images.shape[0],) + tuple(images.shape[2:])
        if arr.shape != expected:
            raise DataError(
                f"{name} shape {arr.shape} does not match images {expected}"
            )
    return arr


def map_global_to_local(labels: np.ndarray, class_binding, *, name: str = "y") -> np.ndarray:
    """Turn global class ids into the network's channel indices.

    Every id present in ``labels`` must appear in ``class_binding``.
    """
    binding = tuple(int(c) for c in class_binding)
    present = np.unique(labels)
    unknown = sorted(set(int(c) for c in present) - set(binding))
    if unknown:
        raise DataError(
            f"{name} contains class ids {unknown} outside the binding {binding}"
        )
    lookup = np.zeros(max(binding) + 1, dtype=np.int64)
    for local, global_id in enumerate(binding):
        lookup[global_id] = local
    return lookup[labels]
