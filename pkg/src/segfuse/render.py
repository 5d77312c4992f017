"""PNG visualization: prediction overlays, truth contours, selection maps.

Everything renders to 8-bit RGB arrays the same size as the input image;
file output goes through Pillow. Colors are fixed per global class so
images from different runs stay comparable side by side.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .exceptions import DataError

CLASS_COLORS = {
    1: (34, 139, 34),   # liver: green
    2: (255, 193, 27),  # spleen: yellow
    3: (24, 116, 205),  # kidney: blue
}
TRUTH_COLOR = (178, 34, 34)  # ground-truth contour: red

# per-teacher tints for selection maps, cycled past index 5
TEACHER_COLORS = (
    (231, 111, 81),
    (42, 157, 143),
    (233, 196, 106),
    (109, 89, 122),
    (131, 197, 190),
    (244, 162, 97),
)

OVERLAY_ALPHA = 0.45


def class_color(class_id: int) -> tuple[int, int, int]:
    """Fixed palette for the benchmark organs, stable fallback beyond it."""
    if class_id in CLASS_COLORS:
        return CLASS_COLORS[class_id]
    # deterministic spread for ids the palette does not name
    h = (class_id * 0.6180339887498949) % 1.0
    return tuple(int(round(120 + 100 * c)) for c in (
        abs(((h * 6 + k) % 6) - 3) / 3 for k in (0, 4, 2)
    ))


def grayscale_to_rgb(image: np.ndarray) -> np.ndarray:
    """[H, W] intensities in [0, 1] to an 8-bit RGB array (clipped)."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 2:
        raise DataError(f"expected one grayscale image, got shape {arr.shape}")
    gray = np.clip(arr, 0.0, 1.0) * 255.0
    return np.repeat(np.round(gray).astype(np.uint8)[:, :, None], 3, axis=2)


def mask_contour(mask: np.ndarray) -> np.ndarray:
    """Boundary pixels of a boolean mask (4-neighborhood).

    Outside the image counts as background, so a region touching the frame
    is still outlined there.
    """
    m = np.asarray(mask, dtype=bool)
    padded = np.zeros((m.shape[0] + 2, m.shape[1] + 2), dtype=bool)
    padded[1:-1, 1:-1] = m
    interior = (
        m
        & padded[:-2, 1:-1]
        & padded[2:, 1:-1]
        & padded[1:-1, :-2]
        & padded[1:-1, 2:]
    )
    return m & ~interior


def overlay_labels(
    image: np.ndarray,
    pred: np.ndarray,
    truth: np.ndarray | None = None,
    alpha: float = OVERLAY_ALPHA,
) -> np.ndarray:
    """Blend predicted classes over the image; outline the truth if given."""
    rgb = grayscale_to_rgb(image).astype(np.float64)
    pred = np.asarray(pred)
    if pred.shape != rgb.shape[:2]:
        raise DataError(
            f"prediction {pred.shape} does not match image {rgb.shape[:2]}"
        )
    for cls in sorted(int(c) for c in np.unique(pred) if c != 0):
        color = np.asarray(class_color(cls), dtype=np.float64)
        sel = pred == cls
        rgb[sel] = (1.0 - alpha) * rgb[sel] + alpha * color
    if truth is not None:
        truth = np.asarray(truth)
        if truth.shape != pred.shape:
            raise DataError(
                f"truth {truth.shape} does not match prediction {pred.shape}"
            )
        for cls in sorted(int(c) for c in np.unique(truth) if c != 0):
            rgb[mask_contour(truth == cls)] = TRUTH_COLOR
    return np.round(rgb).astype(np.uint8)


def selection_overlay(
    image: np.ndarray, selected: np.ndarray, alpha: float = OVERLAY_ALPHA
) -> np.ndarray:
    """Tint each pixel by the teacher that supervises it."""
    rgb = grayscale_to_rgb(image).astype(np.float64)
    selected = np.asarray(selected)
    if selected.shape != rgb.shape[:2]:
        raise DataError(
            f"selection map {selected.shape} does not match image {rgb.shape[:2]}"
        )
    for idx in np.unique(selected):
        color = np.asarray(TEACHER_COLORS[int(idx) % len(TEACHER_COLORS)], dtype=np.float64)
        sel = selected == idx
        rgb[sel] = (1.0 - alpha) * rgb[sel] + alpha * color
    return np.round(rgb).astype(np.uint8)


def save_png(rgb: np.ndarray, path) -> Path:
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise DataError(f"expected an 8-bit RGB array, got {rgb.dtype} {rgb.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(rgb, mode="RGB").save(path, format="PNG")
    return path


def render_gallery(
    images: np.ndarray,
    preds: np.ndarray,
    truths: np.ndarray | None,
    out_dir,
    prefix: str = "overlay",
    selected: np.ndarray | None = None,
) -> list[Path]:
    """One overlay PNG per image; selection PNGs too when maps are given.

    Without ``truths`` the overlays degrade to prediction-only. Returns the
    written paths in image order.
    """
    out_dir = Path(out_dir)
    paths = []
    for i in range(len(images)):
        truth = None if truths is None else truths[i]
        rgb = overlay_labels(images[i], preds[i], truth)
        paths.append(save_png(rgb, out_dir / f"{prefix}_{i:03d}.png"))
        if selected is not None:
            rgb_sel = selection_overlay(images[i], selected[i])
            paths.append(save_png(rgb_sel, out_dir / f"{prefix}_{i:03d}_selection.png"))
    return paths
