"""Shared training-loop plumbing: batching, gradient collection, traces."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .autodiff import AdamState, Parameter, adam_step, cross_entropy, softmax
from .exceptions import DataError, NumericalError
from .network import SegNet
from .rng import derive_seed, generator


def epoch_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled index batches covering all n samples (last batch may be short)."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def collect_grads(params: Sequence[Parameter]) -> list[np.ndarray | None]:
    return [p.grad for p in params]


def zero_grads(params: Sequence[Parameter]) -> None:
    for p in params:
        p.zero_grad()


def check_finite_loss(loss_value: float, context: str) -> None:
    if not np.isfinite(loss_value):
        raise NumericalError(f"non-finite loss at {context}")


def train_supervised(
    net: SegNet,
    images: np.ndarray,
    labels: np.ndarray,
    *,
    epochs: int,
    batch_size: int,
    lr: float,
    seed: int,
    final_lr_fraction: float = 1.0,
    class_weights=None,
) -> list[dict]:
    """Cross-entropy training on labeled images, in place on ``net``.

    ``labels`` must already be in the network's local channel ids
    (0..num_classes-1). Returns one trace row per epoch.

    ``final_lr_fraction`` < 1 anneals the step size linearly from ``lr``
    to ``lr * final_lr_fraction`` over the epochs, which settles the late
    phase of training instead of letting it bounce around the minimum.
    ``class_weights`` counteracts foreground/background imbalance; small
    structures are otherwise eroded toward the background prior.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    if len(images) == 0:
        raise DataError("no training images")
    if len(images) != len(labels):
        raise DataError("images and labels length mismatch")
    if labels.max(initial=0) >= net.config.num_classes:
        raise DataError("label id outside the network's class space")
    if not 0.0 < final_lr_fraction <= 1.0:
        raise ValueError("final_lr_fraction must be in (0, 1]")
    rng = generator(derive_seed(seed, "supervised-batch-order"))
    state = AdamState(lr=lr)
    params = net.parameters()
    trace: list[dict] = []
    for epoch in range(epochs):
        if epochs > 1:
            frac = epoch / (epochs - 1)
            state.lr = lr * (1.0 - frac * (1.0 - final_lr_fraction))
        total = 0.0
        batches = epoch_batches(len(images), batch_size, rng)
        for bi, idx in enumerate(batches):
            logits, _ = net.forward(images[idx])
            probs = softmax(logits, axis=-3)
            loss = cross_entropy(probs, labels[idx], class_weights=class_weights)
            check_finite_loss(loss.item(), f"epoch {epoch}, batch {bi}")
            zero_grads(params)
            loss.backward()
            adam_step(params, collect_grads(params), state)
            total += loss.item()
        trace.append({"epoch": epoch, "loss": total / len(batches)})
    return trace


def write_trace_csv(path: str | Path, rows: Iterable[dict]) -> None:
    rows = list(rows)
    if not rows:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
