"""sklearn-style wrappers around the three pipeline stages.

Each estimator stores its constructor arguments untouched (so get_params,
set_params, and clone behave), validates inputs at fit time, and exposes
the trained network through ``network_`` plus predict / predict_proba /
score in global class ids. Score is the mean per-image Dice over the
model's foreground classes.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .adaptation import AdaptConfig, run_model_adaptation
from .ensemble import EnsembleConfig, TeacherPool, run_model_ensemble
from .exceptions import ConfigError
from .metrics import dice_score
from .network import SegNet, SegNetConfig, init_network
from .rng import derive_seed
from .training import train_supervised
from .validation import check_image_stack, check_label_stack, map_global_to_local


class _SegmenterMixin:
    """Prediction and scoring over a fitted ``network_``."""

    def _fitted_network(self) -> SegNet:
        check_is_fitted(self, "network_")
        return self.network_

    def predict(self, X) -> np.ndarray:
        """Per-pixel global class ids, [N, H, W]."""
        return self._fitted_network().predict(check_image_stack(X))

    def predict_proba(self, X) -> np.ndarray:
        """Per-pixel class probabilities, [N, C, H, W] in binding order."""
        return self._fitted_network().predict_proba(check_image_stack(X))

    def score(self, X, y) -> float:
        net = self._fitted_network()
        X = check_image_stack(X)
        y = check_label_stack(y, X)
        preds = net.predict(X)
        per_class = [
            dice_score(pred == cls, truth == cls)
            for pred, truth in zip(preds, y)
            for cls in net.foreground_classes
        ]
        return float(np.mean(per_class))


class SupervisedSegmenter(_SegmenterMixin, BaseEstimator):
    """Train a fresh segmentation network on labeled images.

    ``class_binding`` fixes the output channels: entry 0 is background and
    the remaining entries are the global class ids the model learns, so a
    single-organ model is ``(0, organ_id)``. Labels passed to fit must use
    those global ids.
    """

    def __init__(
        self,
        class_binding=(0, 1),
        epochs: int = 48,
        batch_size: int = 4,
        lr: float = 2e-3,
        final_lr_fraction: float = 0.1,
        class_weights=None,
        seed: int = 0,
    ):
        self.class_binding = class_binding
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.final_lr_fraction = final_lr_fraction
        self.class_weights = class_weights
        self.seed = seed

    def fit(self, X, y):
        X = check_image_stack(X)
        y = check_label_stack(y, X)
        binding = tuple(int(c) for c in self.class_binding)
        local = map_global_to_local(y, binding)
        net = init_network(
            SegNetConfig(num_classes=len(binding), aux_decoders=0),
            seed=derive_seed(self.seed, "supervised-init"),
            class_binding=binding,
        )
        self.trace_ = train_supervised(
            net,
            X,
            local,
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            seed=derive_seed(self.seed, "supervised-batches"),
            final_lr_fraction=self.final_lr_fraction,
            class_weights=self.class_weights,
        )
        self.network_ = net
        self.classes_ = np.asarray(binding)
        return self


class SourceFreeAdapter(_SegmenterMixin, BaseEstimator):
    """Adapt a frozen single-organ model to unlabeled target images.

    The teacher itself is never modified; fit produces an adapted copy in
    ``network_`` together with the refined pseudo-labels that supervised
    it. Defaults are sized for the built-in benchmark.
    """

    def __init__(
        self,
        teacher: SegNet | None = None,
        entropy_threshold: float = 0.1,
        aux_decoders: int = 4,
        consistency_weight: float = 0.1,
        infomax_weight: float = 1.0,
        diversity_weight: float = 0.1,
        epochs: int = 8,
        batch_size: int = 4,
        lr: float = 2e-3,
        seed: int = 0,
    ):
        self.teacher = teacher
        self.entropy_threshold = entropy_threshold
        self.aux_decoders = aux_decoders
        self.consistency_weight = consistency_weight
        self.infomax_weight = infomax_weight
        self.diversity_weight = diversity_weight
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed

    def fit(self, X, y=None):
        if self.teacher is None:
            raise ConfigError("SourceFreeAdapter needs a pretrained teacher network")
        X = check_image_stack(X)
        config = AdaptConfig(
            entropy_threshold=self.entropy_threshold,
            aux_decoders=self.aux_decoders,
            consistency_weight=self.consistency_weight,
            infomax_weight=self.infomax_weight,
            diversity_weight=self.diversity_weight,
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            seed=self.seed,
        )
        result = run_model_adaptation(self.teacher, X, config)
        self.network_ = result.net
        self.trace_ = result.trace
        self.refined_labels_ = result.refined
        self.classes_ = np.asarray(self.teacher.class_binding)
        return self


class EnsembleDistiller(_SegmenterMixin, BaseEstimator):
    """Distill adapted single-organ teachers into one multi-organ student.

    ``teachers`` must have pairwise disjoint foreground classes; the fitted
    student covers their union. Defaults are sized for the built-in
    benchmark; the functional layer keeps the full-length schedule.
    """

    def __init__(
        self,
        teachers=None,
        strategy: str = "certainty_norm",
        feature_weight: float = 0.001,
        proj_channels: int = 32,
        epochs: int = 12,
        batch_size: int = 2,
        lr: float = 2e-3,
        seed: int = 0,
    ):
        self.teachers = teachers
        self.strategy = strategy
        self.feature_weight = feature_weight
        self.proj_channels = proj_channels
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed

    def fit(self, X, y=None):
        if not self.teachers:
            raise ConfigError("EnsembleDistiller needs at least one adapted teacher")
        X = check_image_stack(X)
        config = EnsembleConfig(
            strategy=self.strategy,
            feature_weight=self.feature_weight,
            proj_channels=self.proj_channels,
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            seed=self.seed,
        )
        result = run_model_ensemble(TeacherPool(self.teachers), X, config)
        self.network_ = result.student
        self.trace_ = result.trace
        self.selection_ = result.selection
        self.labels_ = result.labels
        self.classes_ = np.asarray(result.student.class_binding)
        return self
