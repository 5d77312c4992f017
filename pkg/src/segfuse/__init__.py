"""segfuse: adapt frozen single-class segmentation networks to an unlabeled
domain, then distill them into one multi-class model.

The package is organized around three workflow stages, each available both
as a plain function and as an sklearn-style estimator:

* supervised pretraining of single-class teachers (``training``,
  ``SupervisedSegmenter``),
* source-free adaptation of a frozen teacher to unlabeled images via
  entropy-gated pseudo-label refinement (``adaptation``,
  ``SourceFreeAdapter``),
* certainty-weighted distillation of several adapted teachers into one
  multi-class student (``ensemble``, ``EnsembleDistiller``).

``synthbench`` provides the built-in deterministic multi-domain benchmark;
``cli`` exposes the command-line pipeline.
"""

from .adaptation import (
    ORGAN_ENTROPY_THRESHOLDS,
    AdaptConfig,
    compute_prototypes,
    refine_pseudo_labels,
    run_model_adaptation,
)
from .autodiff import (
    AdamState,
    Parameter,
    Tensor,
    adam_step,
    bilinear_upsample,
    conv2d,
    cross_entropy,
    finite_diff_check,
    no_grad,
    shannon_entropy,
    softmax,
)
from .checkpoint import config_fingerprint, load_checkpoint, save_checkpoint
from .ensemble import (
    EnsembleConfig,
    TeacherPool,
    build_selection_map,
    certainty_map,
    run_model_ensemble,
)
from .estimators import EnsembleDistiller, SourceFreeAdapter, SupervisedSegmenter
from .exceptions import ConfigError, DataError, NumericalError
from .metrics import (
    MetricReport,
    average_surface_distance,
    dice_score,
    evaluate_segmentation,
)
from .network import SegNet, SegNetConfig, init_network
from .synthbench import (
    ORGAN_CLASS_IDS,
    default_domain_specs,
    generate_dataset,
    load_dataset,
    save_dataset,
)
from .training import train_supervised

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "AdaptConfig",
    "ConfigError",
    "DataError",
    "EnsembleConfig",
    "EnsembleDistiller",
    "MetricReport",
    "NumericalError",
    "ORGAN_CLASS_IDS",
    "ORGAN_ENTROPY_THRESHOLDS",
    "Parameter",
    "SegNet",
    "SegNetConfig",
    "SourceFreeAdapter",
    "SupervisedSegmenter",
    "TeacherPool",
    "Tensor",
    "adam_step",
    "average_surface_distance",
    "bilinear_upsample",
    "build_selection_map",
    "certainty_map",
    "compute_prototypes",
    "config_fingerprint",
    "conv2d",
    "cross_entropy",
    "default_domain_specs",
    "dice_score",
    "evaluate_segmentation",
    "finite_diff_check",
    "generate_dataset",
    "init_network",
    "load_checkpoint",
    "load_dataset",
    "no_grad",
    "refine_pseudo_labels",
    "run_model_adaptation",
    "run_model_ensemble",
    "save_checkpoint",
    "save_dataset",
    "shannon_entropy",
    "softmax",
    "train_supervised",
    "__version__",
]
