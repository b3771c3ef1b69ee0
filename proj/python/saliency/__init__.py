"""Gradient attributions, full-gradient decompositions and perturbation metrics for small ReLU nets."""

from ._core import (
    Checkpoint,
    ConfigError,
    DecompositionReport,
    Explanation,
    InsufficientDataError,
    is_bias_free,
    load_checkpoint,
    mlp,
    patch_dataset,
    perturb_until_flip,
    run_cli,
    vgg_mini,
    wilcoxon,
    zero_bias,
)

__all__ = [
    "Checkpoint",
    "ConfigError",
    "DecompositionReport",
    "Explanation",
    "InsufficientDataError",
    "is_bias_free",
    "load_checkpoint",
    "mlp",
    "patch_dataset",
    "perturb_until_flip",
    "run_cli",
    "vgg_mini",
    "wilcoxon",
    "zero_bias",
]
