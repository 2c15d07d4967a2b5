"""VeinAtnNet finger-vein verification: image enhancement, model, metrics."""

from ._core import (
    Checkpoint,
    ConfigError,
    FormatError,
    IoError,
    LossMode,
    ModelConfig,
    ShapeError,
    augment,
    clahe,
    comparison_score,
    count_params,
    count_scores,
    det_curve,
    eer,
    explain,
    load_image,
    make_toy_dataset,
    parameter_layout,
    resize,
    save_image,
    tar_at_fmr,
    train,
)

__all__ = [
    "Checkpoint",
    "ConfigError",
    "FormatError",
    "IoError",
    "LossMode",
    "ModelConfig",
    "ShapeError",
    "augment",
    "clahe",
    "comparison_score",
    "count_params",
    "count_scores",
    "det_curve",
    "eer",
    "explain",
    "load_image",
    "make_toy_dataset",
    "parameter_layout",
    "resize",
    "save_image",
    "tar_at_fmr",
    "train",
]
