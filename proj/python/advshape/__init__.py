"""Guided-diffusion adversarial point clouds: metrics, defenses, models and attacks."""

from ._advshape import (
    Classifier,
    Denoiser,
    __version__,
    attack,
    chamfer,
    farthest_point_sample,
    hausdorff,
    linf_clip,
    mse,
    normalize,
    partial_shape,
    run_experiment,
    reproduce_experiment,
    sample_shape,
    sor_defense,
    srs_defense,
    synthetic_classes,
)

__all__ = [
    "Classifier",
    "Denoiser",
    "__version__",
    "attack",
    "chamfer",
    "farthest_point_sample",
    "hausdorff",
    "linf_clip",
    "mse",
    "normalize",
    "partial_shape",
    "run_experiment",
    "reproduce_experiment",
    "sample_shape",
    "sor_defense",
    "srs_defense",
    "synthetic_classes",
]
