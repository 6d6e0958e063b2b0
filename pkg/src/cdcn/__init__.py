"""Blind super-resolution by structure/detail component learning."""
from .degradation import (
    AnisoKernelSpec,
    ComponentTriple,
    DegradationConfig,
    IsoKernelSpec,
    blur,
    decompose_labels,
    degrade,
    gaussian8_widths,
    make_anisotropic_gaussian,
    make_bicubic_kernel,
    make_isotropic_gaussian,
    sfold_downsample,
    training_width_range,
)
from .model import CDCN, ModelConfig, param_count

__version__ = "0.1.0"

__all__ = [
    "AnisoKernelSpec", "ComponentTriple", "DegradationConfig", "IsoKernelSpec", "blur",
    "decompose_labels", "degrade", "gaussian8_widths", "make_anisotropic_gaussian",
    "make_bicubic_kernel", "make_isotropic_gaussian", "sfold_downsample", "training_width_range",
    "CDCN", "ModelConfig", "param_count",
]
