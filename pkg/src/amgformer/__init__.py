"""Desk-scale multi-modal 3D segmentation with sparse multi-granular
attention, spatially adaptive fusion, and quality-aware modality
compensation, built on a small numpy autodiff core."""

__version__ = "0.1.0"

from .tape import Param, Tape, Tensor

__all__ = ["Param", "Tape", "Tensor", "__version__"]
