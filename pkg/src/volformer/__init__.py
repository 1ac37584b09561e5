"""Volumetric transformer segmentation kit with a minimal autodiff core."""

from .tensor import Tape, Tensor, backward, mac_report

__all__ = ["Tensor", "Tape", "backward", "mac_report"]
__version__ = "0.1.0"
