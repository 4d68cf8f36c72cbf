"""Differentiable search of down/up-sampling cells for U-shaped segmentation nets."""

__version__ = "0.1.0"
