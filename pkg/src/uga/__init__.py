"""Uncertainty-guided annotation loop for patch-based segmentation."""

__version__ = "0.1.0"
