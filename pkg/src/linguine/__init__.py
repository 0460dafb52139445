"""Longitudinal guidance propagation for volumetric tumour segmentation."""

__version__ = "0.1.0"
