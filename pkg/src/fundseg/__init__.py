"""Optic disc / cup segmentation toolkit with a from-scratch autodiff mask head."""

__version__ = "0.1.0"
