"""Gaussian-process morphable models with geodesic kernels and weighted non-rigid ICP."""

__version__ = "0.1.0"
