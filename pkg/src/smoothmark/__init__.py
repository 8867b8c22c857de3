"""Certified-robust text watermarking by randomized smoothing."""

__version__ = "0.1.0"
