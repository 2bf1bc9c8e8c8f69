"""Certified robustness for hierarchical randomized smoothing."""

__version__ = "0.1.0"
