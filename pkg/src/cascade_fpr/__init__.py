"""Cascaded single-sided CNN classifiers for false-positive reduction on imbalanced candidates."""

__version__ = "0.1.0"
