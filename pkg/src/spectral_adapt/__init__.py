"""Eigendecomposition-based graph adaptation for node classification."""

__version__ = "0.1.0"
