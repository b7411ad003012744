"""Guaranteed two-sided bounds for eigenvalues of symmetric elliptic operators."""

__version__ = "0.1.0"
