"""Unfitted finite-element solver for a fluid coupled to an immersed elastic curve."""

__version__ = "0.1.0"
