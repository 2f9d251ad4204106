"""Bi-level meta-learning for no-reference image quality regression."""

__version__ = "0.1.0"
