"""Optimal-transport EM for imbalanced generalized category discovery."""

__version__ = "0.1.0"
