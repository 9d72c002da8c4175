"""Frequency-aware steady-state grid diagnosis toolkit."""

__version__ = "0.1.0"
