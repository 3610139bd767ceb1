"""Frequency-aware dynamic super-resolution on a small numpy tensor engine."""

__version__ = "0.1.0"
