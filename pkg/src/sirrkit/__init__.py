"""Reflection separation by convolutional sparse coding with an exclusion prior."""

__version__ = "0.1.0"
