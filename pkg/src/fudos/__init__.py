"""Functional domain selection for scalar-on-function regression."""

__version__ = "0.1.0"
