"""Robust ground surface estimation with uniform B-splines."""

__version__ = "0.1.0"
