"""Coordinate-based meta-regression with spline intensity models."""

__version__ = "0.1.0"
