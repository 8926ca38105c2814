"""Analytic policy gradient training for trajectory tracking on differentiable dynamics."""

__version__ = "0.1.0"
