"""Transformer with a Bayesian output head adapted online by Kalman smoothing."""

__version__ = "0.1.0"
