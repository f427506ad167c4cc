"""Prediction-correction particle transformer for Lagrangian dynamics."""

__version__ = "0.1.0"
