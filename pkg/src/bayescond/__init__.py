"""Bayesian conditioning of diffusion models for linear inverse problems."""

__version__ = "0.1.0"
