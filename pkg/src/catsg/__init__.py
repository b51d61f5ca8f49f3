"""Causal time series generation with a latent environment bank."""

__version__ = "0.1.0"
