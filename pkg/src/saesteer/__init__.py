"""Sparse autoencoder steering and interpretability toolkit."""

__version__ = "0.1.0"
