"""Hybrid Bayesian networks reasoning over tabular variables and text embeddings."""

__version__ = "0.1.0"
