"""Probabilistic cross-modal embeddings for ECG-like signals."""

__version__ = "0.1.0"
