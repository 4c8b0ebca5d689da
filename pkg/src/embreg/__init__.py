"""Hybrid global-local forecasting with regularized per-series embeddings."""

__version__ = "0.1.0"
