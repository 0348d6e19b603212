"""Federated next-location prediction with geographic alignment, layer-wise
similarity aggregation and entropy-based client sampling."""

__version__ = "0.1.0"
