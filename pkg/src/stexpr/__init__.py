"""Spot-level gene expression prediction on a heterogeneous slide graph."""

__version__ = "0.1.0"
