"""Learned per-edge hop-pair selection for GNN link prediction."""

__version__ = "0.1.0"
