"""Hierarchical triplet loss for deep metric learning on unit-sphere embeddings."""

from htl.embedding import (
    DegenerateActivationError,
    l2_normalize,
    pairwise_squared_distances,
    squared_distance,
)

__version__ = "0.1.0"

__all__ = [
    "DegenerateActivationError",
    "l2_normalize",
    "pairwise_squared_distances",
    "squared_distance",
]
