"""Unit-sphere embedding primitives.

Every distance in the library is a *squared* Euclidean distance, so for unit
vectors it lies in [0, 4] and equals ``2 - 2 u.v``.
"""

import numpy as np

EPSILON_NORM = 1e-12


class DegenerateActivationError(ValueError):
    """Raised when a vector with (numerically) zero norm must be normalized."""


def l2_normalize(v):
    """Scale ``v`` to unit length.

    Accepts a single vector or a 2-D array of row vectors.
    """
    v = np.asarray(v, dtype=np.float64)
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norms < EPSILON_NORM):
        raise DegenerateActivationError("cannot normalize a zero-norm vector")
    return v / norms


def squared_distance(u, v):
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch: {u.shape} vs {v.shape}")
    diff = u - v
    return float(np.einsum("k,k->", diff, diff))


def pairwise_squared_distances(X):
    """Symmetric matrix of squared distances between the rows of ``X``.

    The diagonal is exactly zero. Uses the difference form rather than the
    Gram identity so that entries agree bit-for-bit with ``squared_distance``.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.size == 0:
        return np.zeros((0, 0))
    if X.ndim != 2:
        raise ValueError("expected a 2-D array of embeddings")
    diff = X[:, None, :] - X[None, :, :]
    D = np.einsum("ijk,ijk->ij", diff, diff)
    D = 0.5 * (D + D.T)
    np.fill_diagonal(D, 0.0)
    return D
