"""Class-level distance statistics over a labelled set of unit embeddings."""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ClassStats:
    num_classes: int
    class_counts: np.ndarray
    interclass: np.ndarray
    intra: np.ndarray
    d0: float


def _check_labels(embeddings, labels):
    E = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    y = np.asarray(labels)
    if y.ndim != 1 or len(y) != len(E):
        raise ValueError("labels must be a 1-D sequence aligned with embeddings")
    if len(y) == 0:
        raise ValueError("no samples: the class id range is empty")
    if not np.issubdtype(y.dtype, np.integer) or y.min() < 0:
        raise ValueError("labels must be non-negative integers")
    C = int(y.max()) + 1
    counts = np.bincount(y, minlength=C)
    if np.any(counts == 0):
        missing = np.flatnonzero(counts == 0).tolist()
        raise ValueError(f"labels must cover 0..{C - 1}; classes {missing} have no samples")
    return E, y.astype(np.int64), C, counts


def _class_means(E, y, C, counts):
    sums = np.zeros((C, E.shape[1]))
    np.add.at(sums, y, E)
    return sums / counts[:, None]


def interclass_distance_matrix(embeddings, labels):
    """Mean squared distance between every cross-class pair of samples.

    The double sum collapses to ``m_p + m_q - 2 mu_p . mu_q`` with class means
    ``mu`` and mean squared norms ``m`` (so ``2 - 2 mu_p . mu_q`` on the unit
    sphere). The diagonal is set to zero.
    """
    E, y, C, counts = _check_labels(embeddings, labels)
    mu = _class_means(E, y, C, counts)
    m = np.zeros(C)
    np.add.at(m, y, np.einsum("ij,ij->i", E, E))
    m /= counts
    D = m[:, None] + m[None, :] - 2.0 * (mu @ mu.T)
    D = np.clip(0.5 * (D + D.T), 0.0, 4.0)
    np.fill_diagonal(D, 0.0)
    return D


def intraclass_averages(embeddings, labels):
    """Mean squared distance between distinct same-class pairs; 0 for singletons.

    Sum over ordered pairs i != j of |r_i - r_j|^2 is ``2 n^2 (1 - |mu|^2)``
    for n unit vectors with mean mu, which is divided by ``n^2 - n``.
    """
    E, y, C, counts = _check_labels(embeddings, labels)
    mu = _class_means(E, y, C, counts)
    n = counts.astype(np.float64)
    sq_norms = np.zeros(C)
    np.add.at(sq_norms, y, np.einsum("ij,ij->i", E, E))
    # sum_ij |r_i - r_j|^2 = 2 n sum_i |r_i|^2 - 2 |sum_i r_i|^2
    total = 2.0 * n * sq_norms - 2.0 * n**2 * np.einsum("ij,ij->i", mu, mu)
    s = np.zeros(C)
    multi = counts >= 2
    s[multi] = total[multi] / (n[multi] ** 2 - n[multi])
    return np.clip(s, 0.0, 4.0)


def global_inner_distance(intra, class_counts):
    intra = np.asarray(intra, dtype=np.float64)
    counts = np.asarray(class_counts)
    multi = counts >= 2
    if not np.any(multi):
        raise ValueError("every class is a singleton; the level-0 threshold is undefined")
    return float(intra[multi].mean())


def compute_class_stats(embeddings, labels):
    E, y, C, counts = _check_labels(embeddings, labels)
    intra = intraclass_averages(E, y)
    return ClassStats(
        num_classes=C,
        class_counts=counts,
        interclass=interclass_distance_matrix(E, y),
        intra=intra,
        d0=global_inner_distance(intra, counts),
    )
