"""Triplet, hierarchical-triplet and dynamic-margin contrastive losses.

Each loss returns the scalar value together with its gradient with respect to
the batch embeddings, ready to be handed to ``model.backward``. Dynamic
margins are constants within a step: no gradient flows into the tree or the
class statistics.
"""

from dataclasses import dataclass

import numpy as np

from htl.embedding import pairwise_squared_distances
from htl.hierarchy import DEFAULT_BETA, margin_matrix

DEFAULT_MARGIN = 0.2


@dataclass
class LossOutput:
    loss: float
    # the gradient array, or a zero-argument callable that builds it on first access
    grad: object
    active_count: int
    num_terms: int

    @property
    def grad_embeddings(self):
        if callable(self.grad):
            self.grad = self.grad()
        return self.grad

    @property
    def active_fraction(self):
        return self.active_count / self.num_terms if self.num_terms else 0.0


def _as_triplets(triplets):
    T = np.asarray(triplets, dtype=np.int64)
    return T.reshape(-1, 3)


def _hinge_triplets(E, T, margin):
    """sum_z 0.5 [D(a,p) - D(a,n) + margin]_+ and a builder for its gradient.

    ``margin`` is a scalar or an (N, N) matrix indexed by (anchor row,
    negative row). The gradient is linear in the embeddings, so active
    triplets are folded into an (N, N) coefficient matrix ``W`` and the
    result is ``W @ E``: an active triplet adds ``e_n - e_p`` to row a,
    ``e_p - e_a`` to row p and ``e_a - e_n`` to row n. The gradient is only
    built when requested, which keeps loss-only evaluations cheap.
    """
    N = len(E)
    D = pairwise_squared_distances(E).ravel()
    ap = T[:, 0] * N + T[:, 1]
    an = T[:, 0] * N + T[:, 2]
    margins = margin.ravel()[an] if np.ndim(margin) else margin
    h = D[ap] - D[an] + margins
    active = h > 0

    def gradient(scale):
        # A[a, p] and B[a, n] count the active triplets using each ordered pair
        A = np.bincount(ap[active], minlength=N * N).reshape(N, N).astype(np.float64)
        B = np.bincount(an[active], minlength=N * N).reshape(N, N).astype(np.float64)
        W = B + B.T - A - A.T
        W[np.diag_indices(N)] += A.sum(axis=0) - B.sum(axis=0)
        return (W @ E) * scale

    return 0.5 * float(h[active].sum()), gradient, int(active.sum())


def triplet_loss(embeddings, triplets, alpha=DEFAULT_MARGIN):
    """Mean over triplets of ``0.5 [D(a,p) - D(a,n) + alpha]_+``."""
    E = np.asarray(embeddings, dtype=np.float64)
    T = _as_triplets(triplets)
    Z = len(T)
    if Z == 0:
        return LossOutput(0.0, np.zeros_like(E), 0, 0)
    total, gradient, active = _hinge_triplets(E, T, float(alpha))
    return LossOutput(total / Z, lambda: gradient(1.0 / Z), active, Z)


def _row_margins(labels, tree, stats, beta):
    """Dynamic margin for every (anchor row, negative row) pair of the batch."""
    labels = np.asarray(labels, dtype=np.int64)
    C = tree.num_classes
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ValueError(f"batch labels reference classes outside the tree (0..{C - 1}); tree is stale")
    return margin_matrix(tree, stats, beta, classes=labels)


def hierarchical_triplet_loss(embeddings, triplets, labels, tree, stats, beta=DEFAULT_BETA):
    """``1/(2 Z) sum_z [D(a,p) - D(a,n) + alpha_z]_+`` with tree-derived margins.

    ``labels`` gives the class of each embedding row.
    """
    E = np.asarray(embeddings, dtype=np.float64)
    T = _as_triplets(triplets)
    Z = len(T)
    if Z == 0:
        return LossOutput(0.0, np.zeros_like(E), 0, 0)
    margins = _row_margins(labels, tree, stats, beta)
    total, gradient, active = _hinge_triplets(E, T, margins)
    # _hinge_triplets already carries the factor 1/2
    return LossOutput(total / Z, lambda: gradient(1.0 / Z), active, Z)


def _contrastive(E, P, labels, margin):
    """Pair loss; ``margin`` is a scalar or an (N, N) row-pair matrix like in ``_hinge_triplets``."""
    labels = np.asarray(labels, dtype=np.int64)
    if len(P) == 0:
        return LossOutput(0.0, np.zeros_like(E), 0, 0)
    N = len(E)
    ij = P[:, 0] * N + P[:, 1]
    D = pairwise_squared_distances(E).ravel()[ij]
    same = labels[P[:, 0]] == labels[P[:, 1]]
    alpha = margin.ravel()[ij] if np.ndim(margin) else margin
    hinge = np.where(same, 0.0, alpha - D)
    neg_active = ~same & (hinge > 0)

    total = 0.5 * D[same].sum() + 0.5 * hinge[neg_active].sum()
    # coefficient on (e_i - e_j): +1 pulls the pair together, -1 pushes it apart
    coef = np.where(same, 1.0, np.where(neg_active, -1.0, 0.0))
    n_pairs = len(P)

    def gradient():
        # row i gains coef (e_i - e_j) and row j loses it, folded into W @ E
        K = np.bincount(ij, weights=coef, minlength=N * N).reshape(N, N)
        W = -K - K.T
        W[np.diag_indices(N)] += K.sum(axis=0) + K.sum(axis=1)
        return (W @ E) / n_pairs

    active = int(np.count_nonzero(same & (D > 0)) + np.count_nonzero(neg_active))
    return LossOutput(float(total) / n_pairs, gradient, active, n_pairs)


def contrastive_loss(embeddings, pairs, labels, alpha=DEFAULT_MARGIN):
    """Contrastive loss with one constant margin on squared distances."""
    E = np.asarray(embeddings, dtype=np.float64)
    P = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    return _contrastive(E, P, labels, float(alpha))


def contrastive_loss_dynamic(embeddings, pairs, labels, tree, stats, beta=DEFAULT_BETA):
    """Contrastive loss whose negative-pair margin is the dynamic tree margin.

    Same-class pairs contribute ``0.5 D(i,j)``; cross-class pairs contribute
    ``0.5 [alpha(y_i, y_j) - D(i,j)]_+``, with ``i`` playing the anchor.
    Averaged over pairs.
    """
    E = np.asarray(embeddings, dtype=np.float64)
    P = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    return _contrastive(E, P, labels, _row_margins(labels, tree, stats, beta))
