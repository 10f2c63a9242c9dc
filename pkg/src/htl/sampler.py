"""Mini-batch construction and triplet generation.

A batch holds ``l_prime * m`` distinct classes with ``t`` samples each, laid
out class-major: batch row ``k * t + j`` is the j-th sample of the k-th class.
Triplets are ``(Z, 3)`` integer arrays of batch rows ``(anchor, positive,
negative)``.
"""

from dataclasses import dataclass

import numpy as np

from htl.embedding import pairwise_squared_distances

STRATEGIES = ("all", "hard", "semi-hard")


@dataclass(frozen=True)
class BatchSpec:
    l_prime: int = 2
    m: int = 4
    t: int = 5

    def __post_init__(self):
        if self.l_prime < 1 or self.m < 2 or self.t < 2:
            raise ValueError("BatchSpec requires l_prime >= 1, m >= 2, t >= 2")

    @property
    def num_classes(self):
        return self.l_prime * self.m

    @property
    def size(self):
        return self.l_prime * self.m * self.t


@dataclass(frozen=True)
class MiniBatch:
    groups: tuple
    # (num_classes, t) dataset indices, rows ordered like ``classes``
    sample_indices: np.ndarray

    @property
    def classes(self):
        return np.array([c for g in self.groups for c in g], dtype=np.int64)

    @property
    def t(self):
        return self.sample_indices.shape[1]

    @property
    def indices(self):
        return self.sample_indices.reshape(-1)

    @property
    def labels(self):
        return np.repeat(self.classes, self.t)


def _class_index(labels):
    labels = np.asarray(labels)
    order = np.argsort(labels, kind="stable")
    bounds = np.searchsorted(labels[order], np.arange(labels.max() + 2))
    return [order[bounds[c]:bounds[c + 1]] for c in range(labels.max() + 1)]


def _draw_samples(labels, classes, t, rng):
    by_class = _class_index(labels)
    rows = []
    for c in classes:
        pool = by_class[c]
        if len(pool) == 0:
            raise ValueError(f"class {c} has no samples")
        rows.append(rng.choice(pool, size=t, replace=len(pool) < t))
    return np.array(rows, dtype=np.int64)


def _check_class_count(num_classes, spec):
    if num_classes < spec.num_classes:
        raise ValueError(
            f"batch needs {spec.num_classes} classes (l'={spec.l_prime}, m={spec.m}) "
            f"but the dataset has only {num_classes}"
        )


def anchor_neighbor_batch(labels, interclass, spec, rng=None):
    """Random anchor classes, each followed by its ``m - 1`` nearest classes.

    Neighbours are ranked by interclass distance with ties going to the
    smaller class id; classes already in the batch are skipped.
    """
    rng = np.random.default_rng(rng)
    D = np.asarray(interclass, dtype=np.float64)
    C = D.shape[0]
    _check_class_count(C, spec)
    anchors = rng.choice(C, size=spec.l_prime, replace=False)
    taken = np.zeros(C, dtype=bool)
    taken[anchors] = True
    groups = []
    for a in anchors:
        # lexsort: last key is primary -> distance, then class id
        ranked = np.lexsort((np.arange(C), D[a]))
        neighbours = [int(c) for c in ranked if not taken[c]][: spec.m - 1]
        taken[neighbours] = True
        groups.append((int(a), *neighbours))
    classes = [c for g in groups for c in g]
    return MiniBatch(tuple(groups), _draw_samples(labels, classes, spec.t, rng))


def random_class_batch(labels, spec, rng=None):
    rng = np.random.default_rng(rng)
    C = int(np.max(labels)) + 1
    _check_class_count(C, spec)
    classes = [int(c) for c in rng.choice(C, size=spec.num_classes, replace=False)]
    groups = tuple(tuple(classes[i * spec.m:(i + 1) * spec.m]) for i in range(spec.l_prime))
    return MiniBatch(groups, _draw_samples(labels, classes, spec.t, rng))


def enumerate_triplets(batch):
    """Every (positive class, negative class, anchor, positive, negative) choice.

    Count is ``K (K - 1) t (t - 1) t`` for ``K`` classes of ``t`` samples.
    """
    K = len(batch.classes)
    t = batch.t
    cls_p, cls_n = np.nonzero(~np.eye(K, dtype=bool))
    a_off, p_off = np.nonzero(~np.eye(t, dtype=bool))
    n_off = np.arange(t)
    # broadcast to (class pairs, sample pairs, negatives)
    a = cls_p[:, None, None] * t + a_off[None, :, None]
    p = cls_p[:, None, None] * t + p_off[None, :, None]
    n = cls_n[:, None, None] * t + n_off[None, None, :]
    shape = (len(cls_p), len(a_off), t)
    return np.stack(
        [np.broadcast_to(a, shape).ravel(), np.broadcast_to(p, shape).ravel(), np.broadcast_to(n, shape).ravel()],
        axis=1,
    ).astype(np.int64)


def _positive_pairs(labels):
    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    return np.argwhere(same)


def mine_triplets(batch, embeddings, strategy="all", margin=0.2):
    """Select triplets from a batch given its (batch-ordered) embeddings.

    ``hard`` keeps, per (anchor, positive), the closest negative.
    ``semi-hard`` keeps every negative with ``D(a,p) < D(a,n) < D(a,p) + margin``
    and falls back to the closest negative when that band is empty.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown mining strategy {strategy!r}; choose from {STRATEGIES}")
    if strategy == "all":
        return enumerate_triplets(batch)

    labels = batch.labels
    D = pairwise_squared_distances(embeddings)
    pairs = _positive_pairs(labels)
    neg_mask = labels[pairs[:, 0]][:, None] != labels[None, :]
    d_an = np.where(neg_mask, D[pairs[:, 0]], np.inf)
    hardest = np.argmin(d_an, axis=1)
    if strategy == "hard":
        return np.column_stack([pairs, hardest]).astype(np.int64)

    d_ap = D[pairs[:, 0], pairs[:, 1]][:, None]
    band = neg_mask & (d_an > d_ap) & (d_an < d_ap + margin)
    rows, negs = np.nonzero(band)
    empty = np.flatnonzero(~band.any(axis=1))
    rows = np.concatenate([rows, empty])
    negs = np.concatenate([negs, hardest[empty]])
    order = np.lexsort((negs, rows))
    rows, negs = rows[order], negs[order]
    return np.column_stack([pairs[rows], negs]).astype(np.int64)


def enumerate_pairs(batch):
    """All unordered row pairs ``i < j`` of a batch, as an ``(P, 2)`` array."""
    i, j = np.triu_indices(len(batch.indices), k=1)
    return np.column_stack([i, j]).astype(np.int64)
