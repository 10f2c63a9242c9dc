"""Recall@K retrieval evaluation."""

from dataclasses import dataclass

import numpy as np

CUB_KS = (1, 2, 4, 8, 16, 32)
INSHOP_KS = (1, 10, 20, 30, 40, 50)


@dataclass(frozen=True)
class RetrievalResult:
    ks: tuple
    recalls: tuple

    def __getitem__(self, k):
        return self.recalls[self.ks.index(k)]

    def as_dict(self):
        return dict(zip(self.ks, self.recalls))


def _squared_distances(Q, G):
    # exact difference form so that ties are real ties
    diff = Q[:, None, :] - G[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def recall_at_k(query_embeddings, query_labels, gallery_embeddings, gallery_labels, ks=CUB_KS,
                self_match_excluded=False):
    """Fraction of queries with a same-label gallery item among the K nearest.

    With ``self_match_excluded`` the query and gallery are the same collection
    and query ``i`` never retrieves gallery item ``i``. Distance ties go to the
    smaller gallery index.
    """
    Q = np.atleast_2d(np.asarray(query_embeddings, dtype=np.float64))
    G = np.atleast_2d(np.asarray(gallery_embeddings, dtype=np.float64))
    qy = np.asarray(query_labels)
    gy = np.asarray(gallery_labels)
    ks = tuple(int(k) for k in ks)
    if not ks or min(ks) < 1:
        raise ValueError("Ks must be positive integers")
    if Q.shape[1] != G.shape[1]:
        raise ValueError("query and gallery embeddings differ in dimension")
    usable = len(G) - (1 if self_match_excluded else 0)
    if max(ks) > usable:
        raise ValueError(f"K={max(ks)} exceeds the {usable} usable gallery items")
    if self_match_excluded and len(Q) != len(G):
        raise ValueError("self-exclusion requires the query set to be the gallery")

    D = _squared_distances(Q, G)
    if self_match_excluded:
        np.fill_diagonal(D, np.inf)
    kmax = max(ks)
    ranked = np.argsort(D, axis=1, kind="stable")[:, :kmax]
    hits = gy[ranked] == qy[:, None]
    first_hit = np.where(hits.any(axis=1), hits.argmax(axis=1), kmax)
    recalls = tuple(float(np.mean(first_hit < k)) for k in ks)
    return RetrievalResult(ks, recalls)
