"""Class-level hierarchical tree and the dynamic violate margin.

Level ``l`` (0..L) partitions the classes into the connected components of
the graph with an edge between p and q whenever ``d(p, q) < d_l``. Thresholds
grow with ``l`` so the partitions nest, and ``d_L = 4`` is the largest
squared distance on the unit sphere.
"""

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.sparse.csgraph import connected_components

DEFAULT_DEPTH = 16
DEFAULT_BETA = 0.1
MAX_SQUARED_DISTANCE = 4.0


@dataclass(frozen=True)
class HierarchicalTree:
    depth: int
    thresholds: np.ndarray
    # membership[l, c] is the node id of class c at level l (smallest member id)
    membership: np.ndarray

    @property
    def num_classes(self):
        return self.membership.shape[1]

    @property
    def node_counts(self):
        return np.array([len(np.unique(row)) for row in self.membership])

    @cached_property
    def merge_levels(self):
        """(C, C) merge levels, ``depth + 1`` for never merged, -1 on the diagonal. Read-only."""
        M = self.membership
        same = M[:, :, None] == M[:, None, :]
        levels = np.where(same.any(axis=0), same.argmax(axis=0), self.depth + 1)
        np.fill_diagonal(levels, -1)
        levels.flags.writeable = False
        return levels

    def nodes(self, level):
        """Mapping node id -> sorted member classes at ``level``."""
        out = {}
        for c, node in enumerate(self.membership[level]):
            out.setdefault(int(node), []).append(c)
        return out

    def __eq__(self, other):
        if not isinstance(other, HierarchicalTree):
            return NotImplemented
        return (
            self.depth == other.depth
            and np.array_equal(self.thresholds, other.thresholds)
            and np.array_equal(self.membership, other.membership)
        )

    __hash__ = None


def level_thresholds(d0, L):
    d0 = float(d0)
    if L < 1:
        raise ValueError("tree depth L must be at least 1")
    if not 0.0 <= d0 < MAX_SQUARED_DISTANCE:
        raise ValueError(f"d0 must lie in [0, 4), got {d0}")
    t = np.array([l * (MAX_SQUARED_DISTANCE - d0) / L + d0 for l in range(L + 1)])
    t[-1] = MAX_SQUARED_DISTANCE
    return t


def _canonical_components(adjacency):
    _, comp = connected_components(adjacency, directed=False)
    # relabel each component by its smallest member class id
    smallest = np.full(comp.max() + 1, len(comp))
    np.minimum.at(smallest, comp, np.arange(len(comp)))
    return smallest[comp]


def build_tree(interclass, d0, L=DEFAULT_DEPTH):
    D = np.asarray(interclass, dtype=np.float64)
    if D.ndim != 2 or D.shape[0] != D.shape[1]:
        raise ValueError("interclass distance matrix must be square")
    if not np.array_equal(D, D.T):
        raise ValueError("interclass distance matrix must be symmetric")
    thresholds = level_thresholds(d0, L)
    C = D.shape[0]
    off_diagonal = ~np.eye(C, dtype=bool)
    membership = np.empty((L + 1, C), dtype=np.int64)
    for l, d_l in enumerate(thresholds):
        membership[l] = _canonical_components((D < d_l) & off_diagonal)
    return HierarchicalTree(depth=int(L), thresholds=thresholds, membership=membership)


def merge_level(tree, p, q):
    """Smallest level at which ``p`` and ``q`` share a node; ``L + 1`` if never."""
    p, q = int(p), int(q)
    C = tree.num_classes
    if not (0 <= p < C and 0 <= q < C):
        raise ValueError(f"class ids {p}, {q} outside the tree's 0..{C - 1}")
    if p == q:
        raise ValueError("merge level is undefined for a class with itself")
    shared = np.flatnonzero(tree.membership[:, p] == tree.membership[:, q])
    return int(shared[0]) if len(shared) else tree.depth + 1


def merge_level_matrix(tree):
    """All pairwise merge levels at once; the diagonal is -1."""
    return tree.merge_levels.copy()


def merge_threshold(tree, level):
    return MAX_SQUARED_DISTANCE if level > tree.depth else float(tree.thresholds[level])


def dynamic_margin(tree, stats, y_a, y_n, beta=DEFAULT_BETA):
    """``beta + d_merge(y_a, y_n) - s_{y_a}``; never clamped."""
    level = merge_level(tree, y_a, y_n)
    return beta + merge_threshold(tree, level) - float(stats.intra[int(y_a)])


def margin_matrix(tree, stats, beta=DEFAULT_BETA, classes=None):
    """``alpha[a, n]`` for every ordered class pair; same-class entries are NaN.

    With ``classes`` (a label per batch row) the result is indexed by row
    instead, i.e. ``alpha[i, j]`` is the margin for anchor class
    ``classes[i]`` against negative class ``classes[j]``.
    """
    if stats.num_classes != tree.num_classes:
        raise ValueError("class statistics and tree disagree on the number of classes")
    idx = np.arange(tree.num_classes) if classes is None else np.asarray(classes, dtype=np.int64)
    levels = tree.merge_levels[np.ix_(idx, idx)]
    # level depth + 1 (never merged) maps to the last entry, 4
    padded = np.append(tree.thresholds, MAX_SQUARED_DISTANCE)
    alpha = beta + padded[levels] - np.asarray(stats.intra)[idx][:, None]
    alpha[levels < 0] = np.nan
    return alpha


def format_tree(tree):
    """Plain-text dump of a tree; ``parse_tree`` reads it back exactly."""
    lines = [
        "# htl-tree v1",
        f"depth {tree.depth}",
        f"classes {tree.num_classes}",
        "thresholds " + " ".join(repr(float(t)) for t in tree.thresholds),
        "node_counts " + " ".join(str(n) for n in tree.node_counts),
    ]
    for l in range(tree.depth + 1):
        lines.append(f"level {l} " + " ".join(str(int(n)) for n in tree.membership[l]))
    return "\n".join(lines) + "\n"


def parse_tree(text):
    fields = {}
    levels = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, rest = line.partition(" ")
        if key == "level":
            idx, _, members = rest.partition(" ")
            levels[int(idx)] = [int(x) for x in members.split()]
        else:
            fields[key] = rest.split()
    try:
        depth = int(fields["depth"][0])
        num_classes = int(fields["classes"][0])
        thresholds = np.array([float(x) for x in fields["thresholds"]])
        membership = np.array([levels[l] for l in range(depth + 1)], dtype=np.int64)
    except (KeyError, IndexError, ValueError) as exc:
        raise ValueError(f"malformed tree dump: {exc}") from None
    if membership.shape != (depth + 1, num_classes) or len(thresholds) != depth + 1:
        raise ValueError("tree dump sections disagree on depth or class count")
    return HierarchicalTree(depth=depth, thresholds=thresholds, membership=membership)
