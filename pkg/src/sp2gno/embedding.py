"""Lipschitz positional embeddings: hop distances to a random anchor set."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .graph import Graph


@dataclass(frozen=True)
class LipschitzEmbedding:
    anchors: np.ndarray      # (n,) node indices
    distances: np.ndarray    # (N, n) hop counts, N where unreachable

    @property
    def dim(self) -> int:
        return len(self.anchors)

    @property
    def n_nodes(self) -> int:
        return self.distances.shape[0]

    def normalized(self) -> np.ndarray:
        """Distances divided by the largest finite hop count (gate input scale)."""
        finite = self.distances[self.distances < self.n_nodes]
        diameter = finite.max() if finite.size else 0
        return self.distances / max(float(diameter), 1.0)

    def permuted(self, perm) -> "LipschitzEmbedding":
        perm = np.asarray(perm)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(perm))
        return LipschitzEmbedding(inv[self.anchors], self.distances[perm])


def anchor_count(n_nodes: int) -> int:
    """``ceil(ln(N)^2)`` clamped to ``[1, N]``."""
    if n_nodes < 2:
        raise ValueError("need at least two nodes")
    return max(1, min(math.ceil(math.log(n_nodes) ** 2), n_nodes))


def select_anchors(g: Graph, n: int, seed: int) -> np.ndarray:
    """``n`` distinct nodes drawn uniformly without replacement."""
    if not 1 <= n <= g.n_nodes:
        raise ValueError(f"cannot pick {n} anchors from {g.n_nodes} nodes")
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(g.n_nodes, size=n, replace=False)).astype(np.int64)


def bfs_hops(g: Graph, source: int) -> np.ndarray:
    """Unweighted hop distance from ``source``; unreachable nodes get ``N``."""
    n = g.n_nodes
    indptr, indices = g.adjacency.indptr, g.adjacency.indices
    dist = np.full(n, n, dtype=np.int64)
    dist[source] = 0
    frontier = np.array([source], dtype=np.int64)
    level = 0
    while frontier.size:
        level += 1
        starts, ends = indptr[frontier], indptr[frontier + 1]
        lengths = ends - starts
        if lengths.sum() == 0:
            break
        offsets = np.repeat(starts - np.cumsum(np.r_[0, lengths[:-1]]), lengths)
        nbrs = indices[offsets + np.arange(lengths.sum())]
        nbrs = np.unique(nbrs[dist[nbrs] == n])
        dist[nbrs] = level
        frontier = nbrs
    return dist


def lipschitz_embed(g: Graph, anchors) -> LipschitzEmbedding:
    anchors = np.asarray(anchors, dtype=np.int64).ravel()
    if anchors.size == 0:
        raise ValueError("anchor set is empty")
    if anchors.min() < 0 or anchors.max() >= g.n_nodes:
        raise ValueError("anchor index out of range")
    cols = [bfs_hops(g, int(a)) for a in anchors]
    return LipschitzEmbedding(anchors, np.stack(cols, axis=1))
