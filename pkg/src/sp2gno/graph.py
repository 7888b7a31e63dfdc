"""Domain graphs from point clouds: kNN adjacency and normalized Laplacian."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sparse import SparseMatrix


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class Graph:
    """Symmetric binary kNN graph over a point cloud.

    ``edge_distances[e]`` is the Euclidean length of stored entry ``e`` of
    ``adjacency`` (CSR storage order).
    """

    coordinates: np.ndarray
    adjacency: SparseMatrix
    edge_distances: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.adjacency.shape[0]

    @property
    def degrees(self) -> np.ndarray:
        return self.adjacency.row_sums()

    @property
    def rows(self) -> np.ndarray:
        return self.adjacency.row_indices()

    @property
    def cols(self) -> np.ndarray:
        return self.adjacency.indices

    def fingerprint(self) -> str:
        return self.adjacency.fingerprint()

    def permuted(self, perm) -> "Graph":
        """Relabel nodes so that new node ``i`` is old node ``perm[i]``."""
        perm = np.asarray(perm, dtype=np.int64)
        adj, order = self.adjacency.permuted(perm)
        return Graph(self.coordinates[perm], adj, self.edge_distances[order])


def _validate_cloud(coords) -> np.ndarray:
    x = np.asarray(coords, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[1] not in (1, 2, 3):
        raise GraphError(f"coordinates must be N x dim with dim in 1..3, got {x.shape}")
    if x.shape[0] < 2:
        raise GraphError("a point cloud needs at least two points")
    if not np.all(np.isfinite(x)):
        raise GraphError("coordinates must be finite")
    if np.all(x == x[0]):
        raise GraphError("all points coincide")
    return x


def pairwise_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Euclidean distances by explicit differences (no Gram-matrix cancellation)."""
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def knn_indices(coords, k: int, chunk: int = 512) -> np.ndarray:
    """``k`` nearest other points per row; ties go to the lower index."""
    x = _validate_cloud(coords)
    n = x.shape[0]
    if not 1 <= k < n:
        raise GraphError(f"k must satisfy 1 <= k < N (k={k}, N={n})")
    out = np.empty((n, k), dtype=np.int64)
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        d = pairwise_distances(x[lo:hi], x)
        d[np.arange(hi - lo), np.arange(lo, hi)] = np.inf
        kth = np.partition(d, k - 1, axis=1)[:, k - 1:k]
        for i in range(hi - lo):
            cand = np.flatnonzero(d[i] <= kth[i])
            # stable sort on distance keeps ascending index among equals
            cand = cand[np.argsort(d[i, cand], kind="stable")]
            out[lo + i] = cand[:k]
    return out


def edge_distance_list(coords, adjacency: SparseMatrix) -> np.ndarray:
    """Euclidean length of every stored entry of ``adjacency``."""
    x = np.asarray(coords, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    diff = x[adjacency.row_indices()] - x[adjacency.indices]
    return np.sqrt(np.einsum("ij,ij->i", diff, diff))


def build_knn_graph(coords, k: int) -> Graph:
    """kNN graph symmetrized by union, binary weights, no self-loops."""
    x = _validate_cloud(coords)
    n = x.shape[0]
    nbrs = knn_indices(x, k)
    rows = np.repeat(np.arange(n), k)
    cols = nbrs.ravel()
    r = np.concatenate([rows, cols])
    c = np.concatenate([cols, rows])
    # duplicates (mutual neighbours) collapse to a single unit entry
    key = np.unique(r * n + c)
    adj = SparseMatrix.from_coo(key // n, key % n, np.ones(len(key)), (n, n), symmetric=True)
    return Graph(x, adj, edge_distance_list(x, adj))


def graph_from_edges(coords, edges, n_nodes: int | None = None) -> Graph:
    """Undirected binary graph from an explicit edge list (tests, hand-built cases)."""
    x = np.asarray(coords, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0] if n_nodes is None else n_nodes
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if np.any(e[:, 0] == e[:, 1]):
        raise GraphError("self-loops are not allowed")
    r = np.concatenate([e[:, 0], e[:, 1]])
    c = np.concatenate([e[:, 1], e[:, 0]])
    key = np.unique(r * n + c)
    adj = SparseMatrix.from_coo(key // n, key % n, np.ones(len(key)), (n, n), symmetric=True)
    return Graph(x, adj, edge_distance_list(x, adj))


def normalized_laplacian(g: Graph | SparseMatrix) -> SparseMatrix:
    """``I - D^{-1/2} A D^{-1/2}`` as a symmetric sparse matrix."""
    a = g.adjacency if isinstance(g, Graph) else g
    deg = a.row_sums()
    isolated = np.flatnonzero(deg <= 0)
    if len(isolated):
        raise GraphError(f"node {int(isolated[0])} is isolated (degree 0); "
                         "the normalized Laplacian is undefined")
    inv_sqrt = 1.0 / np.sqrt(deg)
    rows = a.row_indices()
    off = -a.values * inv_sqrt[rows] * inv_sqrt[a.indices]
    n = a.shape[0]
    r = np.concatenate([rows, np.arange(n)])
    c = np.concatenate([a.indices, np.arange(n)])
    v = np.concatenate([off, np.ones(n)])
    return SparseMatrix.from_coo(r, c, v, a.shape, symmetric=True)
