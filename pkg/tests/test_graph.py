import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sp2gno.graph import (GraphError, build_knn_graph, edge_distance_list, graph_from_edges,
                          knn_indices, normalized_laplacian)


def edges_of(g):
    return {(int(r), int(c)) for r, c in zip(g.rows, g.cols) if r < c}


def brute_knn(x, k):
    """Sort every row by (distance, index) with plain Python."""
    out = []
    for i in range(len(x)):
        cand = sorted((float(np.linalg.norm(x[i] - x[j])), j) for j in range(len(x)) if j != i)
        out.append([j for _, j in cand[:k]])
    return np.array(out)


def test_three_points_on_a_line():
    g = build_knn_graph(np.array([[0.0, 0], [1, 0], [3, 0]]), 1)
    assert edges_of(g) == {(0, 1), (1, 2)}


def test_two_points():
    g = build_knn_graph(np.array([[0.0, 0], [1, 1]]), 1)
    assert edges_of(g) == {(0, 1)}


def test_k_out_of_range():
    with pytest.raises(GraphError):
        build_knn_graph(np.zeros((3, 2)) + np.arange(3)[:, None], 3)
    with pytest.raises(GraphError):
        build_knn_graph(np.arange(3.0)[:, None], 0)


def test_identical_cloud_rejected_but_duplicates_allowed():
    with pytest.raises(GraphError):
        build_knn_graph(np.ones((4, 2)), 1)
    g = build_knn_graph(np.array([[0.0, 0], [0, 0], [1, 0]]), 1)
    assert 0.0 in g.edge_distances


def test_ties_go_to_lower_index():
    # node 0 at the centre, four neighbours at distance 1
    x = np.array([[0.0, 0], [0, 1], [1, 0], [0, -1], [-1, 0]])
    assert list(knn_indices(x, 2)[0]) == [1, 2]


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 40), st.integers(1, 8), st.integers(0, 2**31 - 1), st.integers(1, 3))
def test_knn_matches_brute_force_and_is_symmetric(n, k, seed, dim):
    k = min(k, n - 1)
    x = np.random.default_rng(seed).integers(0, 5, size=(n, dim)).astype(float)
    if np.all(x == x[0]):
        x[0, 0] += 1
    assert np.array_equal(knn_indices(x, k), brute_knn(x, k))
    g = build_knn_graph(x, k)
    a = g.adjacency.toarray()
    assert np.array_equal(a, a.T)
    assert not np.diag(a).any()
    assert set(np.unique(a)) <= {0.0, 1.0}
    assert g.degrees.min() >= k
    assert np.array_equal(g.degrees, a.sum(axis=1))


def test_laplacian_path3():
    g = graph_from_edges(np.arange(3.0), [(0, 1), (1, 2)])
    lap = normalized_laplacian(g).toarray()
    s = 1 / np.sqrt(2)
    assert np.allclose(lap, [[1, -s, 0], [-s, 1, -s], [0, -s, 1]], atol=1e-15)


def test_laplacian_k2():
    g = graph_from_edges(np.arange(2.0), [(0, 1)])
    assert np.array_equal(normalized_laplacian(g).toarray(), [[1, -1], [-1, 1]])


def test_laplacian_isolated_node_named():
    g = graph_from_edges(np.arange(3.0), [(0, 1)])
    with pytest.raises(GraphError, match="node 2"):
        normalized_laplacian(g)


@pytest.mark.parametrize("seed", range(5))
def test_laplacian_spectrum_and_kernel(seed):
    rng = np.random.default_rng(seed)
    g = build_knn_graph(rng.uniform(size=(int(rng.integers(20, 200)), 2)), 6)
    lap = normalized_laplacian(g).toarray()
    assert np.array_equal(lap, lap.T)
    w, v = np.linalg.eigh(lap)
    assert w.min() >= -1e-12 and w.max() <= 2 + 1e-12
    if w[1] > 1e-9:  # connected
        ref = np.sqrt(g.degrees) / np.linalg.norm(np.sqrt(g.degrees))
        assert abs(w[0]) < 1e-12
        assert min(np.linalg.norm(v[:, 0] - ref), np.linalg.norm(v[:, 0] + ref)) < 1e-10


def test_edge_distances():
    g = graph_from_edges(np.array([[0.0, 0], [3, 4], [3, 4]]), [(0, 1), (1, 2)])
    d = dict(zip(zip(g.rows.tolist(), g.cols.tolist()), g.edge_distances))
    assert d[(0, 1)] == 5.0 and d[(1, 0)] == 5.0
    assert d[(1, 2)] == 0.0
    assert np.array_equal(edge_distance_list(g.coordinates, g.adjacency), g.edge_distances)


def test_permuted_graph_carries_distances(rng):
    g = build_knn_graph(rng.uniform(size=(15, 2)), 3)
    perm = rng.permutation(15)
    p = g.permuted(perm)
    assert np.array_equal(p.coordinates, g.coordinates[perm])
    assert np.array_equal(p.edge_distances,
                          edge_distance_list(p.coordinates, p.adjacency))
