import threading

import numpy as np
import pytest

from sp2gno.graph import build_knn_graph, graph_from_edges, normalized_laplacian
from sp2gno.sparse import SparseMatrix
from sp2gno.spectral import (BasisCache, dense_smallest, fix_signs, gft, igft,
                             lobpcg_smallest, truncation_error_bound)
from sp2gno.tensor import Tensor


def knn_laplacian(seed, n, k=6):
    rng = np.random.default_rng(seed)
    return normalized_laplacian(build_knn_graph(rng.uniform(size=(n, 2)), k))


def test_path3_eigenvalues():
    lap = normalized_laplacian(graph_from_edges(np.arange(3.0), [(0, 1), (1, 2)]))
    b = lobpcg_smallest(lap, 2)
    assert np.allclose(b.eigenvalues, [0.0, 1.0], atol=1e-12)


@pytest.mark.parametrize("dense_threshold", [0, 256])
def test_kernel_vector_is_sqrt_degree(dense_threshold):
    g = build_knn_graph(np.random.default_rng(1).uniform(size=(120, 2)), 8)
    b = lobpcg_smallest(normalized_laplacian(g), 4, tol=1e-10, dense_threshold=dense_threshold)
    ref = np.sqrt(g.degrees) / np.linalg.norm(np.sqrt(g.degrees))
    assert abs(b.eigenvalues[0]) < 1e-10
    assert np.linalg.norm(b.eigenvectors[:, 0] - ref) < 1e-8  # sign fixed positive
    assert b.used_fallback == (dense_threshold > 0)


@pytest.mark.parametrize("seed", range(6))
def test_lobpcg_matches_dense(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(40, 200))
    m = int(rng.integers(1, 17))
    lap = knn_laplacian(seed, n)
    b = lobpcg_smallest(lap, m, tol=1e-10, seed=seed, dense_threshold=0)
    w, v = dense_smallest(lap, m)
    assert not b.used_fallback
    assert np.abs(b.eigenvalues - w).max() <= 1e-8
    assert b.residuals.max() <= 1e-10
    full = np.linalg.eigvalsh(lap.toarray())
    for i in range(m):
        if min(full[i + 1] - full[i], full[i] - full[i - 1] if i else 1) > 1e-6:
            assert np.linalg.norm(b.eigenvectors[:, i] - v[:, i]) <= 1e-6


def test_basis_invariants():
    lap = knn_laplacian(3, 300)
    b = lobpcg_smallest(lap, 12)
    assert np.all(np.diff(b.eigenvalues) >= 0)
    assert b.eigenvalues.min() >= -1e-12 and b.eigenvalues.max() <= 2
    assert np.abs(b.eigenvectors.T @ b.eigenvectors - np.eye(12)).max() <= 1e-8
    assert b.residuals.max() <= 1e-8
    idx = np.argmax(np.abs(b.eigenvectors), axis=0)
    assert np.all(b.eigenvectors[idx, np.arange(12)] > 0)
    assert b.fingerprint == lap.fingerprint()


def test_lobpcg_deterministic():
    lap = knn_laplacian(4, 300)
    a = lobpcg_smallest(lap, 8, seed=5)
    b = lobpcg_smallest(lap, 8, seed=5)
    assert np.array_equal(a.eigenvectors, b.eigenvectors)
    assert np.array_equal(a.eigenvalues, b.eigenvalues)


def test_lobpcg_errors():
    lap = knn_laplacian(0, 30)
    with pytest.raises(ValueError):
        lobpcg_smallest(lap, 30)
    with pytest.raises(ValueError):
        lobpcg_smallest(lap, 3, tol=0)
    with pytest.raises(ValueError, match="symmetric"):
        lobpcg_smallest(SparseMatrix.from_dense(np.array([[1.0, 2], [0, 1]])), 1)


def test_non_convergence_falls_back_to_dense(caplog):
    lap = knn_laplacian(2, 300)
    b = lobpcg_smallest(lap, 6, max_iter=2)
    assert b.used_fallback
    w, _ = dense_smallest(lap, 6)
    assert np.allclose(b.eigenvalues, w, atol=1e-12)


def test_fix_signs():
    v = np.array([[0.1, -0.9], [-0.5, 0.2]])
    assert np.array_equal(fix_signs(v), [[-0.1, 0.9], [0.5, -0.2]])


# ------------------------------------------------------------------ transforms

@pytest.fixture(scope="module")
def full_basis():
    lap = knn_laplacian(7, 40)
    w, v = np.linalg.eigh(lap.toarray())
    from sp2gno.spectral import SpectralBasis
    return SpectralBasis(w, fix_signs(v), np.zeros(40), lap.fingerprint())


def test_gft_zero_and_unit(full_basis):
    assert not gft(full_basis, np.zeros((40, 3))).data.any()
    c = gft(full_basis, full_basis.eigenvectors[:, [4]]).data.ravel()
    assert np.allclose(c, np.eye(40)[4], atol=1e-12)
    assert not igft(full_basis, np.zeros((40, 2))).data.any()
    unit = np.zeros((40, 2))
    unit[5] = 1.0
    assert np.allclose(igft(full_basis, unit).data, full_basis.eigenvectors[:, [5, 5]])


def test_round_trips(full_basis, rng):
    x = rng.standard_normal((40, 3))
    assert np.abs(igft(full_basis, gft(full_basis, x)).data - x).max() <= 1e-10
    from sp2gno.spectral import SpectralBasis
    trunc = SpectralBasis(full_basis.eigenvalues[:7], full_basis.eigenvectors[:, :7],
                          np.zeros(7), "")
    c = rng.standard_normal((7, 2))
    assert np.abs(gft(trunc, igft(trunc, c)).data - c).max() <= 1e-10
    # Parseval on the retained subspace
    assert np.linalg.norm(gft(trunc, x).data) <= np.linalg.norm(x)
    inside = trunc.eigenvectors @ c
    assert np.isclose(np.linalg.norm(gft(trunc, inside).data), np.linalg.norm(inside))


def test_transform_shape_errors(full_basis):
    with pytest.raises(ValueError):
        gft(full_basis, np.zeros((39, 1)))
    with pytest.raises(ValueError):
        igft(full_basis, Tensor(np.zeros((3, 1))))


# ------------------------------------------------------------------ truncation bound

def test_bound_examples():
    g = np.array([1.0, 0.5, 0.25, 0.1])
    assert truncation_error_bound(g, 4) == 0.0
    assert truncation_error_bound(g, 2) == 0.25
    assert truncation_error_bound(np.ones(5), 3) == 1.0
    with pytest.raises(ValueError):
        truncation_error_bound(np.zeros(3), 1)
    with pytest.raises(ValueError):
        truncation_error_bound(g, 5)


def test_bound_as_stated_can_fail_for_aligned_input(full_basis):
    """Input concentrated on a high frequency defeats the ||y||-relative bound."""
    q = full_basis.eigenvectors
    g = np.ones(40)
    g[-1] = 0.5
    x = q[:, [-1]]
    y = q @ (g[:, None] * (q.T @ x))
    y_m = q[:, :39] @ (g[:39, None] * (q[:, :39].T @ x))
    err = np.linalg.norm(y - y_m) / np.linalg.norm(y)
    assert err == pytest.approx(1.0)
    assert truncation_error_bound(g, 39) == 0.5
    # the input-relative form still holds
    assert np.linalg.norm(y - y_m) <= 0.5 * np.abs(g).max() * np.linalg.norm(x) + 1e-12


# ------------------------------------------------------------------ cache

def test_basis_cache_concurrent_hits():
    cache = BasisCache()
    lap = knn_laplacian(9, 280)
    results = []
    threads = [threading.Thread(target=lambda: results.append(cache.get(lap, 5)))
               for _ in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(cache) == 1
    assert all(np.array_equal(r.eigenvectors, results[0].eigenvectors) for r in results)
    assert cache.get(lap, 5) is cache.get(lap, 5)
