"""Truncated graph Fourier basis: LOBPCG eigensolver, GFT/IGFT, truncation bound."""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass

import numpy as np

from .sparse import SparseMatrix
from .tensor import Tensor, left_matmul

logger = logging.getLogger(__name__)

DENSE_THRESHOLD = 256


class EigensolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class SpectralBasis:
    eigenvalues: np.ndarray      # (m,) ascending
    eigenvectors: np.ndarray     # (N, m), orthonormal columns
    residuals: np.ndarray        # (m,) ||L q - lambda q||_2
    fingerprint: str
    used_fallback: bool = False
    iterations: int = 0

    @property
    def n_nodes(self) -> int:
        return self.eigenvectors.shape[0]

    @property
    def m(self) -> int:
        return self.eigenvectors.shape[1]

    def permuted(self, perm) -> "SpectralBasis":
        return SpectralBasis(self.eigenvalues, self.eigenvectors[np.asarray(perm)],
                             self.residuals, self.fingerprint, self.used_fallback,
                             self.iterations)


def fix_signs(vectors: np.ndarray) -> np.ndarray:
    """Flip columns so the largest-magnitude entry of each is positive.

    Among entries of equal magnitude the lowest row index decides.
    """
    v = np.array(vectors, dtype=np.float64, copy=True)
    idx = np.argmax(np.abs(v), axis=0)
    signs = np.sign(v[idx, np.arange(v.shape[1])])
    signs[signs == 0] = 1.0
    return v * signs


def _residual_norms(mat, x, lam) -> np.ndarray:
    return np.linalg.norm(mat @ x - x * lam, axis=0)


def _check_problem(l: SparseMatrix, m: int):
    n = l.shape[0]
    if l.shape[0] != l.shape[1]:
        raise ValueError("matrix must be square")
    if not 1 <= m < n:
        raise ValueError(f"need 1 <= m < N (m={m}, N={n})")
    a = l.to_scipy()
    if abs(a - a.T).max() > 1e-12 * max(1.0, abs(a).max()):
        raise ValueError("matrix is not symmetric")


def dense_smallest(l: SparseMatrix, m: int) -> tuple[np.ndarray, np.ndarray]:
    """Reference path: full symmetric eigendecomposition, first ``m`` pairs."""
    w, v = np.linalg.eigh(l.toarray())
    return w[:m], fix_signs(v[:, :m])


def _orthonormal_complement(x: np.ndarray, z: np.ndarray, drop: float = 1e-10) -> np.ndarray:
    """Orthonormal basis of ``z`` projected off ``span(x)`` (x orthonormal)."""
    if z.shape[1] == 0:
        return z
    z = z / np.maximum(np.linalg.norm(z, axis=0), np.finfo(float).tiny)
    for _ in range(2):
        z = z - x @ (x.T @ z)
    u, s, _ = np.linalg.svd(z, full_matrices=False)
    keep = s > drop * max(s[0], 1e-300) if len(s) else s > 0
    keep &= s > 1e-12
    return u[:, keep]


def lobpcg_iterate(l: SparseMatrix, m: int, tol: float = 1e-8, max_iter: int = 500,
                   seed: int = 0):
    """Block LOBPCG for the ``m`` smallest eigenpairs, soft-locking converged ones.

    Returns ``(eigenvalues, eigenvectors, residuals, iterations, converged)``.
    """
    a = l.to_scipy()
    n = a.shape[0]
    diag = a.diagonal()
    precond = 1.0 / np.where(np.abs(diag) > 1e-14, np.abs(diag), 1.0)
    rng = np.random.default_rng(seed)
    x, _ = np.linalg.qr(rng.standard_normal((n, m)))
    ax = a @ x
    lam, c = np.linalg.eigh(0.5 * ((x.T @ ax) + (x.T @ ax).T))
    x, ax = x @ c, ax @ c
    p = np.zeros((n, 0))
    res = _residual_norms(a, x, lam)
    it = 0
    while it < max_iter and np.any(res > tol):
        it += 1
        active = res > tol
        w = (ax[:, active] - x[:, active] * lam[active]) * precond[:, None]
        z = np.hstack([w, p[:, active[:p.shape[1]]] if p.shape[1] else p])
        u = _orthonormal_complement(x, z)
        if u.shape[1] == 0:
            break
        basis = np.hstack([x, u])
        abasis = np.hstack([ax, a @ u])
        gram = basis.T @ abasis
        theta, coef = np.linalg.eigh(0.5 * (gram + gram.T))
        coef = coef[:, :m]
        lam = theta[:m]
        p_full = u @ coef[m:, :]
        x = basis @ coef
        # re-orthonormalize to stop drift over many iterations
        x, r = np.linalg.qr(x)
        x = x * np.sign(np.diag(r))
        ax = a @ x
        rq = x.T @ ax
        lam_rr, c2 = np.linalg.eigh(0.5 * (rq + rq.T))
        x, ax, lam = x @ c2, ax @ c2, lam_rr
        p = p_full @ c2
        res = _residual_norms(a, x, lam)
    converged = bool(np.all(res <= tol))
    return lam, x, res, it, converged


def lobpcg_smallest(l: SparseMatrix, m: int, tol: float = 1e-8, max_iter: int = 500,
                    seed: int = 0, dense_threshold: int = DENSE_THRESHOLD) -> SpectralBasis:
    """First ``m`` eigenpairs of a symmetric PSD matrix.

    Small problems (``N <= dense_threshold``) and non-converged runs use the
    dense decomposition; ``used_fallback`` records that.
    """
    _check_problem(l, m)
    if tol <= 0:
        raise ValueError("tol must be positive")
    n = l.shape[0]
    fallback = n <= dense_threshold
    iterations = 0
    if not fallback:
        lam, vec, res, iterations, ok = lobpcg_iterate(l, m, tol, max_iter, seed)
        if not ok:
            logger.warning("LOBPCG did not reach tol=%g in %d iterations (max residual %.3g); "
                           "falling back to dense", tol, iterations, res.max())
            fallback = True
        else:
            order = np.argsort(lam, kind="stable")
            lam, vec = lam[order], fix_signs(vec[:, order])
    if fallback:
        lam, vec = dense_smallest(l, m)
    res = _residual_norms(l.to_scipy(), vec, lam)
    if np.any(res > max(tol, 1e-10) * 10) and fallback:
        raise EigensolverError(f"dense fallback residual {res.max():.3g} exceeds tolerance")
    return SpectralBasis(lam, vec, res, l.fingerprint(), fallback, iterations)


def gft(basis: SpectralBasis, features) -> Tensor:
    """``Q_m^T X`` over the leading node axis ([N, d] or node-major [N, B, d])."""
    x = features if isinstance(features, Tensor) else Tensor(features)
    if x.shape[0] != basis.n_nodes:
        raise ValueError(f"feature rows {x.shape[0]} != basis nodes {basis.n_nodes}")
    return left_matmul(basis.eigenvectors.T, x)


def igft(basis: SpectralBasis, coeffs) -> Tensor:
    """``Q_m C``: back to the nodes from ``m`` spectral rows."""
    c = coeffs if isinstance(coeffs, Tensor) else Tensor(coeffs)
    if c.shape[0] != basis.m:
        raise ValueError(f"coefficient rows {c.shape[0]} != basis size {basis.m}")
    return left_matmul(basis.eigenvectors, c)


def truncation_error_bound(filter_values, m: int) -> float:
    """``max_{i>m} |g_i| / max_i |g_i|`` for a diagonal spectral filter."""
    g = np.abs(np.asarray(filter_values, dtype=np.float64).ravel())
    n = len(g)
    if not 1 <= m <= n:
        raise ValueError(f"need 1 <= m <= N (m={m}, N={n})")
    top = g.max()
    if top == 0.0:
        raise ValueError("filter is identically zero")
    if m == n:
        return 0.0
    return float(g[m:].max() / top)


class BasisCache:
    """Thread-safe memo of spectral bases keyed by matrix fingerprint and solver settings."""

    def __init__(self):
        self._lock = threading.Lock()
        self._store: dict[tuple, SpectralBasis] = {}

    def get(self, l: SparseMatrix, m: int, tol: float = 1e-8, max_iter: int = 500,
            seed: int = 0, dense_threshold: int = DENSE_THRESHOLD) -> SpectralBasis:
        key = (l.fingerprint(), m, tol, max_iter, seed, dense_threshold)
        with self._lock:
            hit = self._store.get(key)
        if hit is not None:
            return hit
        basis = lobpcg_smallest(l, m, tol, max_iter, seed, dense_threshold)
        with self._lock:
            self._store[key] = basis
        return basis

    def __len__(self):
        return len(self._store)
