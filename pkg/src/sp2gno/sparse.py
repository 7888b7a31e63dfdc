"""Compressed-row sparse matrices used for graph adjacency and Laplacians."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp


@dataclass(frozen=True)
class SparseMatrix:
    """CSR matrix with sorted column indices and no stored zeros.

    ``indptr``/``indices``/``values`` follow the usual CSR layout. The
    ``symmetric`` flag promises structural symmetry; it is checked on
    construction.
    """

    shape: tuple[int, int]
    indptr: np.ndarray
    indices: np.ndarray
    values: np.ndarray
    symmetric: bool = False
    _scipy: sp.csr_matrix | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        rows, cols = self.shape
        indptr = np.ascontiguousarray(self.indptr, dtype=np.int64)
        indices = np.ascontiguousarray(self.indices, dtype=np.int64)
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        if indptr.shape != (rows + 1,) or indptr[0] != 0 or indptr[-1] != len(indices):
            raise ValueError("malformed row offsets")
        if len(values) != len(indices):
            raise ValueError("values and column indices differ in length")
        if len(indices) and (indices.min() < 0 or indices.max() >= cols):
            raise ValueError("column index out of range")
        row_of = np.repeat(np.arange(rows), np.diff(indptr))
        same_row = row_of[1:] == row_of[:-1]
        if np.any(indices[1:][same_row] <= indices[:-1][same_row]):
            raise ValueError("column indices must be strictly increasing within each row")
        if np.any(values == 0.0):
            raise ValueError("explicit zeros are not allowed")
        object.__setattr__(self, "indptr", indptr)
        object.__setattr__(self, "indices", indices)
        object.__setattr__(self, "values", values)
        if self.symmetric:
            if rows != cols:
                raise ValueError("a symmetric matrix must be square")
            t = self.to_scipy().T.tocsr()
            t.sort_indices()
            if not (np.array_equal(t.indptr, indptr) and np.array_equal(t.indices, indices)):
                raise ValueError("matrix flagged symmetric is not structurally symmetric")

    @classmethod
    def from_coo(cls, rows, cols, values, shape, symmetric=False) -> "SparseMatrix":
        """Build from triplets; duplicates are summed and zeros dropped."""
        m = sp.coo_matrix(
            (np.asarray(values, dtype=np.float64), (np.asarray(rows), np.asarray(cols))),
            shape=shape,
        ).tocsr()
        m.sum_duplicates()
        m.eliminate_zeros()
        m.sort_indices()
        return cls(shape=tuple(shape), indptr=m.indptr, indices=m.indices,
                   values=m.data, symmetric=symmetric)

    @classmethod
    def from_dense(cls, a, symmetric=False) -> "SparseMatrix":
        a = np.asarray(a, dtype=np.float64)
        r, c = np.nonzero(a)
        return cls.from_coo(r, c, a[r, c], a.shape, symmetric=symmetric)

    @property
    def nnz(self) -> int:
        return len(self.indices)

    def row_indices(self) -> np.ndarray:
        """Row index of every stored entry, in storage order."""
        return np.repeat(np.arange(self.shape[0]), np.diff(self.indptr))

    def to_scipy(self) -> sp.csr_matrix:
        if self._scipy is None:
            m = sp.csr_matrix((self.values, self.indices, self.indptr), shape=self.shape)
            object.__setattr__(self, "_scipy", m)
        return self._scipy

    def with_values(self, values) -> "SparseMatrix":
        """Same sparsity pattern, new values (must stay nonzero)."""
        return SparseMatrix(self.shape, self.indptr, self.indices, values, self.symmetric)

    def toarray(self) -> np.ndarray:
        return self.to_scipy().toarray()

    def row_sums(self) -> np.ndarray:
        return np.asarray(self.to_scipy().sum(axis=1)).ravel()

    def diagonal(self) -> np.ndarray:
        return self.to_scipy().diagonal()

    def fingerprint(self) -> str:
        """Stable hash of shape, pattern and values."""
        h = hashlib.sha256()
        h.update(np.asarray(self.shape, dtype="<i8").tobytes())
        h.update(self.indptr.astype("<i8").tobytes())
        h.update(self.indices.astype("<i8").tobytes())
        h.update(self.values.astype("<f8").tobytes())
        return h.hexdigest()

    def permuted(self, perm) -> tuple["SparseMatrix", np.ndarray]:
        """Symmetric relabelling: new node ``i`` is old node ``perm[i]``.

        Returns the relabelled matrix and, for each of its stored entries,
        the position of the same entry in ``self`` (so per-edge data can
        follow the permutation).
        """
        perm = np.asarray(perm, dtype=np.int64)
        if self.shape[0] != self.shape[1] or sorted(perm.tolist()) != list(range(self.shape[0])):
            raise ValueError("perm must be a permutation of the node indices")
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(perm))
        new_rows = inv[self.row_indices()]
        new_cols = inv[self.indices]
        order = np.lexsort((new_cols, new_rows))
        counts = np.bincount(new_rows, minlength=self.shape[0])
        indptr = np.concatenate([[0], np.cumsum(counts)])
        out = SparseMatrix(self.shape, indptr, new_cols[order], self.values[order], self.symmetric)
        return out, order
