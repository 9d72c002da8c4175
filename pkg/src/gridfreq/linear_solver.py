"""Sparse LU solve service shared by all Newton loops.

Thin wrapper around SuperLU (scipy) that adds triplet assembly with
duplicate summation, structural-singularity diagnostics that name the
offending row, and a couple of iterative-refinement steps when the first
solve is not clean.  Assembly order is deterministic, so two systems with
the same sparsity pattern get identical pivot orderings.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import SingularSystemError

_REFINE_STEPS = 2
_REFINE_TRIGGER = 1e-9


class SparseSystem:
    """A square sparse real system assembled from triplets.

    Duplicate (row, col) entries are summed.  The factorization is computed
    lazily on the first solve and reused until the values change.
    """

    def __init__(self, dim: int, rows, cols, vals):
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=np.float64)
        if rows.size and (rows.min() < 0 or rows.max() >= dim):
            raise IndexError(f"row index out of range for dimension {dim}")
        if cols.size and (cols.min() < 0 or cols.max() >= dim):
            raise IndexError(f"col index out of range for dimension {dim}")
        self.dim = dim
        self.matrix = sp.coo_matrix(
            (vals, (rows, cols)), shape=(dim, dim)
        ).tocsc()
        self.matrix.sum_duplicates()
        self._lu = None

    def _check_structure(self) -> None:
        csr = self.matrix.tocsr()
        row_counts = np.diff(csr.indptr)
        empty = np.flatnonzero(row_counts == 0)
        if empty.size:
            raise SingularSystemError(
                f"structurally singular: row {empty[0]} is empty",
                row=int(empty[0]),
            )
        col_counts = np.diff(self.matrix.indptr)
        empty = np.flatnonzero(col_counts == 0)
        if empty.size:
            raise SingularSystemError(
                f"structurally singular: column {empty[0]} is empty",
                row=int(empty[0]),
            )

    def factor(self):
        if self._lu is None:
            self._check_structure()
            try:
                self._lu = spla.splu(self.matrix)
            except Exception as exc:  # SuperLU reports numeric singularity
                raise SingularSystemError(f"LU factorization failed: {exc}") from exc
        return self._lu

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Solve A x = rhs with up to two refinement passes."""
        rhs = np.asarray(rhs, dtype=np.float64)
        if rhs.shape != (self.dim,):
            raise ValueError(f"rhs has shape {rhs.shape}, expected ({self.dim},)")
        lu = self.factor()
        x = lu.solve(rhs)
        if not np.all(np.isfinite(x)):
            raise SingularSystemError("numerically singular: non-finite solution")
        rhs_scale = np.abs(rhs).max() if rhs.size else 0.0
        for _ in range(_REFINE_STEPS):
            r = rhs - self.matrix @ x
            if np.abs(r).max() <= _REFINE_TRIGGER * max(rhs_scale, 1.0):
                break
            x = x + lu.solve(r)
        return x


def assemble(dim: int, triplets) -> SparseSystem:
    """Build a :class:`SparseSystem` from an iterable of (row, col, value)."""
    if dim <= 0:
        raise ValueError(f"dimension must be positive, got {dim}")
    tl = list(triplets)
    if tl:
        rows, cols, vals = zip(*tl)
    else:
        rows, cols, vals = (), (), ()
    return SparseSystem(dim, rows, cols, vals)


def factor_and_solve(system: SparseSystem, rhs) -> np.ndarray:
    """Factor (if needed) and solve in one call."""
    return system.solve(np.asarray(rhs, dtype=np.float64))
