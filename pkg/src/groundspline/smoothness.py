"""Smoothness prior for tensor-product spline surfaces.

The penalty is the order-``n`` derivative energy integrated over the valid
domain of the grid.  For ``n = 2`` this is the thin-plate energy
``s_uu^2 + 2 s_uv^2 + s_vv^2`` whose nullspace is exactly the affine fields.
Every span cell sees the same local quadratic form, so it is computed once in
closed form from 1D derivative Gram integrals and scattered over the lattice.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from math import comb

import numpy as np
from numpy.polynomial import polynomial as P
from scipy import sparse

from .spline import ControlGrid, span_polynomials


def span_derivative_gram(degree: int, k: int) -> np.ndarray:
    """``int_0^1 a^(k)(t) a^(k)(t)^T dt`` for the span bases ``a`` (unit spacing)."""
    coef = span_polynomials(degree)
    deriv = [P.polyder(c, k) if k else c for c in coef]
    n = degree + 1
    gram = np.zeros((n, n))
    for i in range(n):
        for j in range(i, n):
            antider = P.polyint(P.polymul(deriv[i], deriv[j]))
            val = P.polyval(1.0, antider) - P.polyval(0.0, antider)
            gram[i, j] = gram[j, i] = val
    return gram


@lru_cache(maxsize=None)
def local_energy(degree: int, order: int, spacing: float) -> np.ndarray:
    """Quadratic form of the derivative energy on one span cell.

    Indexed like :meth:`ControlGrid.basis` columns, i.e. ``r_u*(degree+1)+r_v``.
    """
    grams = [span_derivative_gram(degree, k) for k in range(order + 1)]
    local = sum(comb(order, k) * np.kron(grams[k], grams[order - k]) for k in range(order + 1))
    # d/dx = d/dtau / d and dx dy = d^2 dtau_u dtau_v.
    return local * spacing ** (2 - 2 * order)


def _local_root(local: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(local)
    keep = vals > vals.max() * 1e-12
    return np.sqrt(vals[keep])[:, None] * vecs[:, keep].T


@dataclass(frozen=True, eq=False)
class SmoothnessOperator:
    """Stacked penalty rows ``B_S`` and their Gram matrix over a lattice."""

    order: int
    rows: sparse.csr_matrix = field(repr=False)
    gram: sparse.csr_matrix = field(repr=False)

    @property
    def n_ctrl(self) -> int:
        return self.gram.shape[0]


def cell_columns(grid: ControlGrid) -> np.ndarray:
    """Control point indices touching each valid span cell, shape ``(cells, K)``."""
    deg = grid.degree
    n_u, n_v = grid.dims
    su = np.arange(deg, n_u)
    sv = np.arange(deg, n_v)
    offs = np.arange(deg + 1)
    iu = (su[:, None] - deg + offs)[:, None, :, None]
    iv = (sv[:, None] - deg + offs)[None, :, None, :]
    cols = iu * n_v + iv
    return cols.reshape(len(su) * len(sv), -1)


def build_smoothness(grid: ControlGrid, order: int = 2) -> SmoothnessOperator:
    if order < 1:
        raise ValueError(f"smoothness order must be at least 1, got {order}")
    if order > grid.degree:
        raise ValueError(
            f"smoothness order {order} exceeds spline degree {grid.degree}; "
            "the derivative is not square integrable"
        )
    local = local_energy(grid.degree, order, float(grid.spacing))
    root = _local_root(local)
    cols = cell_columns(grid)
    n_cells, k = cols.shape
    n = grid.n_ctrl

    gi = np.repeat(cols, k, axis=1).ravel()
    gj = np.tile(cols, (1, k)).ravel()
    gv = np.tile(local.ravel(), n_cells)
    gram = sparse.coo_matrix((gv, (gi, gj)), shape=(n, n)).tocsr()
    gram.sum_duplicates()
    # Exact symmetry regardless of accumulation order.
    gram = ((gram + gram.T) * 0.5).tocsr()

    rank = root.shape[0]
    ri = np.repeat(np.arange(n_cells * rank), k)
    rj = np.repeat(cols, rank, axis=0).ravel()
    rv = np.tile(root.ravel(), n_cells)
    rows = sparse.csr_matrix((rv, (ri, rj)), shape=(n_cells * rank, n))
    return SmoothnessOperator(order, rows, gram)


def penalty_value(op: SmoothnessOperator, p, via: str = "rows") -> float:
    """Smoothness cost ``||B_S p||^2``; ``via="gram"`` evaluates ``p^T G p``."""
    p = np.asarray(p, dtype=float)
    if p.shape != (op.n_ctrl,):
        raise ValueError(f"expected {op.n_ctrl} control heights, got shape {p.shape}")
    if via == "rows":
        r = op.rows @ p
        return float(r @ r)
    if via == "gram":
        return float(p @ (op.gram @ p))
    raise ValueError(f"unknown evaluation path {via!r}")


@lru_cache(maxsize=32)
def _cached_smoothness(origin, spacing, degree, dims, order) -> SmoothnessOperator:
    return build_smoothness(ControlGrid(origin, spacing, degree, dims, np.zeros(dims[0] * dims[1])), order)


def smoothness_for(grid: ControlGrid, order: int = 2) -> SmoothnessOperator:
    """:func:`build_smoothness`, memoized on the lattice geometry."""
    return _cached_smoothness(grid.origin, grid.spacing, grid.degree, grid.dims, order)
