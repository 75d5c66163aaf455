"""Uniform tensor-product B-spline height surfaces.

Control point ``(i, j)`` owns the cardinal basis function whose support is
``[origin + i*d, origin + (i+degree+1)*d]`` along each axis.  A query is inside
the valid domain when every basis function touching it exists, which is the
box ``[origin + degree*d, origin + n*d]`` per axis.  Control heights are stored
flat, row-major with ``u`` (first coordinate) outer and ``v`` inner.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Tuple

import numpy as np
from scipy import sparse

# Relative slack on the domain edges so that queries exactly on the upper
# boundary (or off by roundoff) are still accepted.
_EDGE_TOL = 1e-9


class OutOfDomainError(ValueError):
    """Raised when a query lies outside the spline's valid domain."""


class GeometryMismatchError(ValueError):
    """Raised when two grids are expected to share a lattice but do not."""


def span_basis(tau, degree: int) -> np.ndarray:
    """Evaluate the ``degree+1`` nonzero uniform B-spline bases on one span.

    ``tau`` is the local coordinate in ``[0, 1]``; the result has shape
    ``tau.shape + (degree + 1,)`` and basis ``r`` belongs to the control point
    ``span - degree + r``.
    """
    tau = np.asarray(tau, dtype=float)
    values = np.zeros(tau.shape + (degree + 1,))
    values[..., 0] = 1.0
    for j in range(1, degree + 1):
        saved = np.zeros(tau.shape)
        for r in range(j):
            # On integer knots the Cox-de Boor denominator is always j.
            temp = values[..., r] / j
            values[..., r] = saved + (r + 1 - tau) * temp
            saved = (tau + j - r - 1) * temp
        values[..., j] = saved
    return values


def span_polynomials(degree: int) -> np.ndarray:
    """Monomial coefficients of the span bases.

    Row ``r`` holds the coefficients (increasing powers of ``tau``) of basis
    ``r`` as returned by :func:`span_basis`.
    """
    from numpy.polynomial import Polynomial

    tau = Polynomial([0.0, 1.0])
    polys = [Polynomial([1.0])] + [Polynomial([0.0])] * degree
    for j in range(1, degree + 1):
        saved = Polynomial([0.0])
        for r in range(j):
            temp = polys[r] / j
            polys[r] = saved + (r + 1 - tau) * temp
            saved = (tau + j - r - 1) * temp
        polys[j] = saved
    coef = np.zeros((degree + 1, degree + 1))
    for r, poly in enumerate(polys):
        c = poly.coef
        coef[r, : len(c)] = c
    return coef


@dataclass(frozen=True)
class BasisRow:
    """Nonzero basis weights of a single query point."""

    columns: np.ndarray
    weights: np.ndarray


@dataclass(frozen=True, eq=False)
class ControlGrid:
    """Rectangular lattice of spline control heights.

    Attributes:
        origin: lattice origin (m); the first knot along each axis.
        spacing: control point distance (m), identical in both axes.
        degree: spline degree.
        dims: number of control points ``(n_u, n_v)``.
        p: flat control heights (m), row-major ``u`` then ``v``.
    """

    origin: Tuple[float, float]
    spacing: float
    degree: int
    dims: Tuple[int, int]
    p: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))
        object.__setattr__(self, "dims", (int(self.dims[0]), int(self.dims[1])))
        object.__setattr__(self, "degree", int(self.degree))
        if not self.spacing > 0:
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        if self.degree < 0:
            raise ValueError(f"degree must be non-negative, got {self.degree}")
        if min(self.dims) < self.degree + 1:
            raise ValueError(f"dims {self.dims} too small for degree {self.degree}")
        p = np.array(self.p, dtype=float).reshape(-1)
        if p.size != self.n_ctrl:
            raise ValueError(f"expected {self.n_ctrl} control heights, got {p.size}")
        p.flags.writeable = False
        object.__setattr__(self, "p", p)

    @property
    def n_ctrl(self) -> int:
        return self.dims[0] * self.dims[1]

    @property
    def n_support(self) -> int:
        return (self.degree + 1) ** 2

    @property
    def domain(self) -> Tuple[np.ndarray, np.ndarray]:
        """Lower and upper corner of the valid evaluation domain."""
        o = np.asarray(self.origin)
        lo = o + self.degree * self.spacing
        hi = o + np.asarray(self.dims) * self.spacing
        return lo, hi

    def with_heights(self, p) -> "ControlGrid":
        return ControlGrid(self.origin, self.spacing, self.degree, self.dims, p)

    def same_geometry(self, other: "ControlGrid") -> bool:
        return (
            self.origin == other.origin
            and self.spacing == other.spacing
            and self.degree == other.degree
            and self.dims == other.dims
        )

    def check_geometry(self, other: "ControlGrid") -> None:
        if not self.same_geometry(other):
            raise GeometryMismatchError(
                f"grid geometry differs: origin {self.origin} vs {other.origin}, "
                f"spacing {self.spacing} vs {other.spacing}, degree {self.degree} vs "
                f"{other.degree}, dims {self.dims} vs {other.dims}"
            )

    def control_positions(self) -> Tuple[np.ndarray, np.ndarray]:
        """Greville abscissae of the control points along ``u`` and ``v``."""
        shift = (self.degree + 1) / 2.0
        u = self.origin[0] + (np.arange(self.dims[0]) + shift) * self.spacing
        v = self.origin[1] + (np.arange(self.dims[1]) + shift) * self.spacing
        return u, v

    def contains(self, xy) -> np.ndarray:
        xy = np.atleast_2d(np.asarray(xy, dtype=float))
        t = (xy - np.asarray(self.origin)) / self.spacing
        lo = self.degree - _EDGE_TOL
        hi = np.asarray(self.dims) + _EDGE_TOL
        return np.all((t >= lo) & (t <= hi), axis=1)

    def basis(self, xy) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Vectorized basis evaluation.

        Returns ``(columns, weights, valid)``; ``columns`` and ``weights`` have
        shape ``(N, (degree+1)**2)``.  Rows for out-of-domain queries are
        filled with column 0 and weight 0.
        """
        xy = np.atleast_2d(np.asarray(xy, dtype=float))
        deg = self.degree
        n_u, n_v = self.dims
        t = (xy - np.asarray(self.origin)) / self.spacing
        valid = self.contains(xy)
        span = np.floor(t).astype(np.int64)
        # Points on the upper edge belong to the last span.
        span[:, 0] = np.clip(span[:, 0], deg, n_u - 1)
        span[:, 1] = np.clip(span[:, 1], deg, n_v - 1)
        tau = np.clip(t - span, 0.0, 1.0)
        bu = span_basis(tau[:, 0], deg)
        bv = span_basis(tau[:, 1], deg)
        offs = np.arange(deg + 1)
        iu = span[:, 0:1] - deg + offs
        iv = span[:, 1:2] - deg + offs
        cols = (iu[:, :, None] * n_v + iv[:, None, :]).reshape(len(xy), -1)
        weights = (bu[:, :, None] * bv[:, None, :]).reshape(len(xy), -1)
        cols[~valid] = 0
        weights[~valid] = 0.0
        return cols, weights, valid

    def predict(self, xy) -> np.ndarray:
        """Surface heights at ``xy``; NaN outside the valid domain."""
        cols, weights, valid = self.basis(xy)
        out = np.einsum("nk,nk->n", weights, self.p[cols])
        out[~valid] = np.nan
        return out


def grid_from_bounds(lo, hi, spacing: float, degree: int = 2, p=None) -> ControlGrid:
    """Smallest lattice whose valid domain covers the box ``[lo, hi]``.

    The first valid span starts at ``lo`` and spans are half open, so the
    number of spans per axis is ``floor(extent / spacing) + 1``; the lattice
    then carries ``degree`` extra control points whose bases reach out
    ``degree`` spans beyond the box on each side.
    """
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if lo.shape != (2,) or hi.shape != (2,):
        raise ValueError("bounds must be 2D points")
    if not spacing > 0:
        raise ValueError(f"control point distance must be positive, got {spacing}")
    if not np.all(hi > lo):
        raise ValueError(f"degenerate bounds {lo.tolist()} .. {hi.tolist()}")
    spans = np.floor((hi - lo) / spacing).astype(int) + 1
    dims = tuple(int(s) + degree for s in spans)
    origin = tuple(lo - degree * spacing)
    if p is None:
        p = np.zeros(dims[0] * dims[1])
    return ControlGrid(origin, float(spacing), degree, dims, p)


def grid_for_points(xy, spacing: float, degree: int = 2) -> ControlGrid:
    xy = np.asarray(xy, dtype=float)
    if len(xy) == 0:
        raise ValueError("cannot derive bounds from an empty point set")
    lo, hi = xy.min(axis=0), xy.max(axis=0)
    # Guard against a degenerate box for collinear or single points.
    hi = np.maximum(hi, lo + 1e-6)
    return grid_from_bounds(lo, hi, spacing, degree)


def basis_at(grid: ControlGrid, x) -> BasisRow:
    x = np.asarray(x, dtype=float).reshape(1, 2)
    cols, weights, valid = grid.basis(x)
    if not valid[0]:
        lo, hi = grid.domain
        raise OutOfDomainError(f"{x[0].tolist()} outside domain {lo.tolist()} .. {hi.tolist()}")
    return BasisRow(cols[0], weights[0])


def predict_height(grid: ControlGrid, x) -> float:
    row = basis_at(grid, x)
    return float(row.weights @ grid.p[row.columns])


@dataclass(frozen=True, eq=False)
class SparseDesign:
    """Measurement matrix ``B`` with a fixed number of nonzeros per row.

    ``retained`` maps each row back to its index in the input sequence.
    """

    n_cols: int
    columns: np.ndarray
    weights: np.ndarray
    retained: np.ndarray
    n_dropped: int = 0

    @property
    def n_rows(self) -> int:
        return len(self.columns)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.n_rows, self.n_cols

    def row(self, n: int) -> BasisRow:
        return BasisRow(self.columns[n], self.weights[n])

    def dot(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        if p.shape != (self.n_cols,):
            raise ValueError(f"expected {self.n_cols} control heights, got shape {p.shape}")
        return np.einsum("nk,nk->n", self.weights, p[self.columns])

    def tocsr(self) -> sparse.csr_matrix:
        k = self.columns.shape[1] if self.n_rows else 0
        indptr = np.arange(self.n_rows + 1) * k
        return sparse.csr_matrix(
            (self.weights.ravel(), self.columns.ravel(), indptr), shape=self.shape
        )


def build_design(grid: ControlGrid, xy, drop_out_of_domain: bool = True) -> SparseDesign:
    """Stack the basis rows of ``xy`` into a sparse design matrix.

    Out-of-domain points are dropped and counted; with
    ``drop_out_of_domain=False`` they raise :class:`OutOfDomainError`.
    """
    xy = np.asarray(xy, dtype=float).reshape(-1, 2)
    if len(xy) == 0:
        raise ValueError("cannot build a design matrix without points")
    cols, weights, valid = grid.basis(xy)
    n_bad = int(np.count_nonzero(~valid))
    if n_bad and not drop_out_of_domain:
        first = int(np.flatnonzero(~valid)[0])
        raise OutOfDomainError(f"{n_bad} points outside the grid domain, first at index {first}")
    retained = np.flatnonzero(valid)
    return SparseDesign(grid.n_ctrl, cols[valid], weights[valid], retained, n_bad)


# --- artifact -------------------------------------------------------------------

ARTIFACT_MAGIC = b"UBSG"
ARTIFACT_VERSION = 1
# magic, version, degree, n_u, n_v, origin u, origin v, spacing
_HEADER = struct.Struct("<4sIIIIddd")


class ArtifactError(ValueError):
    pass


def save_grid(path, grid: ControlGrid) -> None:
    """Write ``grid`` as a fixed header followed by float64-le control heights."""
    header = _HEADER.pack(ARTIFACT_MAGIC, ARTIFACT_VERSION, grid.degree, grid.dims[0], grid.dims[1],
                          grid.origin[0], grid.origin[1], grid.spacing)
    Path(path).write_bytes(header + grid.p.astype("<f8").tobytes())


def load_grid(path) -> ControlGrid:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ArtifactError(f"{path}: {len(raw)} bytes is shorter than the {_HEADER.size} byte header")
    magic, version, degree, n_u, n_v, ou, ov, spacing = _HEADER.unpack_from(raw)
    if magic != ARTIFACT_MAGIC:
        raise ArtifactError(f"{path}: not a surface artifact (magic {magic!r})")
    if version != ARTIFACT_VERSION:
        raise ArtifactError(f"{path}: unsupported artifact version {version}")
    body = raw[_HEADER.size:]
    if len(body) != 8 * n_u * n_v:
        raise ArtifactError(f"{path}: expected {n_u * n_v} control heights, found {len(body)} bytes")
    p = np.frombuffer(body, dtype="<f8")
    return ControlGrid((ou, ov), spacing, degree, (n_u, n_v), p)
