"""Graduated non-convexity fit of a spline ground surface.

Alternates a sparse weighted least-squares solve for the control heights with
a closed-form per-point weight update, while the convexity parameter ``mu`` is
multiplied by a constant factor each iteration.  Residuals are measured as
point height above the surface; positive ones are inflated by the asymmetry
ratio before the weight update only.
"""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import IO, List, Optional, Tuple

import cvxopt
import cvxopt.cholmod
import numpy as np
from scipy import sparse

from .smoothness import SmoothnessOperator, cell_columns, smoothness_for
from .spline import ControlGrid, GeometryMismatchError, SparseDesign, build_design

logger = logging.getLogger(__name__)


class SolverError(ArithmeticError):
    """The normal matrix could not be factorized."""


class Robustifier(str, enum.Enum):
    GMC = "gmc"
    TLS = "tls"
    OLS = "ols"


_DEFAULT_ALPHA = {Robustifier.TLS: 1.6, Robustifier.GMC: 1 / 1.6, Robustifier.OLS: 1.0}


@dataclass(frozen=True)
class RobustConfig:
    """Robust fitting parameters.

    ``mu0`` and ``alpha`` default per robustifier: TLS starts at ``mu0 = 1``
    and grows by 1.6; GMC shrinks by 1/1.6 from ``alpha**-(max_iters-1)`` so it
    reaches ``mu = 1`` on the last iteration.
    """

    robustifier: Robustifier = Robustifier.TLS
    c: float = 0.4
    mu0: Optional[float] = None
    alpha: Optional[float] = None
    max_iters: int = 10
    r_asymm: float = 2.0
    w_s: float = 1.0
    smoothness_order: int = 2
    ridge_eps: float = 1e-9

    def __post_init__(self):
        object.__setattr__(self, "robustifier", Robustifier(self.robustifier))
        if not self.c > 0:
            raise ValueError(f"c must be positive, got {self.c}")
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be at least 1, got {self.max_iters}")
        if not self.r_asymm >= 1:
            raise ValueError(f"r_asymm must be >= 1, got {self.r_asymm}")
        if self.w_s < 0 or self.ridge_eps < 0:
            raise ValueError("w_s and ridge_eps must be non-negative")
        if self.mu0 is not None and not self.mu0 > 0:
            raise ValueError(f"mu0 must be positive, got {self.mu0}")
        a = self.factor
        if self.robustifier is Robustifier.TLS and not a > 1:
            raise ValueError(f"TLS needs alpha > 1, got {a}")
        if self.robustifier is Robustifier.GMC and not 0 < a < 1:
            raise ValueError(f"GMC needs 0 < alpha < 1, got {a}")

    @property
    def factor(self) -> float:
        return _DEFAULT_ALPHA[self.robustifier] if self.alpha is None else float(self.alpha)

    @property
    def initial_mu(self) -> float:
        if self.mu0 is not None:
            return float(self.mu0)
        if self.robustifier is Robustifier.GMC:
            return self.factor ** -(self.max_iters - 1)
        return 1.0

    def mu_at(self, k: int) -> float:
        return self.initial_mu * self.factor**k

    @property
    def terminal_mu(self) -> float:
        """``mu`` of the last weight update a full fit performs."""
        return self.mu_at(self.n_iterations - 1)

    @property
    def n_iterations(self) -> int:
        if self.robustifier is Robustifier.OLS:
            return 0
        k = 1
        while k < self.max_iters:
            if self.robustifier is Robustifier.GMC and self.mu_at(k) < 1 - 1e-9:
                break
            k += 1
        return k


def asymmetric_error(dh, r_asymm: float):
    dh = np.asarray(dh, dtype=float)
    out = np.where(dh > 0, r_asymm * dh, dh)
    return out if out.ndim else float(out)


def weight_gmc(dh_tilde, mu: float, c: float):
    dh = np.asarray(dh_tilde, dtype=float)
    mc2 = mu * c * c
    out = (mc2 / (mc2 + dh * dh)) ** 2
    return out if out.ndim else float(out)


def weight_tls(dh_tilde, mu: float, c: float):
    dh = np.abs(np.asarray(dh_tilde, dtype=float))
    d2 = dh * dh
    lower = mu / (mu + 1) * c * c
    upper = (mu + 1) / mu * c * c
    with np.errstate(divide="ignore"):
        mid = c * np.sqrt(mu * (mu + 1)) / dh - mu
    out = np.where(d2 < lower, 1.0, np.where(d2 > upper, 0.0, mid))
    out = np.clip(out, 0.0, 1.0)
    return out if out.ndim else float(out)


def penalty_gmc(w, mu: float, c: float) -> np.ndarray:
    return mu * c * c * (np.sqrt(w) - 1) ** 2


def penalty_tls(w, mu: float, c: float) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    return mu * (1 - w) / (mu + w) * c * c


def update_weights(dh, mu: float, cfg: RobustConfig) -> np.ndarray:
    """Optimal weights for residuals ``dh`` (point height above the surface)."""
    dh = np.asarray(dh, dtype=float)
    if cfg.robustifier is Robustifier.OLS:
        return np.ones_like(dh)
    dh_t = asymmetric_error(dh, cfg.r_asymm)
    if cfg.robustifier is Robustifier.GMC:
        return np.asarray(weight_gmc(dh_t, mu, cfg.c))
    return np.asarray(weight_tls(dh_t, mu, cfg.c))


def weight_penalty(w, mu: float, cfg: RobustConfig) -> float:
    if cfg.robustifier is Robustifier.GMC:
        return float(np.sum(penalty_gmc(w, mu, cfg.c)))
    if cfg.robustifier is Robustifier.TLS:
        return float(np.sum(penalty_tls(w, mu, cfg.c)))
    return 0.0


class NormalEquations:
    """Reusable sparse SPD solver for ``(B^T W B + w_S G + eps I) p = B^T W h``.

    The lower-triangular sparsity pattern is fixed at construction, so
    CHOLMOD's symbolic analysis runs once and every later :meth:`solve` only
    refactors numerically.  Any design whose ``B^T B`` pattern lies inside the
    fixed one may be passed.  Not safe to share between threads.
    """

    def __init__(self, pattern, gram=None, w_s: float = 0.0, ridge_eps: float = 0.0):
        n = pattern.shape[0]
        self.n = n
        self.w_s = float(w_s)
        self.ridge_eps = float(ridge_eps)
        self.gram = None
        pattern = sparse.csr_matrix(abs(pattern)) + sparse.identity(n, format="csr")
        if gram is not None:
            self.gram = sparse.csr_matrix(gram)
            if self.gram.shape != (n, n):
                raise ValueError(f"Gram shape {self.gram.shape} does not match {n} unknowns")
            pattern = pattern + abs(self.gram)
        low = sparse.tril(pattern, format="coo")
        keys = np.unique(low.col.astype(np.int64) * n + low.row)
        self._keys = keys
        self._rows = (keys % n).astype(int)
        self._cols = (keys // n).astype(int)
        self._fixed = np.zeros(len(keys))
        if self.gram is not None and self.w_s:
            g = sparse.tril(self.gram, format="coo")
            self._fixed += np.bincount(
                self._locate(g.row, g.col), weights=self.w_s * g.data, minlength=len(keys)
            )
        self._fixed[self._locate(np.arange(n), np.arange(n))] += self.ridge_eps
        self._factor = None
        self._cells = None

    @classmethod
    def for_matrix(cls, B, gram=None, w_s: float = 0.0, ridge_eps: float = 0.0) -> "NormalEquations":
        B = _as_csr(B)
        return cls(abs(B).T @ abs(B), gram, w_s, ridge_eps)

    @classmethod
    def for_lattice(cls, grid: ControlGrid, gram=None, w_s: float = 0.0,
                    ridge_eps: float = 0.0) -> "NormalEquations":
        """Pattern of every control point pair sharing a span cell."""
        cols = cell_columns(grid)
        k = cols.shape[1]
        ones = np.ones(cols.size)
        rows = np.repeat(np.arange(len(cols)), k)
        C = sparse.csr_matrix((ones, (rows, cols.ravel())), shape=(len(cols), grid.n_ctrl))
        out = cls(C.T @ C, gram, w_s, ridge_eps)
        a, b = np.tril_indices(k)
        slots = out._locate(cols[:, a], cols[:, b]).astype(np.int32)
        out._cells = (grid.dims[1], grid.degree, cols, slots)
        return out

    def _locate(self, rows, cols) -> np.ndarray:
        q = np.asarray(cols, dtype=np.int64) * self.n + np.asarray(rows, dtype=np.int64)
        pos = np.searchsorted(self._keys, q)
        pos = np.minimum(pos, len(self._keys) - 1)
        if np.any(self._keys[pos] != q):
            raise ValueError("design has entries outside the fixed sparsity pattern")
        return pos

    def positions(self, design: SparseDesign) -> np.ndarray:
        """Pattern slots of the lower-triangle products of each design row."""
        k = design.columns.shape[1]
        if self._cells is not None and design.n_rows:
            # Lattice designs: the slots depend only on the span cell of a row.
            n_v, deg, cols, slots = self._cells
            if k == cols.shape[1]:
                iu, iv = np.divmod(design.columns[:, 0], n_v)
                cell = iu * (n_v - deg) + iv
                if cell.min() >= 0 and cell.max() < len(cols) and np.array_equal(cols[cell], design.columns):
                    return slots[cell].ravel()
        a, b = np.tril_indices(k)
        # Columns within a design row are ascending, so (a >= b) is the lower triangle.
        pos = self._locate(design.columns[:, a].ravel(), design.columns[:, b].ravel())
        return pos.astype(np.int32) if len(self._keys) < 2**31 else pos

    def prepare(self, design: SparseDesign) -> Tuple[np.ndarray, np.ndarray]:
        """Weight-independent assembly data of a design: pattern slots and basis products."""
        a, b = np.tril_indices(design.columns.shape[1])
        return self.positions(design), np.take(design.weights, a, axis=1) * np.take(design.weights, b, axis=1)

    def matrix_values(self, B, w, prepared=None) -> np.ndarray:
        w = np.asarray(w, dtype=float)
        if isinstance(B, SparseDesign):
            pos, prod = prepared if prepared is not None else self.prepare(B)
            vals = (prod * w[:, None]).ravel()
        else:
            B = _as_csr(B)
            A = sparse.tril(B.T @ B.multiply(w[:, None]).tocsr(), format="coo")
            pos = self._locate(A.row, A.col)
            vals = A.data
        return np.bincount(pos, weights=vals, minlength=len(self._keys)) + self._fixed

    def matrix(self, B, w) -> sparse.csc_matrix:
        vals = self.matrix_values(B, w)
        low = sparse.coo_matrix((vals, (self._rows, self._cols)), shape=(self.n, self.n))
        return (low + sparse.tril(low, k=-1).T).tocsc()

    def solve(self, B, h, w, context: str = "", prepared=None) -> np.ndarray:
        h = np.asarray(h, dtype=float)
        w = np.asarray(w, dtype=float)
        if h.shape != (B.shape[0],) or w.shape != h.shape:
            raise ValueError(f"expected {B.shape[0]} heights and weights, got {h.shape} and {w.shape}")
        if B.shape[1] != self.n:
            raise ValueError(f"design has {B.shape[1]} columns, solver expects {self.n}")
        if np.any(w < 0):
            raise ValueError("weights must be non-negative")
        A = cvxopt.spmatrix(self.matrix_values(B, w, prepared), self._rows, self._cols, (self.n, self.n))
        try:
            if self._factor is None:
                self._factor = cvxopt.cholmod.symbolic(A, uplo="L")
            cvxopt.cholmod.numeric(A, self._factor)
        except ArithmeticError as exc:
            where = f" ({context})" if context else ""
            raise SolverError(
                f"normal matrix is not positive definite{where}: "
                f"{self.n} unknowns, {int(np.count_nonzero(w))} nonzero weights, "
                f"w_S={self.w_s}, ridge={self.ridge_eps}"
            ) from exc
        wh = w * h
        if isinstance(B, SparseDesign):
            rhs = np.bincount(B.columns.ravel(), weights=(B.weights * wh[:, None]).ravel(), minlength=self.n)
        else:
            rhs = _as_csr(B).T @ wh
        rhs = cvxopt.matrix(rhs)
        cvxopt.cholmod.solve(self._factor, rhs)
        return np.array(rhs).ravel()


def _as_csr(B) -> sparse.csr_matrix:
    return B.tocsr() if isinstance(B, SparseDesign) else sparse.csr_matrix(B)


def solve_wls(design, h, w, smoothness: Optional[SmoothnessOperator] = None, w_s: float = 0.0,
              ridge_eps: float = 1e-9) -> np.ndarray:
    """One-shot weighted least-squares solve of the stacked system.

    Minimizes ``sum_n w_n (B p - h)_n^2 + w_s ||B_S p||^2 + ridge_eps ||p||^2``;
    the zero-padded smoothness rows carry the constant weight ``w_s``.
    """
    gram = smoothness.gram if smoothness is not None else None
    return NormalEquations.for_matrix(design, gram, w_s, ridge_eps).solve(design, h, w)


@dataclass
class IterationRecord:
    k: int
    mu: float
    cost: float
    inlier_fraction: float
    weight_histogram: List[int]

    def to_json(self) -> str:
        return json.dumps(asdict(self))


@dataclass
class FitResult:
    """Fitted surface plus the per-point weights of the final solve.

    ``weights`` and ``residuals`` align with ``retained`` (indices into the
    input points); out-of-domain points are not part of the fit.
    """

    grid: ControlGrid
    weights: np.ndarray
    residuals: np.ndarray
    retained: np.ndarray
    n_dropped: int
    mu: float
    trace: List[IterationRecord] = field(default_factory=list)

    def write_trace(self, stream: IO[str]) -> None:
        for rec in self.trace:
            stream.write(rec.to_json() + "\n")


class LatticeSolver:
    """Smoothness operator and factorization pattern for one grid geometry.

    Reusing an instance across scans on the same lattice skips the symbolic
    analysis; create one per thread.
    """

    def __init__(self, grid: ControlGrid, cfg: RobustConfig):
        self.grid = grid.with_heights(np.zeros(grid.n_ctrl))
        self.cfg = cfg
        self.smoothness = smoothness_for(grid, cfg.smoothness_order) if cfg.w_s > 0 else None
        gram = self.smoothness.gram if self.smoothness is not None else None
        self.normal = NormalEquations.for_lattice(grid, gram, cfg.w_s, cfg.ridge_eps)

    def compatible(self, grid: ControlGrid, cfg: RobustConfig) -> bool:
        return (
            self.grid.same_geometry(grid)
            and (self.cfg.w_s, self.cfg.smoothness_order, self.cfg.ridge_eps)
            == (cfg.w_s, cfg.smoothness_order, cfg.ridge_eps)
        )


class SurfaceProblem:
    """Design and solver for a fixed point set and lattice."""

    def __init__(self, xy, h, grid: ControlGrid, cfg: RobustConfig,
                 solver: Optional[LatticeSolver] = None):
        xy = np.asarray(xy, dtype=float).reshape(-1, 2)
        h = np.asarray(h, dtype=float).reshape(-1)
        if len(xy) == 0:
            raise ValueError("cannot fit a surface to an empty point set")
        if len(xy) != len(h):
            raise ValueError(f"{len(xy)} positions but {len(h)} heights")
        if solver is None:
            solver = LatticeSolver(grid, cfg)
        elif not solver.compatible(grid, cfg):
            raise GeometryMismatchError("solver was built for a different lattice or smoothness setting")
        self.grid = grid
        self.cfg = cfg
        self.solver = solver
        self.smoothness = solver.smoothness
        self.design = build_design(grid, xy, drop_out_of_domain=True)
        if self.design.n_rows == 0:
            raise ValueError("no points inside the grid domain")
        if cfg.w_s == 0 and self.design.n_rows < grid.n_support:
            raise ValueError(
                f"{self.design.n_rows} points cannot determine a degree-{grid.degree} surface "
                f"without smoothness; need at least {grid.n_support} or w_s > 0"
            )
        if self.design.n_dropped:
            logger.debug("dropped %d out-of-domain points", self.design.n_dropped)
        self.h = h[self.design.retained]
        self._prepared = solver.normal.prepare(self.design)

    def solve(self, w, context: str = "") -> np.ndarray:
        return self.solver.normal.solve(self.design, self.h, w, context, self._prepared)

    def residuals(self, p) -> np.ndarray:
        """Point height above the surface."""
        return self.h - self.design.dot(p)

    def objective(self, p, w, mu: float) -> float:
        r = self.residuals(p)
        cost = float(np.sum(w * r * r)) + weight_penalty(w, mu, self.cfg)
        if self.smoothness is not None:
            cost += self.cfg.w_s * float(p @ (self.smoothness.gram @ p))
        return cost + self.cfg.ridge_eps * float(p @ p)

    def record(self, k: int, p, w, mu: float) -> IterationRecord:
        hist, _ = np.histogram(w, bins=10, range=(0.0, 1.0))
        return IterationRecord(
            k=k,
            mu=float(mu),
            cost=self.objective(p, w, mu),
            inlier_fraction=float(np.mean(w > 0.5)),
            weight_histogram=hist.tolist(),
        )

    def result(self, p, w, mu: float, trace) -> FitResult:
        return FitResult(
            grid=self.grid.with_heights(p),
            weights=w,
            residuals=self.residuals(p),
            retained=self.design.retained,
            n_dropped=self.design.n_dropped,
            mu=mu,
            trace=trace,
        )


def gnc_fit(points, grid: ControlGrid, cfg: RobustConfig = RobustConfig(),
            solver: Optional[LatticeSolver] = None) -> FitResult:
    """Robust spline fit by graduated non-convexity.

    ``points`` is a :class:`~groundspline.dataset.PointCloud` (or any object
    with ``xy`` and ``h``).  ``grid`` supplies the lattice geometry; its
    heights are ignored.  The first solve is unweighted; then each iteration
    updates the weights at the current ``mu``, re-solves, and advances ``mu``.
    """
    prob = SurfaceProblem(points.xy, points.h, grid, cfg, solver)
    w = np.ones(prob.design.n_rows)
    p = prob.solve(w, "initial solve")
    trace = [prob.record(0, p, w, cfg.initial_mu)]
    mu = cfg.initial_mu
    for k in range(cfg.n_iterations):
        mu = cfg.mu_at(k)
        w = update_weights(prob.residuals(p), mu, cfg)
        p = prob.solve(w, f"iteration {k + 1}, mu={mu:.6g}")
        trace.append(prob.record(k + 1, p, w, mu))
    return prob.result(p, w, mu, trace)


def warm_start_step(points, prev: ControlGrid, cfg: RobustConfig = RobustConfig(),
                    geometry: Optional[ControlGrid] = None,
                    solver: Optional[LatticeSolver] = None) -> FitResult:
    """Single reweighted solve seeded with a previous surface.

    Weights come from the residuals of ``prev`` at the terminal ``mu`` of a
    full fit.  When ``geometry`` is given, ``prev`` must share its lattice.
    """
    if geometry is not None:
        geometry.check_geometry(prev)
    prob = SurfaceProblem(points.xy, points.h, prev, cfg, solver)
    mu = cfg.terminal_mu if cfg.robustifier is not Robustifier.OLS else 0.0
    w = update_weights(prob.residuals(prev.p), mu, cfg)
    p = prob.solve(w, "warm start")
    return prob.result(p, w, mu, [prob.record(1, p, w, mu)])
