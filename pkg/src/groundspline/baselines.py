"""Polynomial and plane ground models used as comparison baselines."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .robust import RobustConfig, update_weights


class RankDeficientError(np.linalg.LinAlgError):
    pass


def monomial_exponents(degree: int) -> List[Tuple[int, int]]:
    """Exponents ``(a, b)`` of ``x1**a * x2**b`` with ``a + b <= degree``.

    Ordered by total degree, mixed terms first: 1, x1, x2, x1 x2, x1^2, x2^2, ...
    """
    out = [(0, 0)]
    for total in range(1, degree + 1):
        mixed = [(a, total - a) for a in range(total - 1, 0, -1)]
        out.extend(mixed + [(total, 0), (0, total)])
    return out


def features(xy, degree: int) -> np.ndarray:
    xy = np.atleast_2d(np.asarray(xy, dtype=float))
    return np.column_stack([xy[:, 0] ** a * xy[:, 1] ** b for a, b in monomial_exponents(degree)])


@dataclass(frozen=True)
class PolynomialSurface:
    degree: int
    coef: np.ndarray

    def __post_init__(self):
        coef = np.asarray(self.coef, dtype=float).reshape(-1)
        n = len(monomial_exponents(self.degree))
        if len(coef) != n:
            raise ValueError(f"degree {self.degree} needs {n} coefficients, got {len(coef)}")
        object.__setattr__(self, "coef", coef)

    def predict(self, xy) -> np.ndarray:
        return features(xy, self.degree) @ self.coef


def predict_poly(surface: PolynomialSurface, x) -> float:
    return float(surface.predict(np.reshape(x, (1, 2)))[0])


def _weighted_lstsq(F: np.ndarray, h: np.ndarray, w: Optional[np.ndarray], degree: int) -> np.ndarray:
    if w is not None:
        sw = np.sqrt(w)
        F = F * sw[:, None]
        h = h * sw
    # Column scaling keeps cubic terms of 50 m coordinates well conditioned.
    scale = np.linalg.norm(F, axis=0)
    scale[scale == 0] = 1.0
    sol, _, rank, sv = np.linalg.lstsq(F / scale, h, rcond=None)
    n = F.shape[1]
    if rank < n or len(h) < n:
        raise RankDeficientError(
            f"degree-{degree} polynomial needs {n} independent monomials, design has rank {rank} "
            f"from {len(h)} points"
        )
    cond_tol = max(F.shape) * np.finfo(float).eps * sv[0]
    if sv[-1] <= cond_tol:
        raise RankDeficientError(f"degree-{degree} design is numerically singular")
    return sol / scale


def fit_polynomial(points, degree: int = 3, weights=None) -> PolynomialSurface:
    """Least-squares fit of a bivariate polynomial of total degree ``degree``."""
    F = features(points.xy, degree)
    h = np.asarray(points.h, dtype=float)
    w = None if weights is None else np.asarray(weights, dtype=float)
    return PolynomialSurface(degree, _weighted_lstsq(F, h, w, degree))


def fit_plane(points) -> PolynomialSurface:
    return fit_polynomial(points, 1)


def fit_polynomial_robust(points, degree: int, cfg: RobustConfig = RobustConfig()) -> PolynomialSurface:
    """Polynomial fit wrapped in the same graduated non-convexity schedule."""
    F = features(points.xy, degree)
    h = np.asarray(points.h, dtype=float)
    coef = _weighted_lstsq(F, h, None, degree)
    for k in range(cfg.n_iterations):
        w = update_weights(h - F @ coef, cfg.mu_at(k), cfg)
        coef = _weighted_lstsq(F, h, w, degree)
    return PolynomialSurface(degree, coef)


@dataclass(frozen=True)
class CalibratedPlane:
    """Fixed ground plane ``height + slope_x*x1 + slope_y*x2``; never fitted."""

    height: float = -1.73
    slope_x: float = 0.0
    slope_y: float = 0.0

    def __post_init__(self):
        if not np.all(np.isfinite([self.height, self.slope_x, self.slope_y])):
            raise ValueError("calibrated plane coefficients must be finite")

    def predict(self, xy) -> np.ndarray:
        xy = np.atleast_2d(np.asarray(xy, dtype=float))
        return self.height + self.slope_x * xy[:, 0] + self.slope_y * xy[:, 1]
