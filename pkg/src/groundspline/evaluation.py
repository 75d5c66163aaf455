"""Holdout accuracy studies, outlier histograms and ground classification."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .baselines import CalibratedPlane, fit_polynomial, fit_polynomial_robust
from .dataset import Category, PointCloud
from .robust import RobustConfig, Robustifier, gnc_fit
from .spline import grid_for_points, grid_from_bounds

logger = logging.getLogger(__name__)

BIN_WIDTH = 5.0
MAX_DISTANCE = 50.0


@dataclass(frozen=True)
class SplitSeed:
    seed: int = 0
    fraction: float = 0.10

    def __post_init__(self):
        if not 0.0 < self.fraction < 1.0:
            raise ValueError(f"holdout fraction must lie in (0, 1), got {self.fraction}")


def holdout_split(cloud: PointCloud, split: SplitSeed = SplitSeed(), mode: str = "ground"
                  ) -> Tuple[PointCloud, PointCloud]:
    """Hold out a uniform fraction of the ground points for validation.

    ``mode="ground"`` trains on the remaining ground points only,
    ``mode="all"`` adds every non-ground point.  Don't-care points never
    enter either set.
    """
    if mode not in ("ground", "all"):
        raise ValueError(f"unknown split mode {mode!r}")
    ground = np.flatnonzero(cloud.mask(Category.GROUND))
    if len(ground) == 0:
        raise ValueError("cloud has no ground points to validate on")
    rng = np.random.default_rng(split.seed)
    n_val = int(round(split.fraction * len(ground)))
    chosen = np.zeros(len(ground), dtype=bool)
    chosen[rng.choice(len(ground), n_val, replace=False)] = True
    val_idx = ground[chosen]
    train_idx = ground[~chosen]
    if mode == "all":
        train_idx = np.sort(np.concatenate([train_idx, np.flatnonzero(cloud.mask(Category.NON_GROUND))]))
    return cloud.subset(train_idx), cloud.subset(val_idx)


@dataclass
class EvalReport:
    """Mean absolute height error, overall and per distance bin.

    ``bin_mae[i]`` is ``None`` for an empty bin.  Points farther than the
    last bin edge count towards ``mae`` only.
    """

    model: str
    mae: float
    count: int
    bin_edges: List[float]
    bin_mae: List[Optional[float]]
    bin_count: List[int]
    n_out_of_domain: int = 0
    config: Dict = field(default_factory=dict)
    error: Optional[str] = None

    def bin_sums(self) -> List[float]:
        return [0.0 if m is None else m * n for m, n in zip(self.bin_mae, self.bin_count)]


def _bin_edges(bin_width: float, max_distance: float) -> np.ndarray:
    return np.arange(0.0, max_distance + 0.5 * bin_width, bin_width)


def _report_from_errors(model: str, err: np.ndarray, dist: np.ndarray, edges: np.ndarray,
                        n_out: int = 0, config=None) -> EvalReport:
    idx = np.floor(dist / (edges[1] - edges[0])).astype(int)
    n_bins = len(edges) - 1
    inside = idx < n_bins
    counts = np.bincount(idx[inside], minlength=n_bins)
    sums = np.bincount(idx[inside], weights=err[inside], minlength=n_bins)
    bin_mae = [float(s / c) if c else None for s, c in zip(sums, counts)]
    return EvalReport(model, float(err.mean()), int(len(err)), edges[:-1].tolist(), bin_mae,
                      counts.tolist(), n_out, dict(config or {}))


def abs_error_report(surface, validation: PointCloud, model: str = "ubs",
                     bin_width: float = BIN_WIDTH, max_distance: float = MAX_DISTANCE,
                     config=None) -> EvalReport:
    if len(validation) == 0:
        raise ValueError("validation set is empty")
    pred = np.asarray(surface.predict(validation.xy), dtype=float)
    ok = np.isfinite(pred)
    if not ok.any():
        raise ValueError("all validation points lie outside the surface domain")
    err = np.abs(pred[ok] - validation.h[ok])
    dist = np.hypot(validation.xy[ok, 0], validation.xy[ok, 1])
    return _report_from_errors(model, err, dist, _bin_edges(bin_width, max_distance),
                               int(np.count_nonzero(~ok)), config)


def aggregate(reports: Sequence[EvalReport], model: Optional[str] = None) -> EvalReport:
    """Sample-count weighted combination of per-scan reports."""
    good = [r for r in reports if r.error is None and r.count]
    if not good:
        raise ValueError("no successful reports to aggregate")
    edges = good[0].bin_edges
    total = sum(r.count for r in good)
    mae = sum(r.mae * r.count for r in good) / total
    counts = np.sum([r.bin_count for r in good], axis=0)
    sums = np.sum([r.bin_sums() for r in good], axis=0)
    bin_mae = [float(s / c) if c else None for s, c in zip(sums, counts)]
    return EvalReport(model or good[0].model, float(mae), int(total), list(edges), bin_mae,
                      counts.tolist(), sum(r.n_out_of_domain for r in good), dict(good[0].config))


@dataclass
class Histogram:
    edges: np.ndarray
    frequency: np.ndarray
    mean: float
    count: int

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[:-1] + self.edges[1:])


def outlier_histogram(surface, nonground: PointCloud, bin_width: float = 0.1) -> Histogram:
    """Relative frequency of non-ground point heights above the surface.

    Bins are ``[k*bin_width, (k+1)*bin_width)``.
    """
    if len(nonground) == 0:
        raise ValueError("no non-ground points")
    d = nonground.h - surface.predict(nonground.xy)
    d = d[np.isfinite(d)]
    if len(d) == 0:
        raise ValueError("no non-ground points inside the surface domain")
    # Snap values within roundoff of a bin edge onto that edge.
    k = np.floor(d / bin_width + 1e-9).astype(int)
    k0 = k.min()
    counts = np.bincount(k - k0)
    edges = (np.arange(k0, k0 + len(counts) + 1)) * bin_width
    return Histogram(edges, counts / len(d), float(d.mean()), int(len(d)))


@dataclass
class Classification:
    ground: np.ndarray
    out_of_domain: np.ndarray


def classify_ground(surface, cloud: PointCloud, threshold: float = 0.10) -> Classification:
    """Ground iff within ``threshold`` of the surface on either side.

    Points outside the surface domain are obstacles and flagged.
    """
    pred = np.asarray(surface.predict(cloud.xy), dtype=float)
    ood = ~np.isfinite(pred)
    dist = np.abs(cloud.h - np.where(ood, 0.0, pred))
    return Classification((dist < threshold) & ~ood, ood)


def precision_recall(pred_ground: np.ndarray, cloud: PointCloud) -> Tuple[float, float]:
    """Ground-class precision and recall, ignoring don't-care points."""
    care = ~cloud.mask(Category.DONT_CARE)
    truth = cloud.mask(Category.GROUND)[care]
    pred = np.asarray(pred_ground)[care]
    tp = np.count_nonzero(pred & truth)
    precision = tp / max(1, np.count_nonzero(pred))
    recall = tp / max(1, np.count_nonzero(truth))
    return float(precision), float(recall)


# --- sweeps -------------------------------------------------------------------


@dataclass(frozen=True)
class StudyCell:
    """One configuration of a comparison study.

    model: ``ubs``, ``poly`` (cubic), ``plane`` or ``calibrated``.
    mode: training set, ``ground`` or ``all`` (see :func:`holdout_split`).
    extent: fixed lattice bounds ``(x0, y0, x1, y1)``; ``None`` sizes the
    lattice to each training set.
    """

    key: Tuple[Tuple[str, object], ...]
    model: str = "ubs"
    mode: str = "ground"
    robust: RobustConfig = RobustConfig()
    d_c: float = 2.0
    degree: int = 2
    robust_baselines: bool = False
    calibrated: CalibratedPlane = CalibratedPlane()
    extent: Optional[Tuple[float, float, float, float]] = None

    @property
    def name(self) -> str:
        return ",".join(f"{k}={v}" for k, v in self.key)


def fit_model(cell: StudyCell, train: PointCloud):
    if cell.model == "ubs":
        if cell.extent is None:
            grid = grid_for_points(train.xy, cell.d_c, cell.degree)
        else:
            grid = grid_from_bounds(cell.extent[:2], cell.extent[2:], cell.d_c, cell.degree)
        return gnc_fit(train, grid, cell.robust).grid
    if cell.model in ("poly", "plane"):
        degree = 3 if cell.model == "poly" else 1
        if cell.robust_baselines and cell.robust.robustifier is not Robustifier.OLS:
            return fit_polynomial_robust(train, degree, cell.robust)
        return fit_polynomial(train, degree)
    if cell.model == "calibrated":
        return cell.calibrated
    raise ValueError(f"unknown surface model {cell.model!r}")


def evaluate_cell(cell: StudyCell, scans: Sequence[PointCloud], split: SplitSeed = SplitSeed(),
                  bin_width: float = BIN_WIDTH, max_distance: float = MAX_DISTANCE) -> EvalReport:
    per_scan = []
    for i, scan in enumerate(scans):
        seed = SplitSeed(split.seed + i, split.fraction)
        train, val = holdout_split(scan, seed, cell.mode)
        surface = fit_model(cell, train)
        per_scan.append(abs_error_report(surface, val, cell.model, bin_width, max_distance))
    rep = aggregate(per_scan, cell.model)
    rep.config = dict(cell.key)
    return rep


def sweep(cells: Iterable[StudyCell], scans: Sequence[PointCloud], split: SplitSeed = SplitSeed(),
          bin_width: float = BIN_WIDTH, max_distance: float = MAX_DISTANCE) -> List[EvalReport]:
    """Evaluate every cell on every scan; a failing cell is recorded, not raised."""
    if not scans:
        raise ValueError("sweep needs at least one scan")
    out = []
    for cell in cells:
        try:
            out.append(evaluate_cell(cell, scans, split, bin_width, max_distance))
        except Exception as exc:  # noqa: BLE001 - one bad cell must not abort the study
            logger.warning("study cell %s failed: %s", cell.name, exc)
            edges = _bin_edges(bin_width, max_distance)[:-1].tolist()
            out.append(EvalReport(cell.model, math.nan, 0, edges, [None] * len(edges),
                                  [0] * len(edges), config=dict(cell.key), error=str(exc)))
    return out


def model_study(robust: RobustConfig = RobustConfig(), calibrated: CalibratedPlane = CalibratedPlane()
                ) -> List[StudyCell]:
    return [StudyCell((("model", m),), model=m, robust=robust, calibrated=calibrated)
            for m in ("ubs", "poly", "plane", "calibrated")]


def robustifier_study(robust: RobustConfig = RobustConfig(), modes=("ground", "all"),
                      thresholds=(1.0, 0.6, 0.4, 0.2)) -> List[StudyCell]:
    cells = []
    for mode in modes:
        ols = RobustConfig(Robustifier.OLS, w_s=robust.w_s, r_asymm=robust.r_asymm)
        cells.append(StudyCell((("mode", mode), ("robustifier", "ols")), mode=mode, robust=ols))
        for c in thresholds:
            for rob in (Robustifier.TLS, Robustifier.GMC):
                cfg = RobustConfig(rob, c=c, max_iters=robust.max_iters, r_asymm=robust.r_asymm,
                                   w_s=robust.w_s)
                cells.append(StudyCell((("mode", mode), ("robustifier", rob.value), ("c", c)),
                                       mode=mode, robust=cfg))
    return cells


def asymmetry_study(robust: RobustConfig = RobustConfig(), ratios=(2.5, 2.0, 1.5, 1.0)) -> List[StudyCell]:
    return [StudyCell((("r_asymm", r),), mode="all", robust=replace(robust, r_asymm=r)) for r in ratios]


GRID_STUDY = ((2, 1), (2, 2), (2, 10), (5, 2), (5, 5), (5, 10), (10, 1), (10, 5), (10, 10))


def grid_study(robust: RobustConfig = RobustConfig(), pairs=GRID_STUDY, mode: str = "all") -> List[StudyCell]:
    return [StudyCell((("d_c", float(d)), ("w_s", float(w))), mode=mode, robust=replace(robust, w_s=float(w)),
                      d_c=float(d)) for d, w in pairs]


def write_results_table(path, reports: Sequence[EvalReport], study: str = "") -> None:
    """One row per (cell, bin) plus an ``all`` row per cell, tab separated."""
    keys: List[str] = []
    for r in reports:
        for k in r.config:
            if k not in keys and k != "model":
                keys.append(k)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t")
        w.writerow(["study", *keys, "model", "bin", "mae_m", "count", "error"])
        for r in reports:
            head = [study, *[r.config.get(k, "") for k in keys], r.model]
            w.writerow([*head, "all", "" if math.isnan(r.mae) else f"{r.mae:.6f}", r.count, r.error or ""])
            for lo, m, n in zip(r.bin_edges, r.bin_mae, r.bin_count):
                w.writerow([*head, f"{lo:g}", "" if m is None else f"{m:.6f}", n, ""])
