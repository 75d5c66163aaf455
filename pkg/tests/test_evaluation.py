import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from groundspline.dataset import Box, Category, OutlierHeights, PointCloud, TerrainSpec, ground_height, synth_terrain
from groundspline.evaluation import (SplitSeed, StudyCell, abs_error_report, aggregate,
                                     asymmetry_study, classify_ground, evaluate_cell, grid_study, holdout_split,
                                     model_study, outlier_histogram, precision_recall, robustifier_study, sweep,
                                     write_results_table)
from groundspline.robust import gnc_fit
from groundspline.spline import grid_for_points


class Truth:
    """Exact ground function of a synthetic spec, with an optional offset."""

    def __init__(self, spec, offset=0.0):
        self.spec, self.offset = spec, offset

    def predict(self, xy):
        return ground_height(self.spec, xy) + self.offset


def labeled(n=2000, frac=0.3, seed=0, **kw):
    spec = TerrainSpec(n_points=n, outlier_fraction=frac, seed=seed, **kw)
    return spec, synth_terrain(spec)


# --- split ------------------------------------------------------------------------


def test_split_sizes_and_determinism():
    pc = synth_terrain(TerrainSpec(n_points=1000))
    train, val = holdout_split(pc, SplitSeed(4))
    assert len(val) == 100 and len(train) == 900
    again_train, again_val = holdout_split(pc, SplitSeed(4))
    assert np.array_equal(val.xy, again_val.xy) and np.array_equal(train.h, again_train.h)
    _, other = holdout_split(pc, SplitSeed(5))
    assert not np.array_equal(val.xy, other.xy)


def test_split_modes_and_dont_care():
    _, pc = labeled(frac=0.4)
    pc.category[:50] = Category.DONT_CARE
    n_ground = int(np.count_nonzero(pc.category == Category.GROUND))
    n_non = int(np.count_nonzero(pc.category == Category.NON_GROUND))
    tg, vg = holdout_split(pc, mode="ground")
    ta, va = holdout_split(pc, mode="all")
    assert np.all(vg.category == Category.GROUND) and np.all(tg.category == Category.GROUND)
    assert len(tg) + len(vg) == n_ground
    assert len(ta) + len(va) == n_ground + n_non
    assert np.array_equal(va.xy, vg.xy)
    assert not np.any(ta.category == Category.DONT_CARE)
    with pytest.raises(ValueError):
        holdout_split(pc, mode="some")


@pytest.mark.parametrize("fraction", [0.0, 1.0, -0.1, 1.5])
def test_split_fraction_bounds(fraction):
    with pytest.raises(ValueError):
        SplitSeed(0, fraction)


def test_split_needs_ground():
    pc = PointCloud(np.zeros((3, 2)), np.zeros(3), np.full(3, Category.NON_GROUND))
    with pytest.raises(ValueError, match="no ground"):
        holdout_split(pc)


# --- reports ----------------------------------------------------------------------


def test_report_of_exact_surface_is_zero():
    spec, pc = labeled(ground="sine", frac=0.0, noise_sigma=0.0, extent=(-40, -40, 40, 40))
    rep = abs_error_report(Truth(spec), pc)
    assert rep.mae == 0.0
    assert all(m in (None, 0.0) for m in rep.bin_mae)


def test_constant_offset_in_every_bin():
    spec, pc = labeled(frac=0.0, noise_sigma=0.0, extent=(-40, -40, 40, 40), n=5000)
    rep = abs_error_report(Truth(spec, 0.03), pc)
    assert rep.mae == pytest.approx(0.03, abs=1e-12)
    occupied = [m for m in rep.bin_mae if m is not None]
    assert len(occupied) == 10
    np.testing.assert_allclose(occupied, 0.03, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(5, 80))
def test_bins_partition_points_within_range(seed, half):
    spec, pc = labeled(frac=0.0, seed=seed, extent=(-half, -half, half, half), n=500)
    rep = abs_error_report(Truth(spec, 0.01), pc)
    within = np.hypot(pc.xy[:, 0], pc.xy[:, 1]) < 50
    assert sum(rep.bin_count) == np.count_nonzero(within)
    assert rep.count == len(pc)
    assert all((m is None) == (n == 0) for m, n in zip(rep.bin_mae, rep.bin_count))
    assert rep.bin_edges == [0, 5, 10, 15, 20, 25, 30, 35, 40, 45]


def test_report_domain_handling():
    g = grid_for_points([[0, 0], [10, 10]], 2.0)
    far = PointCloud([[500.0, 500.0], [1.0, 1.0]], [0.0, 0.0])
    rep = abs_error_report(g, far)
    assert rep.n_out_of_domain == 1 and rep.count == 1
    with pytest.raises(ValueError, match="outside"):
        abs_error_report(g, far.subset([0]))
    with pytest.raises(ValueError, match="empty"):
        abs_error_report(g, far.subset([]))


def test_aggregate_weights_by_count():
    spec, pc = labeled(frac=0.0, noise_sigma=0.0, n=400)
    a = abs_error_report(Truth(spec, 0.01), pc.subset(np.arange(100)))
    b = abs_error_report(Truth(spec, 0.04), pc.subset(np.arange(100, 400)))
    agg = aggregate([a, b])
    assert agg.mae == pytest.approx((0.01 * 100 + 0.04 * 300) / 400)
    assert agg.count == 400
    assert sum(agg.bin_count) == sum(a.bin_count) + sum(b.bin_count)


def test_reports_are_reproducible():
    scans = [labeled(frac=0.3, seed=s, ground="sine")[1] for s in range(2)]
    cell = StudyCell((("model", "ubs"),), mode="all")
    a = evaluate_cell(cell, scans, SplitSeed(3))
    b = evaluate_cell(cell, scans, SplitSeed(3))
    assert a == b


# --- histogram --------------------------------------------------------------------


def test_histogram_single_bin():
    spec = TerrainSpec()
    pc = PointCloud(np.random.default_rng(0).uniform(-10, 10, (50, 2)), np.ones(50))
    hist = outlier_histogram(Truth(spec), pc)
    assert len(hist.frequency) == 1
    assert hist.edges[0] == pytest.approx(1.0) and hist.frequency[0] == 1.0
    assert hist.mean == pytest.approx(1.0)


def test_histogram_normalized_and_mean():
    spec, pc = labeled(frac=0.5, n=20000, noise_sigma=0.0, outliers=OutlierHeights("gamma", 1.09, 3.0))
    ng = pc.subset(pc.mask(Category.NON_GROUND))
    hist = outlier_histogram(Truth(spec), ng)
    assert abs(hist.frequency.sum() - 1) <= 1e-12
    assert hist.mean == pytest.approx(1.09, rel=0.05)
    np.testing.assert_allclose(np.diff(hist.edges), 0.1)
    with pytest.raises(ValueError):
        outlier_histogram(Truth(spec), ng.subset([]))


# --- classification ---------------------------------------------------------------


def test_classify_band():
    spec = TerrainSpec()
    pc = PointCloud([[0, 0], [1, 1], [2, 2], [3, 3]], [0.05, 0.5, -0.05, -0.4])
    out = classify_ground(Truth(spec), pc, 0.10)
    assert out.ground.tolist() == [True, False, True, False]
    g = grid_for_points([[0, 0], [5, 5]], 1.0)
    ood = classify_ground(g, PointCloud([[1, 1], [90, 0]], [0.0, 0.0]))
    assert ood.ground.tolist() == [True, False] and ood.out_of_domain.tolist() == [False, True]


def test_classification_on_synthetic_scene():
    spec = TerrainSpec(ground="sine", n_points=40000, outlier_fraction=0.3,
                       outliers=OutlierHeights("gamma", 1.09, 3.0), boxes=(Box(5, 5, 9, 8, 2.0),), seed=1)
    pc = synth_terrain(spec)
    res = gnc_fit(pc, grid_for_points(pc.xy, 2.0))
    precision, recall = precision_recall(classify_ground(res.grid, pc).ground, pc)
    assert precision >= 0.95 and recall >= 0.95


def test_precision_recall_ignores_dont_care():
    pc = PointCloud(np.zeros((4, 2)), np.zeros(4),
                    [Category.GROUND, Category.NON_GROUND, Category.DONT_CARE, Category.GROUND])
    p, r = precision_recall(np.array([True, True, True, False]), pc)
    assert p == pytest.approx(0.5) and r == pytest.approx(0.5)


# --- studies ----------------------------------------------------------------------


def test_study_definitions():
    assert [c.model for c in model_study()] == ["ubs", "poly", "plane", "calibrated"]
    rob = robustifier_study(modes=("all",), thresholds=(0.4,))
    assert [c.name for c in rob] == ["mode=all,robustifier=ols", "mode=all,robustifier=tls,c=0.4",
                                     "mode=all,robustifier=gmc,c=0.4"]
    assert [c.robust.r_asymm for c in asymmetry_study()] == [2.5, 2.0, 1.5, 1.0]
    cells = grid_study()
    assert len(cells) == 9 and (cells[0].d_c, cells[0].robust.w_s) == (2.0, 1.0)


def test_sweep_records_failures_and_continues():
    scans = [labeled(seed=1)[1]]
    cells = [StudyCell((("model", "bogus"),), model="bogus"), StudyCell((("model", "plane"),), model="plane")]
    reps = sweep(cells, scans)
    assert reps[0].error and math.isnan(reps[0].mae) and reps[0].count == 0
    assert reps[1].error is None and reps[1].mae > 0
    with pytest.raises(ValueError):
        sweep(cells, [])


def test_results_table_format(tmp_path):
    scans = [labeled(seed=1)[1]]
    reps = sweep(model_study()[:2] + [StudyCell((("model", "bogus"),), model="bogus")], scans)
    path = tmp_path / "r.tsv"
    write_results_table(path, reps, "models")
    rows = list(csv.reader(open(path), delimiter="\t"))
    assert rows[0] == ["study", "model", "bin", "mae_m", "count", "error"]
    assert len(rows) == 1 + 3 * 11
    assert rows[1][:3] == ["models", "ubs", "all"] and float(rows[1][3]) > 0
    assert rows[2][2] == "0"
    bad = [r for r in rows if r[1] == "bogus" and r[2] == "all"][0]
    assert bad[3] == "" and bad[5]


def test_ground_only_error_near_noise_level():
    sigma = 0.02
    scans = [synth_terrain(TerrainSpec(ground="sine", n_points=30000, noise_sigma=sigma, seed=s)) for s in range(3)]
    rep = evaluate_cell(StudyCell((("model", "ubs"),)), scans)
    # Gaussian mean absolute deviation, inflated slightly by the fit's own error.
    mad = sigma * math.sqrt(2 / math.pi)
    assert mad * 0.95 <= rep.mae <= mad * 1.10


def test_synthetic_model_ordering():
    wins = 0
    for s in range(10):
        scan = synth_terrain(TerrainSpec(ground="sine", amplitude=0.3, n_points=8000, sampling="radial",
                                         extent=(-40, -40, 40, 40), seed=100 + s))
        reps = {r.model: r.mae for r in sweep(model_study()[:3], [scan])}
        wins += reps["ubs"] <= reps["poly"] <= reps["plane"]
    assert wins >= 8


def test_all_points_error_exceeds_ground_only():
    scans = [labeled(frac=0.4, seed=s, ground="sine", n=10000, outliers=OutlierHeights("gamma", 1.09, 3.0))[1]
             for s in range(2)]
    g = evaluate_cell(StudyCell((("mode", "ground"),), mode="ground"), scans)
    a = evaluate_cell(StudyCell((("mode", "all"),), mode="all"), scans)
    assert a.mae >= g.mae


def test_fixed_extent_cell():
    _, pc = labeled(seed=2)
    cell = StudyCell((("model", "ubs"),), extent=(-25, -25, 25, 25))
    rep = evaluate_cell(cell, [pc])
    assert rep.error is None and rep.n_out_of_domain == 0
