import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from groundspline.dataset import Box, PointCloud, TerrainSpec, ground_height, synth_terrain
from groundspline.gridmap import RasterSpec, rasterize, read_height_grid
from groundspline.robust import gnc_fit
from groundspline.spline import grid_for_points


class Flat:
    def __init__(self, z=0.0):
        self.z = z

    def predict(self, xy):
        return np.full(len(np.atleast_2d(xy)), self.z)


def test_empty_cloud():
    spec = RasterSpec((0.0, 0.0), 0.5, (4, 3))
    hg = rasterize(Flat(0.2), PointCloud(np.zeros((0, 2)), np.zeros(0)), spec)
    assert np.all(np.isnan(hg.limit))
    np.testing.assert_array_equal(hg.combined, hg.ground)
    np.testing.assert_array_equal(hg.ground, 0.2)


def test_single_point_limit():
    spec = RasterSpec((0.0, 0.0), 0.5, (4, 4))
    hg = rasterize(Flat(), PointCloud([[0.75, 1.1]], [1.7]), spec)
    assert hg.limit[1, 2] == pytest.approx(1.7)
    assert np.count_nonzero(~np.isnan(hg.limit)) == 1
    assert hg.combined[1, 2] == pytest.approx(1.7)


def test_points_below_ground_clamp_to_zero():
    hg = rasterize(Flat(1.0), PointCloud([[0.1, 0.1]], [0.2]), RasterSpec((0.0, 0.0), 0.5, (2, 2)))
    assert hg.limit[0, 0] == 0.0 and hg.combined[0, 0] == 1.0


def test_box_on_flat_ground():
    box = Box(4.0, 4.0, 8.0, 6.0, 2.0)
    spec = TerrainSpec(n_points=60000, extent=(-10, -10, 15, 15), boxes=(box,), seed=3)
    pc = synth_terrain(spec)
    surface = gnc_fit(pc, grid_for_points(pc.xy, 2.0)).grid
    raster = RasterSpec.covering((-10, -10), (15, 15), 0.5)
    hg = rasterize(surface, pc, raster)
    c = raster.centers().reshape(*raster.dims, 2)
    on_box = box.contains(c.reshape(-1, 2)).reshape(raster.dims)
    # Cells strictly inside the footprint, away from its edges.
    core = on_box & (c[..., 0] > 4.5) & (c[..., 0] < 7.5) & (c[..., 1] > 4.5) & (c[..., 1] < 5.5)
    road = (~on_box) & (np.hypot(c[..., 0] - 6, c[..., 1] - 5) > 6) & ~np.isnan(hg.limit)
    assert core.sum() >= 10
    np.testing.assert_allclose(hg.limit[core], 2.0, atol=0.15)
    assert np.nanmedian(hg.limit[road]) < 0.05
    assert np.nanmax(hg.limit[road]) < 0.15


def test_combined_at_least_ground():
    spec = TerrainSpec(ground="sine", n_points=5000, outlier_fraction=0.3, seed=4)
    pc = synth_terrain(spec)
    truth = Flat()
    truth.predict = lambda xy: ground_height(spec, xy)
    hg = rasterize(truth, pc.subset(np.flatnonzero(pc.xy[:, 0] < 10)), RasterSpec.covering((-20, -20), (20, 20), 1.0))
    assert np.all(hg.combined >= hg.ground)
    empty = np.isnan(hg.limit)
    assert empty.any()
    np.testing.assert_array_equal(hg.combined[empty], hg.ground[empty])
    assert np.all(hg.combined[hg.limit > 0] > hg.ground[hg.limit > 0])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    pc = PointCloud(rng.uniform(0, 5, (300, 2)), rng.normal(size=300))
    perm = rng.permutation(300)
    spec = RasterSpec((0.0, 0.0), 0.5, (10, 10))
    a = rasterize(Flat(), pc, spec)
    b = rasterize(Flat(), pc.subset(perm), spec)
    np.testing.assert_array_equal(a.limit, b.limit)


def test_write_and_read(tmp_path):
    rng = np.random.default_rng(1)
    pc = PointCloud(rng.uniform(0, 3, (40, 2)), rng.uniform(0, 2, 40))
    hg = rasterize(Flat(0.25), pc, RasterSpec((0.0, 0.0), 0.5, (6, 6)))
    side = hg.write(tmp_path / "m.f32")
    assert "layers ground limit combined" in side.read_text()
    assert (tmp_path / "m.f32").stat().st_size == 3 * 36 * 4
    back = read_height_grid(tmp_path / "m.f32")
    assert back.spec == hg.spec
    np.testing.assert_array_equal(back.ground, hg.ground.astype(np.float32))
    np.testing.assert_array_equal(np.isnan(back.limit), np.isnan(hg.limit))


def test_zero_area_raster_rejected():
    with pytest.raises(ValueError):
        RasterSpec.covering((0, 0), (0, 5))
    with pytest.raises(ValueError):
        RasterSpec((0.0, 0.0), 0.0, (3, 3))
    with pytest.raises(ValueError):
        RasterSpec((0.0, 0.0), 0.5, (0, 3))
