import numpy as np
import pytest
from hypothesis import given, strategies as st

from forestreg.core import PointCloud
from forestreg.errors import InsufficientDataError, ValidationError
from forestreg.synth import CANOPY, ForestSpec, generate_forest
from forestreg.terrain import build_dtm, dtm_as_cloud, height_above_ground, slice_band


def grid_plane(f, n=80, step=0.125):
    g = np.arange(n) * step
    x, y = np.meshgrid(g, g, indexing="ij")
    x, y = x.ravel(), y.ravel()
    return PointCloud(np.column_stack([x, y, f(x, y)]))


def test_flat_plane_is_exact():
    dtm = build_dtm(grid_plane(lambda x, y: np.zeros_like(x)))
    assert np.max(np.abs(dtm.elevation)) <= 1e-6
    assert dtm.valid.all()


def test_flat_plane_at_height():
    dtm = build_dtm(grid_plane(lambda x, y: np.full_like(x, 2.0)))
    assert height_above_ground(dtm, (0, 0, 2)) == pytest.approx(0.0, abs=1e-12)


def test_height_above_flat_ground():
    dtm = build_dtm(grid_plane(lambda x, y: np.zeros_like(x)))
    assert height_above_ground(dtm, (1, 1, 1.7)) == pytest.approx(1.7, abs=1e-6)


def test_tilted_plane_within_1cm():
    cloud = grid_plane(lambda x, y: 0.05 * x)
    dtm = build_dtm(cloud, cell_size=0.5)
    xy = dtm.cell_centers()
    assert np.max(np.abs(dtm.elevation.ravel() - 0.05 * xy[:, 0])) <= 0.01
    for x, y in [(1.3, 2.2), (5.0, 5.0), (8.7, 0.4)]:
        assert height_above_ground(dtm, (x, y, 0.05 * x + 1.0)) == pytest.approx(1.0, abs=0.01)


def test_stems_do_not_lift_the_ground():
    forest = generate_forest(ForestSpec(stem_count=30, extent_x=20, extent_y=20, canopy_points=50, seed=3))
    dtm = build_dtm(forest.cloud)
    assert np.max(np.abs(dtm.elevation)) <= 0.02


def test_too_few_points():
    with pytest.raises(InsufficientDataError):
        build_dtm(PointCloud(np.zeros((5, 3))))
    with pytest.raises(ValidationError):
        build_dtm(grid_plane(lambda x, y: x * 0), cell_size=0)


def test_band_boundaries_half_open():
    dtm = build_dtm(grid_plane(lambda x, y: np.zeros_like(x)))
    probe = PointCloud(np.array([[2, 2, h] for h in (0.1, 0.2, 2.9, 3.0)]), intensity=np.arange(4.0))
    band = slice_band(probe, dtm, 0.2, 3.0)
    assert np.allclose(band.points[:, 2], [0.2, 2.9])
    assert np.array_equal(band.intensity, [1.0, 2.0])


def test_band_empty_when_all_below():
    dtm = build_dtm(grid_plane(lambda x, y: np.zeros_like(x)))
    assert slice_band(PointCloud(np.array([[1, 1, 0.05]])), dtm, 0.2, 3.0).is_empty
    with pytest.raises(ValidationError):
        slice_band(PointCloud(np.array([[1, 1, 0.05]])), dtm, 3.0, 0.2)


def test_band_matches_per_point_oracle():
    forest = generate_forest(ForestSpec(stem_count=20, extent_x=15, extent_y=15, ground="sinusoidal",
                                        ground_amplitude=0.5, seed=5))
    dtm = build_dtm(forest.cloud)
    band = slice_band(forest.cloud, dtm, 0.2, 3.0)
    want = [p for p in forest.cloud.points
            if 0.2 <= p[2] - dtm.height_at(p[0], p[1]) < 3.0]
    assert np.array_equal(band.points, np.array(want))
    # no canopy point sitting well above 3 m enters the band
    canopy = forest.cloud.points[forest.labels == CANOPY]
    high = canopy[height_above_ground(dtm, canopy) >= 3.0]
    assert len(high) > 0
    kept = {tuple(p) for p in band.points}
    assert not any(tuple(p) in kept for p in high)


def test_band_partition_is_exact(rng):
    dtm = build_dtm(grid_plane(lambda x, y: 0.1 * np.sin(x)))
    pts = np.column_stack([rng.uniform(0, 10, 2000), rng.uniform(0, 10, 2000), rng.uniform(-1, 5, 2000)])
    cloud = PointCloud(pts)
    inside = slice_band(cloud, dtm, 0.2, 3.0)
    below = slice_band(cloud, dtm, -100.0, 0.2)
    above = slice_band(cloud, dtm, 3.0, 100.0)
    assert len(inside) + len(below) + len(above) == len(cloud)
    merged = np.vstack([inside.points, below.points, above.points])
    assert np.array_equal(np.unique(merged, axis=0), np.unique(pts, axis=0))


def test_height_is_continuous_across_cells():
    dtm = build_dtm(grid_plane(lambda x, y: 0.3 * np.sin(x) * np.cos(y)))
    boundary = dtm.origin[0] + 4 * dtm.cell_size
    for eps in (1e-6, 1e-9):
        a = dtm.height_at(boundary - eps, 3.3)
        b = dtm.height_at(boundary + eps, 3.3)
        assert abs(a - b) < 1e-4


def test_extrapolation_clamps():
    dtm = build_dtm(grid_plane(lambda x, y: 0.05 * x))
    assert dtm.height_at(-50.0, 2.0) == pytest.approx(float(dtm.elevation[0].mean()), abs=0.05)


def test_valid_cells_within_cloud_z_range():
    forest = generate_forest(ForestSpec(stem_count=10, extent_x=10, extent_y=10, noise_sigma=0.01, seed=2))
    dtm = build_dtm(forest.cloud)
    z = forest.cloud.points[:, 2]
    assert z.min() <= dtm.elevation.min() and dtm.elevation.max() <= z.max()


def test_dtm_export():
    dtm = build_dtm(grid_plane(lambda x, y: np.zeros_like(x)))
    assert len(dtm_as_cloud(dtm)) == dtm.elevation.size


@given(st.integers(-4, 4), st.integers(-4, 4), st.floats(-50, 50))
def test_translation_equivariance(kx, ky, dz):
    base = grid_plane(lambda x, y: 0.2 * np.sin(0.7 * x) + 0.1 * y, n=48)
    dtm = build_dtm(base)
    shift = np.array([kx * 0.5, ky * 0.5, dz])
    moved = build_dtm(PointCloud(base.points + shift))
    assert np.max(np.abs(moved.elevation - dtm.elevation - dz)) <= 1e-9
