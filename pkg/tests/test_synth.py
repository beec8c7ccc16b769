import math

import numpy as np
import pytest

from forestreg import parallel
from forestreg.core import RigidTransform
from forestreg.errors import LayoutError, SpecError, ValidationError
from forestreg.evaluation import pointwise_error
from forestreg.io import parse_kv
from forestreg.register import IcpParams, register_pair
from forestreg.synth import (CANOPY, GROUND, ForestSpec, ScanPairSpec, euler_transform, generate_forest,
                             generate_pair, overlap_crops, pair_spec_from_kv, stem_layout)


def test_uniform_forest_truth():
    f = generate_forest(ForestSpec(stem_count=50, extent_x=25, extent_y=25, seed=1))
    assert len(f.truth_stems) == 50
    walls = f.cloud.points[f.labels >= 0]
    assert np.all(walls[:, 2] >= 0.0)
    assert np.all(f.labels[f.labels < 0] <= GROUND)
    assert (f.labels == CANOPY).any()


def test_row_grid_count():
    spec = ForestSpec(stem_count=64, layout="rows", row_spacing=5.0, extent_x=40, extent_y=40)
    assert len(stem_layout(spec)) == 64
    with pytest.raises(LayoutError):
        stem_layout(ForestSpec(stem_count=65, layout="rows", row_spacing=5.0, extent_x=40, extent_y=40))


def test_infeasible_uniform_layout():
    with pytest.raises(LayoutError):
        stem_layout(ForestSpec(stem_count=500, extent_x=10, extent_y=10, min_spacing=1.5))


def test_uniform_min_spacing_holds():
    spec = ForestSpec(stem_count=80, extent_x=30, extent_y=30, min_spacing=2.0, seed=9)
    xy = stem_layout(spec)
    d = np.sqrt(((xy[:, None] - xy[None]) ** 2).sum(-1)) + np.eye(len(xy)) * 1e9
    assert d.min() >= 2.0


def test_spec_validation():
    with pytest.raises(ValidationError):
        ForestSpec(min_spacing=0.4, radius_max=0.25)
    with pytest.raises(ValidationError):
        ForestSpec(noise_sigma=-1)
    with pytest.raises(ValidationError):
        ScanPairSpec(src_dropout=1.0)


def test_same_seed_bit_identical():
    spec = ForestSpec(stem_count=20, extent_x=15, extent_y=15, noise_sigma=0.01, seed=3)
    a, b = generate_forest(spec), generate_forest(spec)
    assert np.array_equal(a.cloud.points, b.cloud.points)
    c = generate_forest(ForestSpec(stem_count=20, extent_x=15, extent_y=15, noise_sigma=0.01, seed=4))
    assert not np.array_equal(a.cloud.points[:100], c.cloud.points[:100])


def test_generation_independent_of_threads():
    spec = ScanPairSpec(forest=ForestSpec(stem_count=20, extent_x=15, extent_y=15, noise_sigma=0.01, seed=3),
                        transform=RigidTransform.about_z(0.3, (1, 2, 0)), src_dropout=0.2, wedge_max_deg=90)
    before = parallel.get_threads()
    try:
        parallel.set_threads(1)
        a = generate_pair(spec)
        parallel.set_threads(8)
        b = generate_pair(spec)
    finally:
        parallel.set_threads(before)
    assert np.array_equal(a.src.points, b.src.points) and np.array_equal(a.tgt.points, b.tgt.points)


def test_truth_stems_on_ground_surface():
    for ground, extra in (("flat", {"ground_z0": 1.5}), ("tilted", {"ground_slope_x": 0.1}),
                          ("sinusoidal", {"ground_amplitude": 0.8})):
        spec = ForestSpec(stem_count=15, extent_x=15, extent_y=15, ground=ground, seed=2, **extra)
        pos = generate_forest(spec).truth_stems.positions
        assert np.max(np.abs(pos[:, 2] - spec.ground_height(pos[:, 0], pos[:, 1]))) <= 1e-12


def test_truth_transform_maps_src_stems_onto_tgt():
    T = euler_transform(40, 3, -2, (5, -3, 0.2))
    tgt_crop, src_crop = overlap_crops(25, 25, 0.6)
    pair = generate_pair(ScanPairSpec(forest=ForestSpec(stem_count=40, extent_x=25, extent_y=25, seed=6),
                                      transform=T, src_crop=src_crop, tgt_crop=tgt_crop, src_dropout=0.1))
    assert len(pair.shared_ids) >= 3 and not pair.warning
    s = dict(zip(pair.src_stems.ids, pair.src_stems.positions))
    t = dict(zip(pair.tgt_stems.ids, pair.tgt_stems.positions))
    for i in pair.shared_ids:
        assert np.max(np.abs(T.apply(s[i]) - t[i])) <= 1e-12


def test_identity_pair_matches_up_to_sampling():
    spec = ForestSpec(stem_count=10, extent_x=12, extent_y=12, seed=5)
    pair = generate_pair(ScanPairSpec(forest=spec))
    assert np.array_equal(pair.src_stems.positions, pair.tgt_stems.positions)
    assert abs(len(pair.src) - len(pair.tgt)) <= 0.05 * len(pair.tgt)


def test_tiny_overlap_sets_warning():
    spec = ForestSpec(stem_count=40, extent_x=25, extent_y=25, seed=8)
    tgt_crop, src_crop = overlap_crops(25, 25, 0.02)
    pair = generate_pair(ScanPairSpec(forest=spec, src_crop=src_crop, tgt_crop=tgt_crop))
    assert len(pair.shared_ids) < 3
    assert pair.warning and pair.manifest["warning"] is True


def test_overlap_crops_fraction():
    tgt, src = overlap_crops(30, 20, 0.7)
    shared = min(tgt[1], src[1]) - max(tgt[0], src[0])
    assert shared == pytest.approx(0.7 * 30)
    with pytest.raises(ValidationError):
        overlap_crops(30, 20, 0.0)


def test_planted_4dof_recovered_end_to_end():
    spec = ScanPairSpec(forest=ForestSpec(stem_count=40, extent_x=20, extent_y=20, seed=12),
                        transform=euler_transform(30, 0, 0, (5, -3, 0.2)))
    pair = generate_pair(spec)
    res = register_pair(pair.src, pair.tgt, icp_params=IcpParams())
    assert pointwise_error(pair.src, res.fine, pair.truth_transform) < 0.01


def test_euler_transform():
    T = euler_transform(90, 0, 0, (1, 2, 3))
    assert np.allclose(T.apply([1, 0, 0]), [1, 3, 3])
    R = euler_transform(10, 20, 30).rotation
    assert np.allclose(R @ R.T, np.eye(3), atol=1e-12)


def test_scene_file_parsing():
    spec = pair_spec_from_kv(parse_kv("stem_count=30\nseed=4\nyaw_deg=45\ntx=2\noverlap=0.7\n"))
    assert spec.forest.stem_count == 30 and spec.forest.seed == 4
    assert spec.tgt_crop is not None
    assert math.isclose(math.atan2(spec.transform.rotation[1, 0], spec.transform.rotation[0, 0]), math.pi / 4)
    with pytest.raises(SpecError, match="stem_count"):
        pair_spec_from_kv({"seed": "1"})
    with pytest.raises(SpecError, match="bogus"):
        pair_spec_from_kv({"stem_count": "5", "bogus": "1"})
    with pytest.raises(SpecError):
        pair_spec_from_kv({"stem_count": "five"})
