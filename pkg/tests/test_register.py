import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from forestreg.core import PointCloud, RigidTransform, compose, invert
from forestreg.errors import DegenerateGeometryError, ForestRegError, NoOverlapError, ValidationError
from forestreg.evaluation import pointwise_error
from forestreg.register import (IcpParams, RegistrationMode, estimate, estimate_4dof, estimate_6dof, icp,
                                icp_refine, register_pair, residual_rms)
from forestreg.synth import ForestSpec, ScanPairSpec, generate_forest, generate_pair, overlap_crops

from conftest import random_heading_transform, random_transform


def test_pure_translation():
    s = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], dtype=float)
    T = estimate_6dof(s, s + [1, 2, 3])
    assert np.max(np.abs(T.rotation - np.eye(3))) <= 1e-12
    assert np.max(np.abs(T.translation - [1, 2, 3])) <= 1e-12


def test_6dof_recovers_planted(rng):
    for _ in range(100):
        T = random_transform(rng, 50)
        s = rng.uniform(-20, 20, (10, 3))
        E = estimate_6dof(s, T.apply(s))
        assert np.max(np.abs(E.matrix - T.matrix)) <= 1e-9


def test_6dof_noise_rms(rng):
    for _ in range(100):
        T = random_transform(rng, 50)
        s = rng.uniform(-20, 20, (10, 3))
        t = T.apply(s) + rng.normal(0, 0.01, s.shape)
        E = estimate_6dof(s, t)
        # placement error against the clean targets
        assert residual_rms(E, s, T.apply(s)) <= 0.02
        assert residual_rms(E, s, t) <= 0.03


def test_6dof_collinear_is_degenerate():
    s = np.column_stack([np.arange(5.0), np.zeros(5), np.zeros(5)])
    with pytest.raises(DegenerateGeometryError):
        estimate_6dof(s, s)


def test_too_few_correspondences():
    s = np.zeros((2, 3))
    for fn in (estimate_6dof, estimate_4dof):
        with pytest.raises(ValidationError):
            fn(s, s)
    with pytest.raises(ValidationError):
        estimate_6dof(np.zeros((3, 3)), np.zeros((4, 3)))


def test_4dof_quarter_turn():
    s = np.array([[0, 0, 0], [2, 0, 0.5], [0, 3, 1.0], [1, 1, 0.0]])
    T = RigidTransform.about_z(math.pi / 2, (1, 1, 0))
    E = estimate_4dof(s, T.apply(s))
    assert math.atan2(E.rotation[1, 0], E.rotation[0, 0]) == pytest.approx(math.pi / 2, abs=1e-12)
    assert np.max(np.abs(E.translation - [1, 1, 0])) <= 1e-12


def test_4dof_tz_is_mean():
    s = np.array([[0, 0, 0], [2, 0, 0], [0, 3, 0]], dtype=float)
    t = s + np.array([[0, 0, 0.1], [0, 0, 0.2], [0, 0, 0.3]])
    assert estimate_4dof(s, t).translation[2] == pytest.approx(0.2, abs=1e-15)


def test_4dof_tz_noise(rng):
    for _ in range(50):
        T = random_heading_transform(rng)
        s = rng.uniform(-20, 20, (20, 3))
        t = T.apply(s)
        t[:, 2] += rng.normal(0, 0.05, 20)
        assert abs(estimate_4dof(s, t).translation[2] - T.translation[2]) <= 0.03


def test_4dof_structure_is_exact(rng):
    for _ in range(100):
        s = rng.uniform(-20, 20, (8, 3))
        t = random_transform(rng).apply(s)
        M = estimate_4dof(s, t).matrix
        assert M[2, 0] == 0.0 and M[2, 1] == 0.0 and M[0, 2] == 0.0 and M[1, 2] == 0.0
        assert M[2, 2] == 1.0
        assert np.array_equal(M[3], [0, 0, 0, 1])


def test_4dof_coincident_xy():
    s = np.array([[1, 1, 0], [1, 1, 1], [1, 1, 2]], dtype=float)
    with pytest.raises(DegenerateGeometryError):
        estimate_4dof(s, s)


def test_4dof_agrees_with_6dof_on_4dof_motion(rng):
    for _ in range(100):
        T = random_heading_transform(rng)
        s = rng.uniform(-20, 20, (10, 3))
        t = T.apply(s)
        a, b = estimate_4dof(s, t), estimate_6dof(s, t)
        assert np.max(np.abs(a.apply(s) - b.apply(s))) <= 1e-9


@given(st.integers(0, 2**32 - 1))
def test_6dof_left_invariance(seed):
    rng = np.random.default_rng(seed)
    s = rng.uniform(-10, 10, (6, 3))
    t = random_transform(rng).apply(s) + rng.normal(0, 0.05, s.shape)
    G = random_transform(rng)
    E = estimate_6dof(s, t)
    E2 = estimate_6dof(G.apply(s), G.apply(t))
    want = compose(G, compose(E, invert(G)))
    assert np.max(np.abs(E2.matrix - want.matrix)) <= 1e-9


def test_mode_parsing():
    assert RegistrationMode.parse("4dof") is RegistrationMode.FOUR_DOF
    assert RegistrationMode.parse("six_dof") is RegistrationMode.SIX_DOF
    with pytest.raises(ValidationError):
        RegistrationMode.parse("5dof")
    s = np.array([[0, 0, 0], [2, 0, 0], [0, 3, 1]], dtype=float)
    assert np.allclose(estimate(s, s, "6dof").matrix, np.eye(4))


def test_icp_params_validation():
    with pytest.raises(ValidationError):
        IcpParams(max_iterations=0)
    with pytest.raises(ValidationError):
        IcpParams(working_voxel=-1)


@pytest.fixture(scope="module")
def small_forest():
    return generate_forest(ForestSpec(stem_count=20, extent_x=15, extent_y=15, seed=4)).cloud


def test_icp_small_perturbation_converges(small_forest):
    init = RigidTransform.about_z(math.radians(0.5), (0.01, 0.0, 0.0))
    res = icp(small_forest, small_forest, init)
    assert pointwise_error(small_forest, res.transform, RigidTransform.identity()) <= 1e-4


def test_icp_fixed_point(small_forest):
    res = icp(small_forest, small_forest, RigidTransform.identity())
    assert res.converged
    assert np.array_equal(res.transform.matrix, np.eye(4))


def test_icp_residuals_non_increasing(small_forest):
    init = RigidTransform.about_z(math.radians(2), (0.1, -0.05, 0.02))
    res = icp(small_forest, small_forest, init, IcpParams(max_correspondence_distance=1.0))
    assert all(b <= a for a, b in zip(res.residuals, res.residuals[1:]))


def test_icp_no_overlap(small_forest):
    far = PointCloud(small_forest.points + [100, 0, 0])
    with pytest.raises(NoOverlapError):
        icp_refine(small_forest, far)


@pytest.fixture(scope="module")
def synthetic_pair():
    forest = ForestSpec(stem_count=100, extent_x=32, extent_y=32, noise_sigma=0.01, seed=21)
    tgt_crop, src_crop = overlap_crops(32, 32, 0.7)
    T = RigidTransform.about_z(math.radians(73), (12.0, -7.5, 0.4))
    return generate_pair(ScanPairSpec(forest=forest, transform=T, src_crop=src_crop, tgt_crop=tgt_crop))


def test_register_pair_synthetic(synthetic_pair):
    p = synthetic_pair
    res = register_pair(p.src, p.tgt, icp_params=IcpParams())
    assert pointwise_error(p.src, res.coarse, p.truth_transform) < 0.05
    assert pointwise_error(p.src, res.fine, p.truth_transform) < 0.02
    d = res.diagnostics
    for key in ("src_stems", "tgt_stems", "src_triangles", "tgt_triangles", "matched_pairs",
                "consensus_size", "correspondences", "residual_rms", "times"):
        assert key in d
    assert d["local_tests"] == d["src_triangles"] * d["tgt_triangles"]
    assert d["global_tests"] == d["matched_pairs"] * (d["matched_pairs"] - 1)


def test_self_registration_is_identity(small_forest):
    res = register_pair(small_forest, small_forest, mode="6dof")
    assert np.max(np.abs(res.coarse.matrix - np.eye(4))) <= 1e-6


def test_precomputed_stem_maps_are_used(synthetic_pair):
    p = synthetic_pair
    res = register_pair(p.src, p.tgt, src_stems=p.src_stems, tgt_stems=p.tgt_stems)
    assert res.src_stems is p.src_stems
    assert pointwise_error(p.src, res.coarse, p.truth_transform) < 1e-6


def test_too_few_shared_stems_fails():
    forest = ForestSpec(stem_count=60, extent_x=25, extent_y=25, seed=8)
    tgt_crop, src_crop = (0.0, 6.0, 0.0, 25.0), (19.0, 25.0, 0.0, 25.0)
    pair = generate_pair(ScanPairSpec(forest=forest, transform=RigidTransform.about_z(1.0, (5, 5, 0)),
                                      src_crop=src_crop, tgt_crop=tgt_crop))
    assert pair.warning
    try:
        res = register_pair(pair.src, pair.tgt)
    except ForestRegError as exc:
        assert exc.stage in ("map_src", "map_tgt", "match")
        return
    assert pointwise_error(pair.src, res.coarse, pair.truth_transform) >= 0.5


def test_stage_is_reported():
    ground = np.column_stack([np.random.default_rng(0).uniform(0, 10, (3000, 2)), np.zeros(3000)])
    with pytest.raises(ForestRegError) as info:
        register_pair(PointCloud(ground), PointCloud(ground))
    assert info.value.stage == "map_src"
    assert str(info.value).startswith("[map_src]")
