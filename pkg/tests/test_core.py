import numpy as np
import pytest
from hypothesis import given, strategies as st

from forestreg.core import AxisLine, PointCloud, RigidTransform, apply_transform, compose, invert
from forestreg.errors import ValidationError

from conftest import random_rotation, random_transform


def test_pointcloud_rejects_non_finite():
    with pytest.raises(ValidationError, match="non-finite"):
        PointCloud([[0.0, 0.0, 0.0], [np.nan, 1.0, 2.0]])


def test_pointcloud_attribute_lengths_checked():
    with pytest.raises(ValidationError):
        PointCloud(np.zeros((3, 3)), intensity=np.zeros(2))
    with pytest.raises(ValidationError):
        PointCloud(np.zeros((3, 3)), color=np.zeros((3, 2)))


def test_pointcloud_is_immutable():
    c = PointCloud(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        c.points[0, 0] = 1.0


def test_identity_leaves_cloud_unchanged(rng):
    c = PointCloud(rng.normal(size=(50, 3)), intensity=rng.random(50))
    out = apply_transform(c, RigidTransform.identity())
    assert np.array_equal(out.points, c.points)
    assert np.array_equal(out.intensity, c.intensity)


def test_pure_translation_moves_origin():
    c = PointCloud([[0.0, 0.0, 0.0]])
    out = apply_transform(c, RigidTransform.from_translation([1, 2, 3]))
    assert np.array_equal(out.points[0], [1.0, 2.0, 3.0])


def test_quarter_turn_about_z():
    T = RigidTransform.about_z(np.pi / 2)
    p = T.apply(np.array([[1.0, 0.0, 0.0]]))[0]
    assert np.allclose(p, [0.0, 1.0, 0.0], atol=1e-12, rtol=0)


def test_apply_transform_carries_attributes(rng):
    c = PointCloud(rng.normal(size=(20, 3)), intensity=rng.random(20), color=rng.integers(0, 256, (20, 3)))
    out = apply_transform(c, random_transform(rng))
    assert len(out) == len(c)
    assert np.array_equal(out.intensity, c.intensity)
    assert np.array_equal(out.color, c.color)


def test_apply_transform_refuses_empty_cloud():
    with pytest.raises(ValidationError):
        apply_transform(PointCloud(np.empty((0, 3))), RigidTransform.identity())


def test_invalid_rotation_rejected():
    with pytest.raises(ValidationError, match="orthonormal"):
        RigidTransform(np.diag([1.0, 1.0, 1.1]), np.zeros(3))
    with pytest.raises(ValidationError, match="determinant"):
        RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))


def test_compose_identity_and_translations(rng):
    B = random_transform(rng)
    C = compose(RigidTransform.identity(), B)
    assert np.array_equal(C.matrix, B.matrix)
    AB = compose(RigidTransform.from_translation([1, 0, 0]), RigidTransform.from_translation([0, 1, 0]))
    assert np.array_equal(AB.translation, [1.0, 1.0, 0.0])


def test_compose_applies_right_operand_first(rng):
    A, B = random_transform(rng), random_transform(rng)
    p = rng.normal(size=(10, 3))
    assert np.allclose(compose(A, B).apply(p), A.apply(B.apply(p)), atol=1e-12)
    assert np.allclose((A @ B).matrix, A.matrix @ B.matrix, atol=1e-12)


def test_invert_examples():
    assert np.array_equal(invert(RigidTransform.identity()).matrix, np.eye(4))
    Ti = invert(RigidTransform.from_translation([1, 2, 3]))
    assert np.array_equal(Ti.translation, [-1.0, -2.0, -3.0])
    assert np.array_equal(Ti.rotation, np.eye(3))


def test_invert_random_transforms(rng):
    for _ in range(100):
        T = random_transform(rng)
        assert np.max(np.abs(compose(T, invert(T)).matrix - np.eye(4))) <= 1e-9
        assert np.max(np.abs(compose(invert(T), T).matrix - np.eye(4))) <= 1e-9


@given(st.integers(0, 2**32 - 1))
def test_rigidity_preserves_pairwise_distances(seed):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-50, 50, size=(30, 3))
    T = random_transform(rng, 100.0)
    q = T.apply(pts)
    d0 = np.linalg.norm(pts[:, None] - pts[None], axis=2)
    d1 = np.linalg.norm(q[:, None] - q[None], axis=2)
    off = ~np.eye(30, dtype=bool)
    assert np.max(np.abs(d1[off] - d0[off]) / d0[off]) <= 1e-9


@given(st.integers(0, 2**32 - 1))
def test_compose_is_associative(seed):
    rng = np.random.default_rng(seed)
    A, B, C = (random_transform(rng) for _ in range(3))
    assert np.max(np.abs(compose(compose(A, B), C).matrix - compose(A, compose(B, C)).matrix)) <= 1e-9


def test_from_matrix_checks_bottom_row():
    M = np.eye(4)
    M[3, 3] = 2.0
    with pytest.raises(ValidationError, match="bottom row"):
        RigidTransform.from_matrix(M)


def test_axis_line_normalizes_direction_and_hits_height():
    a = AxisLine([1.0, 2.0, 0.0], [0.0, 0.0, 5.0])
    assert np.isclose(np.linalg.norm(a.direction), 1.0, atol=1e-12)
    assert np.allclose(a.point_at_z(3.0), [1.0, 2.0, 3.0])
    tilted = AxisLine([0.0, 0.0, 0.0], [1.0, 0.0, 1.0])
    assert np.allclose(tilted.point_at_z(2.0), [2.0, 0.0, 2.0])
    assert np.allclose(a.distance(np.array([[4.0, 6.0, 9.0]])), [5.0])
    with pytest.raises(ValidationError):
        AxisLine([0, 0, 0], [0, 0, 0])


def test_random_rotation_helper_is_proper(rng):
    R = random_rotation(rng)
    assert np.allclose(R.T @ R, np.eye(3), atol=1e-12)
    assert np.isclose(np.linalg.det(R), 1.0)
