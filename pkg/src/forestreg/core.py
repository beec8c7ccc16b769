"""Point clouds, rigid transforms and axis lines.

All coordinates are float64 in memory. Containers are immutable: arrays are
copied on construction and flagged read-only so they can be shared between
threads without locking.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ValidationError

ORTHO_TOL = 1e-9


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Ordered 3D points with optional intensity and 8-bit RGB color."""

    points: np.ndarray
    intensity: Optional[np.ndarray] = None
    color: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim == 1 and pts.size == 0:
            pts = pts.reshape(0, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValidationError(f"points must have shape (N, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            bad = int(np.flatnonzero(~np.isfinite(pts).all(axis=1))[0])
            raise ValidationError(f"non-finite coordinate at point {bad}")
        object.__setattr__(self, "points", _frozen(pts))
        n = len(pts)
        if self.intensity is not None:
            inten = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
            if len(inten) != n:
                raise ValidationError(f"intensity has {len(inten)} entries for {n} points")
            object.__setattr__(self, "intensity", _frozen(inten))
        if self.color is not None:
            col = np.asarray(self.color)
            if col.shape != (n, 3):
                raise ValidationError(f"color must have shape ({n}, 3), got {col.shape}")
            if np.any(col < 0) or np.any(col > 255):
                raise ValidationError("color components must lie in [0, 255]")
            object.__setattr__(self, "color", _frozen(col.astype(np.uint8)))

    def __len__(self) -> int:
        return len(self.points)

    @property
    def is_empty(self) -> bool:
        return len(self.points) == 0

    def subset(self, index) -> "PointCloud":
        """Points selected by an index array or boolean mask, attributes carried along."""
        index = np.asarray(index)
        return PointCloud(
            self.points[index],
            None if self.intensity is None else self.intensity[index],
            None if self.color is None else self.color[index],
        )

    def with_points(self, points: np.ndarray) -> "PointCloud":
        return PointCloud(points, self.intensity, self.color)

    @staticmethod
    def concatenate(clouds: list["PointCloud"]) -> "PointCloud":
        pts = np.concatenate([c.points for c in clouds]) if clouds else np.empty((0, 3))
        inten = None
        if clouds and all(c.intensity is not None for c in clouds):
            inten = np.concatenate([c.intensity for c in clouds])
        col = None
        if clouds and all(c.color is not None for c in clouds):
            col = np.concatenate([c.color for c in clouds])
        return PointCloud(pts, inten, col)


def check_rotation(R: np.ndarray, tol: float = ORTHO_TOL) -> None:
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        raise ValidationError("rotation must be a finite 3x3 matrix")
    if np.max(np.abs(R.T @ R - np.eye(3))) > tol:
        raise ValidationError("rotation block is not orthonormal")
    if abs(np.linalg.det(R) - 1.0) > tol:
        raise ValidationError("rotation determinant is not +1")


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Rotation followed by translation: ``p -> R @ p + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(-1)
        check_rotation(R)
        if t.shape != (3,) or not np.all(np.isfinite(t)):
            raise ValidationError("translation must be a finite 3-vector")
        object.__setattr__(self, "rotation", _frozen(R))
        object.__setattr__(self, "translation", _frozen(t))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_translation(cls, t) -> "RigidTransform":
        return cls(np.eye(3), t)

    @classmethod
    def from_matrix(cls, M) -> "RigidTransform":
        M = np.asarray(M, dtype=np.float64)
        if M.shape != (4, 4):
            raise ValidationError(f"expected a 4x4 matrix, got {M.shape}")
        if np.max(np.abs(M[3] - [0.0, 0.0, 0.0, 1.0])) > ORTHO_TOL:
            raise ValidationError("bottom row must be (0, 0, 0, 1)")
        return cls(M[:3, :3], M[:3, 3])

    @classmethod
    def about_z(cls, angle: float, t=(0.0, 0.0, 0.0)) -> "RigidTransform":
        """4-DoF transform: rotation by ``angle`` radians about +Z, then translation."""
        c, s = np.cos(angle), np.sin(angle)
        R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return cls(R, t)

    @property
    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return compose(self, other)

    def __repr__(self) -> str:
        return f"RigidTransform(\n{np.array2string(self.matrix, precision=6)})"


def apply_transform(cloud: PointCloud, T: RigidTransform) -> PointCloud:
    """Move every point of ``cloud`` by ``T``; attributes are carried over untouched."""
    if cloud.is_empty:
        raise ValidationError("cannot transform an empty cloud")
    return cloud.with_points(T.apply(cloud.points))


def compose(A: RigidTransform, B: RigidTransform) -> RigidTransform:
    """Transform that applies ``B`` first, then ``A``."""
    return RigidTransform(A.rotation @ B.rotation, A.rotation @ B.translation + A.translation)


def invert(T: RigidTransform) -> RigidTransform:
    Rt = T.rotation.T
    return RigidTransform(Rt, -Rt @ T.translation)


@dataclass(frozen=True, eq=False)
class AxisLine:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64).reshape(3)
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        n = np.linalg.norm(d)
        if not np.all(np.isfinite(o)) or not np.isfinite(n) or n == 0.0:
            raise ValidationError("axis needs a finite origin and non-zero direction")
        object.__setattr__(self, "origin", _frozen(o))
        object.__setattr__(self, "direction", _frozen(d / n))

    def point_at_z(self, z: float) -> np.ndarray:
        """Point on the line with the given z; the line must not be horizontal."""
        dz = self.direction[2]
        if abs(dz) < 1e-12:
            raise ValidationError("horizontal axis has no unique point at a given height")
        return self.origin + (z - self.origin[2]) / dz * self.direction

    def distance(self, points: np.ndarray) -> np.ndarray:
        v = np.asarray(points, dtype=np.float64) - self.origin
        along = v @ self.direction
        return np.linalg.norm(v - along[:, None] * self.direction, axis=1)
