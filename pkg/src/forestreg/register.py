"""Rigid transforms from stem correspondences, ICP refinement and the scan-pair pipeline.

All transforms map source coordinates into the target frame.
"""

from __future__ import annotations

import enum
import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import parallel
from .core import PointCloud, RigidTransform, compose
from .errors import DegenerateGeometryError, NoOverlapError, ValidationError, with_stage
from .match import MatchParams, MatchStats, build_triangles, global_match, local_match
from .spatial import SpatialIndex, voxel_indices
from .stemmap import StemMap, StemMapParams, map_stems

COLLINEAR_TOL = 1e-9


class RegistrationMode(enum.Enum):
    SIX_DOF = "six_dof"
    FOUR_DOF = "four_dof"

    @classmethod
    def parse(cls, value) -> "RegistrationMode":
        if isinstance(value, cls):
            return value
        aliases = {"6dof": cls.SIX_DOF, "six_dof": cls.SIX_DOF, "4dof": cls.FOUR_DOF, "four_dof": cls.FOUR_DOF}
        try:
            return aliases[str(value).lower()]
        except KeyError:
            raise ValidationError(f"unknown registration mode {value!r}; use 4dof or 6dof") from None


@dataclass(frozen=True)
class IcpParams:
    max_correspondence_distance: float = 0.5
    max_iterations: int = 50
    convergence_delta: float = 1e-6
    working_voxel: float = 0.05

    def __post_init__(self):
        for name in ("max_correspondence_distance", "convergence_delta", "working_voxel"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"ICP {name} must be > 0, got {getattr(self, name)}")
        if self.max_iterations < 1:
            raise ValidationError(f"ICP max_iterations must be >= 1, got {self.max_iterations}")


def _pairs(src, tgt) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    t = np.asarray(tgt, dtype=np.float64).reshape(-1, 3)
    if s.shape != t.shape:
        raise ValidationError(f"correspondence lists differ in length: {len(s)} vs {len(t)}")
    if len(s) < 3:
        raise ValidationError(f"need at least 3 correspondences, got {len(s)}")
    if not (np.all(np.isfinite(s)) and np.all(np.isfinite(t))):
        raise ValidationError("correspondence coordinates must be finite")
    return s, t


def estimate_6dof(src, tgt) -> RigidTransform:
    """Least-squares rotation and translation taking ``src[i]`` onto ``tgt[i]``.

    Raises:
        DegenerateGeometryError: the source points are collinear (rotation about that line is free).
    """
    s, t = _pairs(src, tgt)
    cs, ct = s.mean(axis=0), t.mean(axis=0)
    A, B = s - cs, t - ct
    sv = np.linalg.svd(A, compute_uv=False)
    if sv[0] == 0 or sv[1] <= COLLINEAR_TOL * sv[0]:
        raise DegenerateGeometryError("correspondences are collinear; 6-DoF rotation is undetermined")
    U, _, Vt = np.linalg.svd(A.T @ B)
    d = 1.0 if np.linalg.det(Vt.T @ U.T) >= 0 else -1.0
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return RigidTransform(R, ct - R @ cs)


def estimate_4dof(src, tgt) -> RigidTransform:
    """Rotation about the vertical axis plus 3D translation.

    The heading and horizontal shift are the 2D least-squares solution on XY;
    the vertical shift is the mean z difference.

    Raises:
        DegenerateGeometryError: all XY coordinates coincide on either side.
    """
    s, t = _pairs(src, tgt)
    cs, ct = s[:, :2].mean(axis=0), t[:, :2].mean(axis=0)
    A, B = s[:, :2] - cs, t[:, :2] - ct
    dot = float(np.sum(A[:, 0] * B[:, 0] + A[:, 1] * B[:, 1]))
    cross = float(np.sum(A[:, 0] * B[:, 1] - A[:, 1] * B[:, 0]))
    if not (np.any(A != 0) and np.any(B != 0)) or (dot == 0 and cross == 0):
        raise DegenerateGeometryError("correspondence XY coordinates coincide; heading is undetermined")
    phi = math.atan2(cross, dot)
    c, sn = math.cos(phi), math.sin(phi)
    R = np.array([[c, -sn, 0.0], [sn, c, 0.0], [0.0, 0.0, 1.0]])
    txy = ct - R[:2, :2] @ cs
    tz = float(np.mean(t[:, 2] - s[:, 2]))
    return RigidTransform(R, np.array([txy[0], txy[1], tz]))


def estimate(src, tgt, mode=RegistrationMode.FOUR_DOF) -> RigidTransform:
    if RegistrationMode.parse(mode) is RegistrationMode.FOUR_DOF:
        return estimate_4dof(src, tgt)
    return estimate_6dof(src, tgt)


def residual_rms(T: RigidTransform, src, tgt) -> float:
    s, t = _pairs(src, tgt)
    return float(np.sqrt(np.mean(np.sum((T.apply(s) - t) ** 2, axis=1))))


# ---------------------------------------------------------------------------
# ICP
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class IcpResult:
    transform: RigidTransform
    residuals: list        # mean pairing distance of every accepted iterate, init first
    iterations: int
    converged: bool


def _working_points(cloud, voxel: float) -> np.ndarray:
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValidationError("ICP needs non-empty clouds")
    return pts[voxel_indices(pts, voxel)]


def icp(src, tgt, init: RigidTransform = RigidTransform.identity(), params: IcpParams = IcpParams()) -> IcpResult:
    """Point-to-point ICP on voxel-downsampled copies of both clouds.

    Each iteration pairs every transformed source point with its nearest
    target point within ``max_correspondence_distance`` and solves the 6-DoF
    least-squares update. An update that would raise the mean pairing
    distance is rejected and iteration stops, so the residual sequence never
    increases. Iteration also stops when the update's matrix differs from
    the identity by less than ``convergence_delta`` (Frobenius norm); that
    final update is not applied.

    Raises:
        NoOverlapError: no source point has a target point within range at ``init``.
    """
    S = _working_points(src, params.working_voxel)
    index = SpatialIndex(_working_points(tgt, params.working_voxel))

    def pair(T):
        idx, d = index.nearest(T.apply(S), params.max_correspondence_distance)
        hit = idx >= 0
        return hit, idx[hit], d[hit]

    T = init
    hit, idx, d = pair(T)
    if len(idx) == 0:
        raise NoOverlapError("no overlap: no point pairs within "
                             f"{params.max_correspondence_distance} m at the initial transform")
    residuals = [float(d.mean())]
    converged = False
    it = 0
    while it < params.max_iterations:
        it += 1
        if len(idx) < 3:
            break
        moved = T.apply(S[hit])
        try:
            step = estimate_6dof(moved, index.points[idx])
        except DegenerateGeometryError:
            break
        if np.linalg.norm(step.matrix - np.eye(4)) < params.convergence_delta:
            converged = True
            break
        T_next = compose(step, T)
        hit_n, idx_n, d_n = pair(T_next)
        if len(idx_n) == 0 or d_n.mean() > residuals[-1]:
            break
        T, hit, idx = T_next, hit_n, idx_n
        residuals.append(float(d_n.mean()))
    return IcpResult(T, residuals, it, converged)


def icp_refine(src, tgt, init: RigidTransform = RigidTransform.identity(),
               params: IcpParams = IcpParams()) -> RigidTransform:
    return icp(src, tgt, init, params).transform


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class RegistrationResult:
    coarse: RigidTransform
    fine: Optional[RigidTransform]
    src_stems: StemMap
    tgt_stems: StemMap
    correspondences: object  # CorrespondenceSet
    diagnostics: dict = field(default_factory=dict)

    @property
    def transform(self) -> RigidTransform:
        return self.fine if self.fine is not None else self.coarse


def register_pair(src: PointCloud, tgt: PointCloud, mode=RegistrationMode.FOUR_DOF,
                  stem_params: StemMapParams = StemMapParams(), match_params: MatchParams = MatchParams(),
                  icp_params: Optional[IcpParams] = None, src_stems: Optional[StemMap] = None,
                  tgt_stems: Optional[StemMap] = None) -> RegistrationResult:
    """Stem mapping, stem matching, coarse estimate and optional ICP for one scan pair.

    Precomputed stem maps may be passed to skip mapping. Errors carry the
    name of the stage that raised them (``map_src``, ``map_tgt``, ``match``,
    ``estimate``, ``icp``).
    """
    mode = RegistrationMode.parse(mode)
    diag: dict = {"mode": mode.value}
    times: dict = {}

    t0 = time.perf_counter()
    legs = [("map_src", src, src_stems), ("map_tgt", tgt, tgt_stems)]
    maps = parallel.ordered_map(
        lambda leg: leg[2] if leg[2] is not None else with_stage(leg[0], map_stems, leg[1], stem_params), legs)
    src_map, tgt_map = maps
    times["map"] = time.perf_counter() - t0
    diag["src_stems"], diag["tgt_stems"] = len(src_map), len(tgt_map)

    t0 = time.perf_counter()
    stats = MatchStats()
    src_tri = with_stage("match", build_triangles, src_map, match_params)
    tgt_tri = with_stage("match", build_triangles, tgt_map, match_params)
    pairs = with_stage("match", local_match, src_tri, tgt_tri, match_params, stats)
    corr = with_stage("match", global_match, pairs, src_tri, tgt_tri, match_params, stats)
    times["match"] = time.perf_counter() - t0
    diag.update(src_triangles=stats.source_triangles, tgt_triangles=stats.target_triangles,
                local_tests=stats.local_tests, matched_pairs=stats.local_pairs,
                global_tests=stats.global_tests, consensus_size=stats.consensus_size,
                correspondences=len(corr))

    t0 = time.perf_counter()
    s_pts = src_map.positions[corr.pairs[:, 0]]
    t_pts = tgt_map.positions[corr.pairs[:, 1]]
    coarse = with_stage("estimate", estimate, s_pts, t_pts, mode)
    diag["residual_rms"] = residual_rms(coarse, s_pts, t_pts)
    times["estimate"] = time.perf_counter() - t0

    fine = None
    if icp_params is not None:
        t0 = time.perf_counter()
        res = with_stage("icp", icp, src, tgt, coarse, icp_params)
        fine = res.transform
        times["icp"] = time.perf_counter() - t0
        diag.update(icp_iterations=res.iterations, icp_converged=res.converged,
                    icp_residual=res.residuals[-1])
    diag["times"] = times
    return RegistrationResult(coarse, fine, src_map, tgt_map, corr, diag)
