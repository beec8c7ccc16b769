"""Stem positions from a raw scan.

Pipeline: DTM -> height band -> voxel downsample -> PCA normals ->
verticality filter -> Euclidean clusters -> one RANSAC cylinder per cluster
-> intersection of each cylinder axis with the DTM.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from typing import Optional

import numpy as np

from . import parallel
from .core import AxisLine, PointCloud
from .errors import EmptyStemMapError, ValidationError
from .spatial import SpatialIndex, euclidean_cluster, voxel_indices
from .terrain import Dtm, band_mask, build_dtm

RANSAC_CONFIDENCE = 0.99
RANSAC_BATCH = 64
# primary sample pair is replaced by the best pair of a 3-point sample below this |n1 x n2|
PARALLEL_NORMALS = 0.2
REFINE_MAX_POINTS = 400


@dataclass(frozen=True)
class StemMapParams:
    band_low: float = 0.2
    band_high: float = 3.0
    voxel_resolution: float = 0.01
    normal_radius: float = 0.10
    gamma: float = 0.9
    cluster_tolerance: float = 0.3
    cluster_min_size: int = 50
    ransac_distance_threshold: float = 0.02
    ransac_max_iterations: int = 1000
    ransac_min_inlier_fraction: float = 0.3
    ransac_radius_min: float = 0.03
    ransac_radius_max: float = 1.0
    dtm_cell_size: float = 0.5
    max_axis_tilt_deg: float = 45.0
    dedup_distance: float = 0.05
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValidationError(f"gamma must lie in (0, 1), got {self.gamma}")
        if not self.band_low < self.band_high:
            raise ValidationError(f"band_low must be < band_high, got {self.band_low} >= {self.band_high}")
        for name in ("voxel_resolution", "normal_radius", "cluster_tolerance", "ransac_distance_threshold",
                     "ransac_radius_min", "ransac_radius_max", "dtm_cell_size", "dedup_distance"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.ransac_radius_min >= self.ransac_radius_max:
            raise ValidationError("ransac_radius_min must be < ransac_radius_max")
        if self.cluster_min_size < 3 or self.ransac_max_iterations < 1:
            raise ValidationError("cluster_min_size must be >= 3 and ransac_max_iterations >= 1")
        if not 0.0 < self.ransac_min_inlier_fraction <= 1.0:
            raise ValidationError("ransac_min_inlier_fraction must lie in (0, 1]")
        if not 0.0 < self.max_axis_tilt_deg <= 90.0:
            raise ValidationError("max_axis_tilt_deg must lie in (0, 90]")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass(frozen=True, eq=False)
class CylinderFit:
    axis: AxisLine
    radius: float
    inliers: np.ndarray
    n_points: int

    @property
    def inlier_count(self) -> int:
        return len(self.inliers)

    @property
    def inlier_fraction(self) -> float:
        return self.inlier_count / self.n_points


@dataclass(frozen=True, eq=False)
class StemMap:
    """Stem positions (axis/ground intersections), one row per stem."""

    positions: np.ndarray
    cylinders: Optional[list] = None
    ids: Optional[np.ndarray] = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        pos = np.array(self.positions, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pos)):
            raise ValidationError("stem positions must be finite")
        pos.flags.writeable = False
        object.__setattr__(self, "positions", pos)
        if self.cylinders is not None and len(self.cylinders) != len(pos):
            raise ValidationError("one cylinder record per stem expected")
        if self.ids is not None:
            ids = np.array(self.ids, dtype=np.int64).reshape(-1)
            if len(ids) != len(pos):
                raise ValidationError("one id per stem expected")
            object.__setattr__(self, "ids", ids)

    def __len__(self) -> int:
        return len(self.positions)


def min_separation(positions: np.ndarray) -> float:
    if len(positions) < 2:
        return math.inf
    d, _ = SpatialIndex(positions)._tree.query(positions, k=2)
    return float(d[:, 1].min())


def verticality(normal) -> float:
    """``1 - |n_z|``: 1 for a vertical surface, 0 for a horizontal one."""
    n = np.asarray(normal, dtype=np.float64).reshape(3)
    if abs(np.linalg.norm(n) - 1.0) > 1e-6:
        raise ValidationError(f"normal must be a unit vector, got norm {np.linalg.norm(n)}")
    return 1.0 - abs(float(n[2]))


def estimate_normals(cloud, index: Optional[SpatialIndex] = None, radius: float = 0.10) -> np.ndarray:
    """PCA normal per point from its ``radius`` neighborhood.

    The normal is the covariance eigenvector of smallest eigenvalue, signed so
    ``n_z >= 0``.  Points with fewer than 3 points (self included) in the
    neighborhood get a NaN row.
    """
    if not radius > 0:
        raise ValidationError(f"normal radius must be > 0, got {radius}")
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    n = len(pts)
    if n == 0:
        return np.empty((0, 3))
    index = index or SpatialIndex(pts)
    pairs = index.pairs_within(radius)
    a = np.concatenate([pairs[:, 0], pairs[:, 1]])
    b = np.concatenate([pairs[:, 1], pairs[:, 0]])
    # offsets relative to the query point keep the covariance translation invariant
    d = pts[b] - pts[a]
    cnt = np.bincount(a, minlength=n).astype(np.float64) + 1.0
    s1 = np.column_stack([np.bincount(a, d[:, k], minlength=n) for k in range(3)])
    s2 = np.empty((n, 3, 3))
    for r in range(3):
        for c in range(r, 3):
            s2[:, r, c] = s2[:, c, r] = np.bincount(a, d[:, r] * d[:, c], minlength=n)
    mean = s1 / cnt[:, None]
    cov = s2 / cnt[:, None, None] - mean[:, :, None] * mean[:, None, :]
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0].copy()
    normals[normals[:, 2] < 0] *= -1.0
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    normals[cnt < 3] = np.nan
    return normals


def _stem_candidates(cloud: PointCloud, dtm: Dtm, params: StemMapParams):
    """Band -> downsample -> normals -> verticality filter; returns (points, normals)."""
    band = cloud.points[band_mask(cloud.points, dtm, params.band_low, params.band_high)]
    if len(band) == 0:
        raise EmptyStemMapError(
            f"empty stem map: no points between {params.band_low} and {params.band_high} m above ground"
        )
    ds = band[voxel_indices(band, params.voxel_resolution)]
    normals = estimate_normals(ds, SpatialIndex(ds), params.normal_radius)
    with np.errstate(invalid="ignore"):
        keep = (1.0 - np.abs(normals[:, 2])) > params.gamma
    return ds[keep], normals[keep], {"band_points": len(band), "downsampled_points": len(ds)}


def extract_stem_points(cloud: PointCloud, dtm: Dtm, params: StemMapParams = StemMapParams()) -> PointCloud:
    """Voxel-downsampled band points whose verticality exceeds ``params.gamma``."""
    pts, _, _ = _stem_candidates(cloud, dtm, params)
    return PointCloud(pts)


# ---------------------------------------------------------------------------
# cylinder RANSAC
# ---------------------------------------------------------------------------

def _stream_rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, int(stream)])))


def _hypotheses(X, N, i, j, k, rmin, rmax):
    """Cylinders through sampled point/normal pairs. Returns (axis, center, radius, ok)."""
    def cross(u, v):
        return np.cross(N[u], N[v])

    c_ij, c_ik, c_jk = cross(i, j), cross(i, k), cross(j, k)
    norms = np.stack([np.linalg.norm(c_ij, axis=1), np.linalg.norm(c_ik, axis=1), np.linalg.norm(c_jk, axis=1)])
    alt = np.argmax(norms, axis=0)
    use_alt = norms[0] < PARALLEL_NORMALS
    choice = np.where(use_alt, alt, 0)
    first = np.choose(choice, [i, i, j])
    second = np.choose(choice, [j, k, k])
    a = np.cross(N[first], N[second])
    an = np.linalg.norm(a, axis=1)
    ok = an > 1e-6
    a = a / np.where(ok, an, 1.0)[:, None]
    a[a[:, 2] < 0] *= -1.0

    def perp(v):
        return v - np.sum(v * a, axis=1)[:, None] * a

    m1, m2 = perp(N[first]), perp(N[second])
    w = perp(X[second] - X[first])
    A00 = np.sum(m1 * m1, axis=1)
    A11 = np.sum(m2 * m2, axis=1)
    A01 = -np.sum(m1 * m2, axis=1)
    r0 = np.sum(m1 * w, axis=1)
    r1 = -np.sum(m2 * w, axis=1)
    det = A00 * A11 - A01 * A01
    ok &= det > 1e-12
    det = np.where(ok, det, 1.0)
    s = (r0 * A11 - A01 * r1) / det
    t = (A00 * r1 - A01 * r0) / det
    center = X[first] + s[:, None] * m1
    radius = 0.5 * (np.abs(s) * np.sqrt(A00) + np.abs(t) * np.sqrt(A11))
    ok &= (radius >= rmin) & (radius <= rmax) & np.isfinite(radius)
    return a, center, radius, ok


def _surface_distance(X, axis, center, radius):
    v = X - center
    along = v @ axis
    perp = np.sqrt(np.maximum(np.sum(v * v, axis=1) - along * along, 0.0))
    return perp - radius


def _normal_frame(a):
    """Two unit vectors completing ``a`` to a right-handed orthonormal frame."""
    x, y, z = a
    if abs(x) < 0.9:   # a x (1, 0, 0)
        e1 = np.array([0.0, z, -y])
    else:              # a x (0, 1, 0)
        e1 = np.array([-z, 0.0, x])
    e1 /= math.sqrt(e1 @ e1)
    e2 = np.array([y * e1[2] - z * e1[1], z * e1[0] - x * e1[2], x * e1[1] - y * e1[0]])
    return e1, e2


def _refine(X, axis, center, radius, iterations: int = 20, max_points: int = REFINE_MAX_POINTS):
    """Levenberg-Marquardt on point-to-surface distances.

    Each iteration linearizes around the current cylinder: the axis tilts by
    small angles along two directions normal to it, the axis point moves in
    the plane spanned by those directions, and the radius shifts. Large
    inlier sets are thinned to an evenly strided subset of ``max_points``.
    """
    if len(X) > max_points:
        X = X[np.linspace(0, len(X) - 1, max_points).astype(np.int64)]
    axis = np.asarray(axis, dtype=np.float64)
    center = np.asarray(center, dtype=np.float64)
    f = _surface_distance(X, axis, center, radius)
    cost = f @ f
    lam = 1e-4
    for _ in range(iterations):
        e1, e2 = _normal_frame(axis)
        v = X - center
        along = v @ axis
        perp = v - along[:, None] * axis
        rho = np.linalg.norm(perp, axis=1)
        nh = perp / np.where(rho > 0, rho, 1.0)[:, None]
        n1, n2 = nh @ e1, nh @ e2
        J = np.column_stack([-along * n1, -along * n2, -n1, -n2, -np.ones(len(X))])
        JtJ = J.T @ J
        g = J.T @ f
        improved = False
        for _ in range(8):
            step = np.linalg.solve(JtJ + lam * (np.diag(np.diag(JtJ)) + 1e-12 * np.eye(5)), -g)
            a2 = axis + step[0] * e1 + step[1] * e2
            a2 /= np.linalg.norm(a2)
            c2 = center + step[2] * e1 + step[3] * e2
            r2 = radius + step[4]
            fc = _surface_distance(X, a2, c2, r2)
            cc = fc @ fc
            if cc < cost:
                gain = cost - cc
                axis, center, radius, f, cost = a2, c2, r2, fc, cc
                lam = max(lam / 10, 1e-12)
                improved = True
                break
            lam *= 10
        if not improved or np.max(np.abs(step)) < 1e-10 or gain <= 1e-9 * cost:
            break
    return axis, center, abs(radius)


def fit_cylinder_ransac(cluster, params: StemMapParams = StemMapParams(), normals: Optional[np.ndarray] = None,
                        stream: int = 0) -> Optional[CylinderFit]:
    """RANSAC cylinder with a least-squares polish of the winning hypothesis.

    Hypotheses come from two points and their normals (axis = n1 x n2).  The
    search stops after ``ransac_max_iterations`` samples or once 99% confidence
    is reached for the current inlier ratio.  Returns None (rejection) when
    the cluster is too small, the inlier fraction is below
    ``ransac_min_inlier_fraction`` or the radius leaves the allowed range.
    Random draws depend only on ``(params.rng_seed, stream)``.
    """
    pts = cluster.points if isinstance(cluster, PointCloud) else np.asarray(cluster, dtype=np.float64)
    n = len(pts)
    if n < params.cluster_min_size or n < 3:
        return None
    if normals is None:
        normals = estimate_normals(pts, radius=params.normal_radius)
    usable = np.flatnonzero(np.isfinite(normals).all(axis=1))
    if len(usable) < 3:
        return None
    offset = pts.mean(axis=0)
    X = pts - offset
    thr = params.ransac_distance_threshold
    rmin, rmax = params.ransac_radius_min, params.ransac_radius_max
    rng = _stream_rng(params.rng_seed, stream)

    best_count, best = -1, None
    done, needed = 0, params.ransac_max_iterations
    while done < min(needed, params.ransac_max_iterations):
        b = min(RANSAC_BATCH, params.ransac_max_iterations - done)
        ijk = usable[rng.integers(0, len(usable), size=(3, b))]
        a, c, r, ok = _hypotheses(X, normals, ijk[0], ijk[1], ijk[2], rmin, rmax)
        done += b
        if not ok.any():
            continue
        a, c, r = a[ok], c[ok], r[ok]
        v = X[None, :, :] - c[:, None, :]
        along = np.einsum("hnk,hk->hn", v, a)
        perp = np.sqrt(np.maximum(np.einsum("hnk,hnk->hn", v, v) - along * along, 0.0))
        counts = (np.abs(perp - r[:, None]) < thr).sum(axis=1)
        h = int(np.argmax(counts))
        if counts[h] > best_count:
            best_count, best = int(counts[h]), (a[h], c[h], float(r[h]))
            w = best_count / n
            if w >= 1.0:
                needed = 0
            elif w > 0:
                needed = math.ceil(math.log(1 - RANSAC_CONFIDENCE) / math.log(1 - w * w))
    if best is None:
        return None

    axis, center, radius = best
    inl = np.abs(_surface_distance(X, axis, center, radius)) < thr
    for _ in range(2):
        if inl.sum() < 5:
            break
        a2, c2, r2 = _refine(X[inl], axis, center, radius)
        inl2 = np.abs(_surface_distance(X, a2, c2, r2)) < thr
        if inl2.sum() < 0.9 * inl.sum():
            break
        axis, center, radius, inl = a2, c2, r2, inl2
    inliers = np.flatnonzero(inl)
    if axis[2] < 0:
        axis = -axis
    if len(inliers) / n < params.ransac_min_inlier_fraction or not rmin <= radius <= rmax:
        return None
    # anchor the axis at the point closest to the inlier centroid
    mid = X[inliers].mean(axis=0)
    origin = center + ((mid - center) @ axis) * axis
    return CylinderFit(AxisLine(origin + offset, axis), float(radius), inliers, n)


# ---------------------------------------------------------------------------
# full stage
# ---------------------------------------------------------------------------

def axis_ground_intersection(axis: AxisLine, dtm: Dtm, start_height: float = 0.2,
                             max_iter: int = 20, tol: float = 1e-9) -> np.ndarray:
    """Point of ``axis`` at ground level, by fixed-point iteration on the DTM height."""
    ox, oy = axis.origin[0], axis.origin[1]
    p = axis.point_at_z(dtm.height_at(ox, oy) + start_height)
    for _ in range(max_iter):
        g = dtm.height_at(p[0], p[1])
        p_next = axis.point_at_z(g)
        moved = abs(p_next[2] - p[2])
        p = p_next
        if moved < tol:
            break
    return np.array([p[0], p[1], dtm.height_at(p[0], p[1])])


def map_stems(cloud: PointCloud, params: StemMapParams = StemMapParams(), dtm: Optional[Dtm] = None) -> StemMap:
    """Extract stem positions from a raw scan.

    Raises:
        EmptyStemMapError: no accepted cylinder (registration impossible).
    """
    if cloud.is_empty:
        raise ValidationError("cannot map stems of an empty cloud")
    dtm = dtm or build_dtm(cloud, params.dtm_cell_size)
    pts, normals, diag = _stem_candidates(cloud, dtm, params)
    diag["input_points"] = len(cloud)
    diag["stem_points"] = len(pts)
    clusters = euclidean_cluster(pts, params.cluster_tolerance, params.cluster_min_size) if len(pts) else []
    diag["clusters"] = len(clusters)

    def fit(job):
        ordinal, idx = job
        return fit_cylinder_ransac(pts[idx], params, normals[idx], stream=ordinal)

    fits = parallel.ordered_map(fit, list(enumerate(clusters)))
    cos_tilt = math.cos(math.radians(params.max_axis_tilt_deg))
    found = []
    for ordinal, f in enumerate(fits):
        if f is None or f.axis.direction[2] < cos_tilt:
            continue
        pos = axis_ground_intersection(f.axis, dtm, params.band_low)
        found.append((f.inlier_count, ordinal, pos, f))
    diag["cylinders"] = len(found)

    # strongest fit wins when two positions collapse onto each other
    found.sort(key=lambda e: (-e[0], e[1]))
    kept = []
    for e in found:
        if all(np.linalg.norm(e[2] - k[2]) > params.dedup_distance for k in kept):
            kept.append(e)
    if not kept:
        raise EmptyStemMapError("empty stem map: no stem cylinder accepted")
    kept.sort(key=lambda e: tuple(e[2]))
    return StemMap(np.array([e[2] for e in kept]), [e[3] for e in kept], diagnostics=diag)


def with_params(params: StemMapParams, **overrides) -> StemMapParams:
    return replace(params, **overrides)
