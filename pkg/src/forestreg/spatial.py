"""Exact neighbor queries, voxel-grid downsampling and Euclidean clustering.

The k-d tree itself is scipy's ``cKDTree``; this module pins down the query
semantics the rest of the package relies on (inclusive radius, ties broken by
point index, canonical cluster labels).
"""

from __future__ import annotations

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .core import PointCloud
from .errors import ValidationError
from . import parallel


def _as_points(data) -> np.ndarray:
    if isinstance(data, PointCloud):
        return data.points
    pts = np.asarray(data, dtype=np.float64)
    return pts.reshape(-1, 3) if pts.size else np.empty((0, 3))


class SpatialIndex:
    """Immutable k-d tree over a 3D point set."""

    def __init__(self, data):
        pts = np.array(_as_points(data), dtype=np.float64)
        pts.flags.writeable = False
        if len(pts) == 0:
            raise ValidationError("cannot index an empty point set")
        self.points = pts
        self._tree = cKDTree(pts, balanced_tree=True, compact_nodes=True)

    def __len__(self) -> int:
        return len(self.points)

    def knn(self, query, k: int) -> list[tuple[int, float]]:
        """The ``min(k, N)`` nearest points as ``(index, distance)``, ascending; ties by index."""
        if k < 1:
            raise ValidationError(f"k must be >= 1, got {k}")
        q = np.asarray(query, dtype=np.float64).reshape(3)
        k = min(int(k), len(self.points))
        d, _ = self._tree.query(q, k=k)
        dk = float(np.atleast_1d(d)[-1])
        # gather everything at the k-th distance so equal-distance ties are all seen
        cand = np.asarray(self._tree.query_ball_point(q, dk * (1 + 1e-9) + 1e-12), dtype=np.int64)
        dist = np.sqrt(((self.points[cand] - q) ** 2).sum(axis=1))
        order = np.lexsort((cand, dist))[:k]
        return [(int(cand[i]), float(dist[i])) for i in order]

    def radius_search(self, query, r: float) -> list[int]:
        """Indices of all points within distance ``r`` (inclusive), ascending."""
        if not r > 0:
            raise ValidationError(f"radius must be > 0, got {r}")
        q = np.asarray(query, dtype=np.float64).reshape(3)
        cand = np.asarray(self._tree.query_ball_point(q, r * (1 + 1e-9)), dtype=np.int64)
        dist = np.sqrt(((self.points[cand] - q) ** 2).sum(axis=1))
        return sorted(int(i) for i in cand[dist <= r])

    def nearest(self, queries, max_distance: float = np.inf) -> tuple[np.ndarray, np.ndarray]:
        """Batch nearest neighbor. Misses beyond ``max_distance`` get index ``-1``."""
        q = _as_points(queries)
        d, idx = self._tree.query(q, k=1, distance_upper_bound=max_distance, workers=parallel.get_threads())
        idx = np.where(np.isfinite(d), idx, -1)
        return idx.astype(np.int64), d

    def pairs_within(self, r: float) -> np.ndarray:
        """All unordered index pairs ``(i, j)``, ``i < j``, at distance <= r, as an (M, 2) array."""
        pairs = self._tree.query_pairs(r * (1 + 1e-9), output_type="ndarray")
        d = np.sqrt(((self.points[pairs[:, 0]] - self.points[pairs[:, 1]]) ** 2).sum(axis=1))
        return pairs[d <= r]


def knn(index: SpatialIndex, query, k: int) -> list[tuple[int, float]]:
    return index.knn(query, k)


def radius_search(index: SpatialIndex, query, r: float) -> list[int]:
    return index.radius_search(query, r)


def voxel_indices(points: np.ndarray, resolution: float) -> np.ndarray:
    """Indices of the points kept by voxel downsampling, in ascending order.

    Voxel keys are ``floor((p - min_corner) / resolution)``.  Within a voxel the
    point closest to the voxel's centroid wins; exact ties go to the lower index.
    """
    if not resolution > 0:
        raise ValidationError(f"voxel resolution must be > 0, got {resolution}")
    pts = _as_points(points)
    n = len(pts)
    if n == 0:
        raise ValidationError("cannot downsample an empty cloud")
    keys = np.floor((pts - pts.min(axis=0)) / resolution).astype(np.int64)
    dims = keys.max(axis=0) + 1
    if float(dims[0]) * float(dims[1]) * float(dims[2]) < 2.0**62:
        lin = (keys[:, 0] * dims[1] + keys[:, 1]) * dims[2] + keys[:, 2]
        _, inv = np.unique(lin, return_inverse=True)
    else:
        _, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    nvox = int(inv.max()) + 1
    counts = np.bincount(inv, minlength=nvox).astype(np.float64)
    centroid = np.column_stack([np.bincount(inv, pts[:, a], minlength=nvox) for a in range(3)]) / counts[:, None]
    dist = ((pts - centroid[inv]) ** 2).sum(axis=1)
    order = np.lexsort((np.arange(n), dist, inv))
    first = np.ones(n, dtype=bool)
    first[1:] = inv[order][1:] != inv[order][:-1]
    return np.sort(order[first])


def voxel_downsample(cloud: PointCloud, resolution: float) -> PointCloud:
    return cloud.subset(voxel_indices(cloud.points, resolution))


def euclidean_cluster(cloud, tolerance: float, min_size: int = 1) -> list[np.ndarray]:
    """Connected components of the "distance <= tolerance" graph.

    Returns sorted index arrays, ordered by their smallest member, with
    components smaller than ``min_size`` dropped.
    """
    if not tolerance > 0:
        raise ValidationError(f"cluster tolerance must be > 0, got {tolerance}")
    pts = _as_points(cloud)
    n = len(pts)
    if n == 0:
        return []
    pairs = SpatialIndex(pts).pairs_within(tolerance)
    graph = coo_matrix((np.ones(len(pairs), dtype=np.int8), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    _, labels = connected_components(graph, directed=False)
    order = np.argsort(labels, kind="stable")
    splits = np.flatnonzero(np.diff(labels[order])) + 1
    clusters = [c for c in np.split(order, splits) if len(c) >= min_size]
    clusters.sort(key=lambda c: int(c[0]))
    return clusters
