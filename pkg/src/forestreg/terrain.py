"""Grid digital terrain model and height-above-ground slicing.

The ground model is a robust per-cell low percentile rather than a cloth
simulation. Each cell takes the 5th percentile of the heights lying within a
low window above its minimum (after removing the local slope estimated from
neighboring cells). Cells standing well above their neighborhood, typically
ones holding only stem or canopy returns, are discarded; empty cells are
filled by diffusion from their neighbors, and a 3x3 median pass smooths the
result.
Heights between cell centers are bilinearly interpolated; queries outside the
grid clamp to the border.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import median_filter

from .core import PointCloud
from .errors import InsufficientDataError, ValidationError

MIN_CLOUD_POINTS = 10


@dataclass(frozen=True, eq=False)
class Dtm:
    origin: np.ndarray        # (x, y) of the grid's minimum corner
    cell_size: float
    elevation: np.ndarray     # (nx, ny) ground height at cell centers
    valid: np.ndarray         # (nx, ny) cells backed by enough points

    @property
    def shape(self) -> tuple[int, int]:
        return self.elevation.shape

    def cell_centers(self) -> np.ndarray:
        nx, ny = self.shape
        cx = self.origin[0] + (np.arange(nx) + 0.5) * self.cell_size
        cy = self.origin[1] + (np.arange(ny) + 0.5) * self.cell_size
        gx, gy = np.meshgrid(cx, cy, indexing="ij")
        return np.column_stack([gx.ravel(), gy.ravel()])

    def height_at(self, x, y) -> np.ndarray:
        """Bilinearly interpolated ground elevation at (x, y); scalar in, scalar out."""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        ex, tx = _bilinear_axis(x, self.origin[0], self.cell_size, self.shape[0])
        ey, ty = _bilinear_axis(y, self.origin[1], self.cell_size, self.shape[1])
        ex1 = np.minimum(ex + 1, self.shape[0] - 1)
        ey1 = np.minimum(ey + 1, self.shape[1] - 1)
        E = self.elevation
        z = ((1 - tx) * (1 - ty) * E[ex, ey] + tx * (1 - ty) * E[ex1, ey]
             + (1 - tx) * ty * E[ex, ey1] + tx * ty * E[ex1, ey1])
        return z if z.ndim else float(z)


def _bilinear_axis(v, origin, cell, n):
    f = np.clip((v - origin) / cell - 0.5, 0.0, n - 1)
    i = np.minimum(np.floor(f).astype(np.int64), max(n - 2, 0))
    return i, f - i


def _cell_percentile(cell: np.ndarray, values: np.ndarray, ncell: int, q: float) -> np.ndarray:
    """Per-cell percentile (linear interpolation between order statistics); NaN for empty cells."""
    order = np.lexsort((values, cell))
    c, v = cell[order], values[order]
    counts = np.bincount(c, minlength=ncell)
    start = np.concatenate([[0], np.cumsum(counts)[:-1]])
    out = np.full(ncell, np.nan)
    has = counts > 0
    k = q / 100.0 * (counts[has] - 1)
    lo = np.floor(k).astype(np.int64)
    hi = np.minimum(lo + 1, counts[has] - 1)
    frac = k - lo
    a = v[start[has] + lo]
    b = v[start[has] + hi]
    out[has] = a + frac * (b - a)
    return out


def _cell_low_percentile(cell, values, ncell, q, window):
    """Percentile over the values within ``window`` of each cell's minimum."""
    lowest = np.full(ncell, np.inf)
    np.minimum.at(lowest, cell, values)
    keep = values <= lowest[cell] + window
    return _cell_percentile(cell[keep], values[keep], ncell, q)


def _reject_raised(grid, valid, step, size=5):
    """Invalidate cells more than ``step`` above the median of valid cells around them."""
    h = size // 2
    nx, ny = grid.shape
    padded = np.pad(np.where(valid, grid, np.nan), h, constant_values=np.nan)
    stack = np.stack([padded[dx:dx + nx, dy:dy + ny] for dx in range(size) for dy in range(size)])
    ref = np.full(grid.shape, np.nan)
    has = np.isfinite(stack).any(axis=0)
    ref[has] = np.nanmedian(stack[:, has], axis=0)
    return valid & ~(grid > ref + step)


def _fill_invalid(grid: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Propagate values into invalid cells, one ring of 8-neighbors per sweep."""
    grid = np.where(valid, grid, 0.0)
    known = valid.copy()
    while not known.all():
        padded_v = np.pad(np.where(known, grid, 0.0), 1)
        padded_k = np.pad(known.astype(np.float64), 1)
        acc = np.zeros_like(grid)
        cnt = np.zeros_like(grid)
        nx, ny = grid.shape
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                if dx == 0 and dy == 0:
                    continue
                acc += padded_v[1 + dx:1 + dx + nx, 1 + dy:1 + dy + ny]
                cnt += padded_k[1 + dx:1 + dx + nx, 1 + dy:1 + dy + ny]
        newly = ~known & (cnt > 0)
        if not newly.any():
            raise InsufficientDataError("no valid DTM cell to fill from")
        grid[newly] = acc[newly] / cnt[newly]
        known |= newly
    return grid


def build_dtm(cloud: PointCloud, cell_size: float = 0.5, percentile: float = 5.0,
              min_cell_points: int = 3, window: float = 0.3, max_step: float = 0.3) -> Dtm:
    if not cell_size > 0:
        raise ValidationError(f"DTM cell size must be > 0, got {cell_size}")
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if len(pts) < MIN_CLOUD_POINTS:
        raise InsufficientDataError(f"DTM needs at least {MIN_CLOUD_POINTS} points, got {len(pts)}")
    origin = pts[:, :2].min(axis=0)
    extent = pts[:, :2].max(axis=0) - origin
    nx, ny = (np.floor(extent / cell_size).astype(np.int64) + 1).tolist()
    ix = np.minimum(np.floor((pts[:, 0] - origin[0]) / cell_size).astype(np.int64), nx - 1)
    iy = np.minimum(np.floor((pts[:, 1] - origin[1]) / cell_size).astype(np.int64), ny - 1)
    cell = ix * ny + iy
    ncell = nx * ny
    z = pts[:, 2]

    counts = np.bincount(cell, minlength=ncell)
    valid = (counts >= min_cell_points).reshape(nx, ny)
    if not valid.any():
        raise InsufficientDataError(f"no DTM cell holds {min_cell_points} or more points")

    raw = _cell_low_percentile(cell, z, ncell, percentile, window).reshape(nx, ny)
    valid = _reject_raised(raw, valid, max_step)
    first = median_filter(_fill_invalid(raw, valid), size=3, mode="nearest")

    # second pass: take the percentile of heights with the local slope removed,
    # so a cell's value refers to its center rather than its lowest corner
    if nx > 1 or ny > 1:
        gx = (np.gradient(first, cell_size, axis=0) if nx > 1 else np.zeros_like(first)).ravel()
        gy = (np.gradient(first, cell_size, axis=1) if ny > 1 else np.zeros_like(first)).ravel()
        cx = origin[0] + (ix + 0.5) * cell_size
        cy = origin[1] + (iy + 0.5) * cell_size
        resid = z - gx[cell] * (pts[:, 0] - cx) - gy[cell] * (pts[:, 1] - cy)
        second = _fill_invalid(
            _cell_low_percentile(cell, resid, ncell, percentile, window).reshape(nx, ny), valid)
    else:
        second = first

    elevation = median_filter(second, size=3, mode="nearest")
    elevation = np.clip(elevation, z.min(), z.max())
    elevation.flags.writeable = False
    valid.flags.writeable = False
    return Dtm(origin=origin, cell_size=float(cell_size), elevation=elevation, valid=valid)


def height_above_ground(dtm: Dtm, p) -> np.ndarray:
    """``z - ground(x, y)`` for one point or an (N, 3) array."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim == 1:
        return float(p[2] - dtm.height_at(p[0], p[1]))
    return p[:, 2] - dtm.height_at(p[:, 0], p[:, 1])


def band_mask(points: np.ndarray, dtm: Dtm, low: float, high: float) -> np.ndarray:
    if not low < high:
        raise ValidationError(f"band needs low < high, got [{low}, {high})")
    h = height_above_ground(dtm, points)
    return (h >= low) & (h < high)


def slice_band(cloud: PointCloud, dtm: Dtm, low: float, high: float) -> PointCloud:
    """Points with ``low <= height above ground < high``, order and attributes kept."""
    return cloud.subset(band_mask(cloud.points, dtm, low, high))


def dtm_as_cloud(dtm: Dtm) -> PointCloud:
    xy = dtm.cell_centers()
    return PointCloud(np.column_stack([xy, dtm.elevation.ravel()]))
