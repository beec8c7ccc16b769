"""Synthetic forest scenes and scan pairs with exact ground truth.

A scene is a ground surface, vertical cylinders standing on it, optional
understory scatter and a Gaussian canopy blob above every stem top.  Every
random quantity comes from its own counter-based stream keyed by
``(seed, purpose, entity)``, so output is reproducible and independent of
evaluation order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np

from .core import PointCloud, RigidTransform, invert
from .errors import LayoutError, SpecError, ValidationError
from .stemmap import StemMap

GROUND = -1
UNDERSTORY = -2
CANOPY = -3

_STREAMS = {"layout": 1, "stem": 2, "ground": 3, "understory": 4, "canopy": 5, "noise": 6,
            "dropout": 7, "wedge": 8}


def _rng(seed: int, purpose: str, entity: int = 0, draw: int = 0) -> np.random.Generator:
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, _STREAMS[purpose], int(entity), int(draw)])
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class ForestSpec:
    stem_count: int = 100
    extent_x: float = 32.0
    extent_y: float = 32.0
    layout: str = "uniform"          # "uniform" (min spacing) or "rows"
    min_spacing: float = 1.5
    row_spacing: float = 5.0
    row_jitter: float = 0.0
    radius_min: float = 0.08
    radius_max: float = 0.25
    height_min: float = 6.0
    height_max: float = 10.0
    ground: str = "flat"             # "flat", "tilted" or "sinusoidal"
    ground_z0: float = 0.0
    ground_slope_x: float = 0.0
    ground_slope_y: float = 0.0
    ground_amplitude: float = 0.0
    ground_wavelength: float = 20.0
    ground_density: float = 20.0     # points per m^2
    stem_density: float = 300.0      # points per m^2 of stem wall
    understory_density: float = 0.0  # points per m^2 of ground area
    understory_low: float = 0.2
    understory_high: float = 1.5
    canopy_points: int = 100         # per tree
    canopy_sigma: float = 1.0
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.layout not in ("uniform", "rows"):
            raise ValidationError(f"layout must be 'uniform' or 'rows', got {self.layout!r}")
        if self.ground not in ("flat", "tilted", "sinusoidal"):
            raise ValidationError(f"ground must be flat, tilted or sinusoidal, got {self.ground!r}")
        if self.stem_count < 0 or self.extent_x <= 0 or self.extent_y <= 0:
            raise ValidationError("stem_count must be >= 0 and extents > 0")
        if not 0 < self.radius_min <= self.radius_max:
            raise ValidationError("need 0 < radius_min <= radius_max")
        if not 0 < self.height_min <= self.height_max:
            raise ValidationError("need 0 < height_min <= height_max")
        spacing = self.min_spacing if self.layout == "uniform" else self.row_spacing
        if spacing <= 2 * self.radius_max:
            raise ValidationError(f"stem spacing {spacing} must exceed twice the max radius {self.radius_max}")
        for name in ("ground_density", "stem_density", "understory_density", "canopy_points",
                     "canopy_sigma", "noise_sigma", "row_jitter"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")
        if self.ground == "sinusoidal" and self.ground_wavelength <= 0:
            raise ValidationError("ground_wavelength must be > 0")
        if self.understory_low >= self.understory_high:
            raise ValidationError("understory_low must be < understory_high")

    def ground_height(self, x, y):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        z = np.full(np.broadcast(x, y).shape, self.ground_z0)
        if self.ground == "tilted":
            z = z + self.ground_slope_x * x + self.ground_slope_y * y
        elif self.ground == "sinusoidal":
            k = 2 * np.pi / self.ground_wavelength
            z = z + self.ground_amplitude * np.sin(k * x) * np.sin(k * y)
        return z


@dataclass(frozen=True, eq=False)
class Scene:
    """Noise-free sampled forest."""

    spec: ForestSpec
    points: np.ndarray
    labels: np.ndarray        # stem id, or GROUND / UNDERSTORY / CANOPY
    stem_xy: np.ndarray
    stem_radius: np.ndarray
    stem_height: np.ndarray
    wall_angle: np.ndarray    # azimuth of each wall point about its stem axis (NaN elsewhere)

    @property
    def stem_bases(self) -> np.ndarray:
        return np.column_stack([self.stem_xy, self.spec.ground_height(self.stem_xy[:, 0], self.stem_xy[:, 1])])


def stem_layout(spec: ForestSpec) -> np.ndarray:
    if spec.layout == "rows":
        nx = int(math.floor(spec.extent_x / spec.row_spacing + 1e-9))
        ny = int(math.floor(spec.extent_y / spec.row_spacing + 1e-9))
        gx = spec.row_spacing * (np.arange(nx) + 0.5)
        gy = spec.row_spacing * (np.arange(ny) + 0.5)
        xy = np.array([(x, y) for x in gx for y in gy]).reshape(-1, 2)
        if spec.stem_count > len(xy):
            raise LayoutError(f"a {nx}x{ny} row grid holds {len(xy)} stems, {spec.stem_count} requested")
        xy = xy[: spec.stem_count]
        if spec.row_jitter > 0:
            xy = xy + _rng(spec.seed, "layout").uniform(-spec.row_jitter, spec.row_jitter, size=xy.shape)
        return xy
    rng = _rng(spec.seed, "layout")
    margin = spec.radius_max
    placed = np.empty((0, 2))
    attempts = 0
    limit = 1000 * max(spec.stem_count, 1)
    while len(placed) < spec.stem_count:
        if attempts >= limit:
            raise LayoutError(
                f"placed {len(placed)} of {spec.stem_count} stems with min spacing {spec.min_spacing} "
                f"after {limit} attempts"
            )
        cand = rng.uniform([margin, margin], [spec.extent_x - margin, spec.extent_y - margin], size=(64, 2))
        for c in cand:
            attempts += 1
            if len(placed) == 0 or np.min(np.sum((placed - c) ** 2, axis=1)) >= spec.min_spacing ** 2:
                placed = np.vstack([placed, c])
                if len(placed) == spec.stem_count:
                    break
    return placed


def sample_scene(spec: ForestSpec, draw: int = 0) -> Scene:
    """Surface points of the forest. Different ``draw`` values resample the
    points over the same stems, terrain and canopy positions."""
    xy = stem_layout(spec)
    ns = len(xy)
    prop = _rng(spec.seed, "layout", 1)
    radius = prop.uniform(spec.radius_min, spec.radius_max, size=ns)
    height = prop.uniform(spec.height_min, spec.height_max, size=ns)
    base = spec.ground_height(xy[:, 0], xy[:, 1]).reshape(-1)

    chunks, labels, angles = [], [], []

    area = spec.extent_x * spec.extent_y
    g = _rng(spec.seed, "ground", 0, draw)
    ng = int(round(spec.ground_density * area))
    gxy = g.uniform([0.0, 0.0], [spec.extent_x, spec.extent_y], size=(ng, 2))
    chunks.append(np.column_stack([gxy, spec.ground_height(gxy[:, 0], gxy[:, 1])]))
    labels.append(np.full(ng, GROUND))
    angles.append(np.full(ng, np.nan))

    for s in range(ns):
        r = _rng(spec.seed, "stem", s, draw)
        m = int(round(spec.stem_density * 2 * np.pi * radius[s] * height[s]))
        theta = r.uniform(0.0, 2 * np.pi, size=m)
        hz = r.uniform(0.0, height[s], size=m)
        chunks.append(np.column_stack([xy[s, 0] + radius[s] * np.cos(theta),
                                       xy[s, 1] + radius[s] * np.sin(theta), base[s] + hz]))
        labels.append(np.full(m, s))
        angles.append(theta)

    if spec.understory_density > 0:
        u = _rng(spec.seed, "understory", 0, draw)
        nu = int(round(spec.understory_density * area))
        uxy = u.uniform([0.0, 0.0], [spec.extent_x, spec.extent_y], size=(nu, 2))
        # keep scatter outside the stems themselves
        if ns:
            d2 = ((uxy[:, None, :] - xy[None, :, :]) ** 2).sum(axis=2) if nu * ns < 5e7 else None
            if d2 is not None:
                uxy = uxy[(d2 > (radius[None, :] + 0.02) ** 2).all(axis=1)]
        uz = spec.ground_height(uxy[:, 0], uxy[:, 1]) + u.uniform(spec.understory_low, spec.understory_high,
                                                                    size=len(uxy))
        chunks.append(np.column_stack([uxy, uz]))
        labels.append(np.full(len(uxy), UNDERSTORY))
        angles.append(np.full(len(uxy), np.nan))

    if spec.canopy_points > 0:
        for s in range(ns):
            c = _rng(spec.seed, "canopy", s, draw)
            top = np.array([xy[s, 0], xy[s, 1], base[s] + height[s]])
            blob = top + c.normal(0.0, spec.canopy_sigma, size=(spec.canopy_points, 3))
            # canopy must stay above the stem-search band
            blob = blob[blob[:, 2] - spec.ground_height(blob[:, 0], blob[:, 1]) >= 3.5]
            chunks.append(blob)
            labels.append(np.full(len(blob), CANOPY))
            angles.append(np.full(len(blob), np.nan))

    return Scene(spec, np.concatenate(chunks), np.concatenate(labels), xy, radius, height,
                 np.concatenate(angles))


def _noise(seed: int, entity: int, n: int, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return np.zeros((n, 3))
    return _rng(seed, "noise", entity).normal(0.0, sigma, size=(n, 3))


@dataclass(frozen=True, eq=False)
class SyntheticForest:
    cloud: PointCloud
    truth_stems: StemMap
    labels: np.ndarray
    scene: Scene


def _truth_map(positions: np.ndarray, ids: np.ndarray) -> StemMap:
    order = np.lexsort(positions.T[::-1]) if len(positions) else np.empty(0, dtype=np.int64)
    return StemMap(positions[order], ids=ids[order])


def generate_forest(spec: ForestSpec) -> SyntheticForest:
    scene = sample_scene(spec)
    pts = scene.points + _noise(spec.seed, 0, len(scene.points), spec.noise_sigma)
    ids = np.arange(len(scene.stem_xy))
    return SyntheticForest(PointCloud(pts), _truth_map(scene.stem_bases, ids), scene.labels, scene)


# ---------------------------------------------------------------------------
# scan pairs
# ---------------------------------------------------------------------------

Crop = Optional[tuple]  # (xmin, xmax, ymin, ymax) in forest coordinates


@dataclass(frozen=True)
class ScanPairSpec:
    forest: ForestSpec = field(default_factory=ForestSpec)
    transform: RigidTransform = field(default_factory=RigidTransform.identity)
    src_dropout: float = 0.0
    tgt_dropout: float = 0.0
    src_crop: Crop = None
    tgt_crop: Crop = None
    wedge_max_deg: float = 0.0

    def __post_init__(self):
        for name in ("src_dropout", "tgt_dropout"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ValidationError(f"{name} must lie in [0, 1), got {v}")
        for name in ("src_crop", "tgt_crop"):
            c = getattr(self, name)
            if c is not None and (len(c) != 4 or c[0] >= c[1] or c[2] >= c[3]):
                raise ValidationError(f"{name} must be (xmin, xmax, ymin, ymax) with min < max")
        if not 0.0 <= self.wedge_max_deg <= 360.0:
            raise ValidationError("wedge_max_deg must lie in [0, 360]")


def overlap_crops(extent_x: float, extent_y: float, overlap: float) -> tuple[tuple, tuple]:
    """Target/source crops sliding along x so that ``overlap`` of the plot is seen by both."""
    if not 0.0 < overlap <= 1.0:
        raise ValidationError(f"overlap must lie in (0, 1], got {overlap}")
    cut = (1.0 + overlap) / 2.0 * extent_x
    return (0.0, cut, 0.0, extent_y), (extent_x - cut, extent_x, 0.0, extent_y)


@dataclass(frozen=True, eq=False)
class ScanPair:
    src: PointCloud
    tgt: PointCloud
    truth_transform: RigidTransform
    src_stems: StemMap
    tgt_stems: StemMap
    shared_ids: np.ndarray
    warning: bool
    manifest: dict


def _in_crop(xy: np.ndarray, crop: Crop) -> np.ndarray:
    if crop is None:
        return np.ones(len(xy), dtype=bool)
    return (xy[:, 0] >= crop[0]) & (xy[:, 0] < crop[1]) & (xy[:, 1] >= crop[2]) & (xy[:, 1] < crop[3])


def _scan(scene: Scene, crop: Crop, dropout: float, wedge_deg: float, scan_id: int):
    spec = scene.spec
    ns = len(scene.stem_xy)
    visible = _in_crop(scene.stem_xy, crop)
    cand = np.flatnonzero(visible)
    n_drop = int(round(dropout * len(cand)))
    if n_drop:
        drop = _rng(spec.seed, "dropout", scan_id).choice(cand, size=n_drop, replace=False)
        visible[drop] = False

    keep = _in_crop(scene.points[:, :2], crop)
    lab = scene.labels
    is_wall = lab >= 0
    wall_ok = np.zeros(len(lab), dtype=bool)
    wall_ok[is_wall] = visible[lab[is_wall]]
    keep &= ~is_wall | wall_ok
    if wedge_deg > 0 and ns:
        w = _rng(spec.seed, "wedge", scan_id)
        centre = w.uniform(0.0, 2 * np.pi, size=ns)
        half = np.radians(w.uniform(0.0, wedge_deg, size=ns)) / 2
        ang = np.where(is_wall, scene.wall_angle, 0.0)
        sid = np.where(is_wall, lab, 0)
        delta = np.abs((ang - centre[sid] + np.pi) % (2 * np.pi) - np.pi)
        keep &= ~(is_wall & (delta < half[sid]))
    pts = scene.points[keep]
    pts = pts + _noise(spec.seed, 100 + scan_id, len(pts), spec.noise_sigma)
    ids = np.flatnonzero(visible)
    return pts, ids


def generate_pair(spec: ScanPairSpec) -> ScanPair:
    """Target scan in forest coordinates, source scan moved by the inverse planted transform.

    Registering ``src`` onto ``tgt`` should recover ``spec.transform``.
    """
    # each scan samples its own surface points over the same forest
    tgt_scene = sample_scene(spec.forest, draw=1)
    src_scene = sample_scene(spec.forest, draw=2)
    bases = tgt_scene.stem_bases
    T = spec.transform
    Tinv = invert(T)

    tgt_pts, tgt_ids = _scan(tgt_scene, spec.tgt_crop, spec.tgt_dropout, spec.wedge_max_deg, 0)
    src_pts, src_ids = _scan(src_scene, spec.src_crop, spec.src_dropout, spec.wedge_max_deg, 1)
    src_pts = Tinv.apply(src_pts)

    shared = np.intersect1d(src_ids, tgt_ids)
    warning = len(shared) < 3
    manifest = {
        "seed": spec.forest.seed,
        "stem_count": len(bases),
        "src_points": len(src_pts),
        "tgt_points": len(tgt_pts),
        "src_stems": len(src_ids),
        "tgt_stems": len(tgt_ids),
        "shared_stems": len(shared),
        "warning": warning,
    }
    return ScanPair(
        src=PointCloud(src_pts),
        tgt=PointCloud(tgt_pts),
        truth_transform=T,
        src_stems=_truth_map(Tinv.apply(bases[src_ids]) if len(src_ids) else np.empty((0, 3)), src_ids),
        tgt_stems=_truth_map(bases[tgt_ids], tgt_ids),
        shared_ids=shared,
        warning=warning,
        manifest=manifest,
    )


def spec_fields(cls) -> dict[str, type]:
    return {f.name: f.type for f in fields(cls)}


# ---------------------------------------------------------------------------
# key=value scene files
# ---------------------------------------------------------------------------

REQUIRED_KEYS = ("stem_count",)
PAIR_KEYS = {
    "yaw_deg": 0.0, "pitch_deg": 0.0, "roll_deg": 0.0,  # planted rotation, applied as Rz(yaw) Ry(pitch) Rx(roll)
    "tx": 0.0, "ty": 0.0, "tz": 0.0,
    "overlap": 1.0,  # fraction of the plot seen by both scans (crops slide along x)
    "src_dropout": 0.0, "tgt_dropout": 0.0, "wedge_max_deg": 0.0,
}


def _convert(key: str, raw: str, kind):
    try:
        if kind is bool:
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError
            return raw.lower() in ("true", "1")
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return str(raw)
    except ValueError:
        raise SpecError(f"key {key!r}: cannot read {raw!r} as {kind.__name__}") from None


def euler_transform(yaw_deg: float, pitch_deg: float = 0.0, roll_deg: float = 0.0, t=(0.0, 0.0, 0.0)) -> RigidTransform:
    """``Rz(yaw) @ Ry(pitch) @ Rx(roll)`` with translation ``t``."""
    if pitch_deg == 0.0 and roll_deg == 0.0:
        return RigidTransform.about_z(math.radians(yaw_deg), t)
    cy, sy = math.cos(math.radians(yaw_deg)), math.sin(math.radians(yaw_deg))
    cp, sp = math.cos(math.radians(pitch_deg)), math.sin(math.radians(pitch_deg))
    cr, sr = math.cos(math.radians(roll_deg)), math.sin(math.radians(roll_deg))
    Rz = np.array([[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]])
    Ry = np.array([[cp, 0.0, sp], [0.0, 1.0, 0.0], [-sp, 0.0, cp]])
    Rx = np.array([[1.0, 0.0, 0.0], [0.0, cr, -sr], [0.0, sr, cr]])
    return RigidTransform(Rz @ Ry @ Rx, np.asarray(t, dtype=np.float64))


def pair_spec_from_kv(kv: dict, source: str = "<spec>") -> ScanPairSpec:
    """Scan-pair spec from parsed ``key=value`` text.

    Keys are the :class:`ForestSpec` fields plus the entries of ``PAIR_KEYS``.

    Raises:
        SpecError: a required key is missing, a key is unknown or a value does not parse.
    """
    kinds = {f.name: type(f.default) for f in fields(ForestSpec)}
    problems = [f"missing required key {k!r}" for k in REQUIRED_KEYS if k not in kv]
    problems += [f"unknown key {k!r}" for k in kv if k not in kinds and k not in PAIR_KEYS]
    if problems:
        raise SpecError(f"{source}: " + "; ".join(problems))
    forest_args = {k: _convert(k, v, kinds[k]) for k, v in kv.items() if k in kinds}
    pair = {k: _convert(k, kv[k], float) if k in kv else d for k, d in PAIR_KEYS.items()}
    try:
        forest = ForestSpec(**forest_args)
        if pair["overlap"] < 1.0:
            tgt_crop, src_crop = overlap_crops(forest.extent_x, forest.extent_y, pair["overlap"])
        else:
            tgt_crop = src_crop = None
        T = euler_transform(pair["yaw_deg"], pair["pitch_deg"], pair["roll_deg"],
                            (pair["tx"], pair["ty"], pair["tz"]))
        return ScanPairSpec(forest=forest, transform=T, src_dropout=pair["src_dropout"],
                            tgt_dropout=pair["tgt_dropout"], src_crop=src_crop, tgt_crop=tgt_crop,
                            wedge_max_deg=pair["wedge_max_deg"])
    except ValidationError as exc:
        raise SpecError(f"{source}: {exc}") from None
