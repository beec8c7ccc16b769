"""Registration error metrics and stem-map detection scores."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

from .core import PointCloud, RigidTransform, check_rotation
from .errors import ValidationError
from .io import format_kv

SUCCESS_THRESHOLD = 0.5  # m
MATCH_RADIUS = 0.5       # m


@dataclass(frozen=True)
class RegistrationErrors:
    e_R: float  # rad
    e_t: float  # m
    e_p: float  # m

    def __post_init__(self):
        if not (0.0 <= self.e_R <= math.pi and self.e_t >= 0 and self.e_p >= 0):
            raise ValidationError(f"invalid error triple {self}")

    def report(self) -> dict:
        """Values in the customary reporting units: mrad and cm."""
        return {"e_R_mrad": self.e_R * 1e3, "e_t_cm": self.e_t * 1e2, "e_p_cm": self.e_p * 1e2}


@dataclass(frozen=True)
class DetectionScores:
    precision: float
    recall: float
    f1: float
    matched: int
    missed: int
    spurious: int


def rotation_error(R, R_true) -> float:
    """Geodesic angle (rad) between two rotation matrices."""
    R = np.asarray(R, dtype=np.float64)
    Rt = np.asarray(R_true, dtype=np.float64)
    for M in (R, Rt):
        if M.shape != (3, 3):
            raise ValidationError(f"rotation must be 3x3, got shape {M.shape}")
        check_rotation(M)
    c = (np.trace(Rt @ R.T) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def _norm3(d: np.ndarray) -> np.ndarray:
    # one explicit formula for every 3-vector norm, so equal displacements give equal bits
    return np.sqrt(d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2])


def translation_error(t, t_true) -> float:
    d = np.asarray(t, dtype=np.float64).reshape(3) - np.asarray(t_true, dtype=np.float64).reshape(3)
    return float(_norm3(d))


def _mean_exact(d: np.ndarray) -> float:
    # offset from the first value keeps a constant input exactly constant
    return float(d[0] + np.mean(d - d[0]))


def pointwise_error(src, T: RigidTransform, T_true: RigidTransform) -> float:
    """Mean distance between each source point placed by ``T`` and by ``T_true``."""
    pts = src.points if isinstance(src, PointCloud) else np.asarray(src, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValidationError("pointwise error needs a non-empty cloud")
    disp = pts @ (T.rotation - T_true.rotation).T + (T.translation - T_true.translation)
    return _mean_exact(_norm3(disp))


def registration_errors(src, T: RigidTransform, T_true: RigidTransform) -> RegistrationErrors:
    return RegistrationErrors(rotation_error(T.rotation, T_true.rotation),
                              translation_error(T.translation, T_true.translation),
                              pointwise_error(src, T, T_true))


def success(e_p: float, threshold: float = SUCCESS_THRESHOLD) -> bool:
    if not threshold > 0:
        raise ValidationError(f"success threshold must be > 0, got {threshold}")
    return bool(e_p < threshold)


def success_rate(outcomes: Sequence[bool]) -> float:
    outcomes = list(outcomes)
    if not outcomes:
        raise ValidationError("success rate of an empty list is undefined")
    return sum(bool(o) for o in outcomes) / len(outcomes)


def associate(detected: np.ndarray, truth: np.ndarray, radius: float = MATCH_RADIUS) -> np.ndarray:
    """Greedy closest-first one-to-one pairing within ``radius``; rows of (detected, truth) indices."""
    D = np.asarray(detected, dtype=np.float64).reshape(-1, 3)
    G = np.asarray(truth, dtype=np.float64).reshape(-1, 3)
    if len(D) == 0 or len(G) == 0:
        return np.empty((0, 2), dtype=np.int64)
    dist = np.linalg.norm(D[:, None, :] - G[None, :, :], axis=2)
    i, j = np.nonzero(dist <= radius)
    order = np.lexsort((j, i, dist[i, j]))
    used_d, used_g, out = set(), set(), []
    for a, b in zip(i[order], j[order]):
        if a in used_d or b in used_g:
            continue
        used_d.add(a)
        used_g.add(b)
        out.append((int(a), int(b)))
    return np.array(out, dtype=np.int64).reshape(-1, 2)


def score_stem_map(detected, truth, match_radius: float = MATCH_RADIUS) -> DetectionScores:
    """Precision, recall and F1 of detected stem positions against the truth (3D distance)."""
    D = np.asarray(getattr(detected, "positions", detected), dtype=np.float64).reshape(-1, 3)
    G = np.asarray(getattr(truth, "positions", truth), dtype=np.float64).reshape(-1, 3)
    if len(G) == 0:
        raise ValidationError("stem-map scoring needs a non-empty truth set")
    m = len(associate(D, G, match_radius))
    p = m / len(D) if len(D) else 0.0
    r = m / len(G)
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return DetectionScores(p, r, f1, m, len(G) - m, len(D) - m)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def errors_report(errors: RegistrationErrors, threshold: float = SUCCESS_THRESHOLD) -> str:
    values = {"e_R": errors.e_R, "e_t": errors.e_t, "e_p": errors.e_p, **errors.report(),
              "success": success(errors.e_p, threshold)}
    return format_kv(values.items())


def scores_report(scores: DetectionScores) -> str:
    return format_kv(asdict(scores).items())


CSV_FIELDS = ["pair", "e_R_mrad", "e_t_cm", "e_p_cm", "success"]


def csv_summary(rows: Iterable[tuple[str, RegistrationErrors]], threshold: float = SUCCESS_THRESHOLD) -> str:
    """One comma-separated row per scan pair."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for name, e in rows:
        r = e.report()
        w.writerow([name, repr(r["e_R_mrad"]), repr(r["e_t_cm"]), repr(r["e_p_cm"]), int(success(e.e_p, threshold))])
    return buf.getvalue()
