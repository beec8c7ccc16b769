"""Stem-position correspondences from local triangles.

Each stem is joined with every pair of its K nearest neighbors to form local
triangles. A target triangle is matched to the source triangle whose
canonical edge lengths differ least (every edge within ``epsilon``). Matched
pairs are then grouped into consensus sets: a seed pair collects every other
pair whose nine cross edges, the edges joining its vertices to the seed's,
have the same lengths on both sides within ``epsilon``. The largest set is
turned into one-to-one stem correspondences.

Both matching stages are exhaustive and run as numba kernels that parallelize
over target triangles and seed pairs respectively. All reductions resolve
ties by index, so results do not depend on the thread count.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numba import njit, prange

from .errors import (DegenerateGeometryError, InsufficientCorrespondencesError, InsufficientDataError,
                     NoLocalMatchesError, ValidationError)
from . import parallel  # noqa: F401  (selects the numba threading layer)
from .spatial import SpatialIndex

MIN_ALTITUDE = 0.01      # triangles thinner than this (m) are treated as degenerate
LONGEST_EDGE_TIE = 1e-9  # edges this close count as equally long


@dataclass(frozen=True)
class MatchParams:
    K: int = 20
    epsilon: float = 0.05

    def __post_init__(self):
        if int(self.K) != self.K or self.K < 2:
            raise ValidationError(f"K must be an integer >= 2, got {self.K}")
        if not self.epsilon > 0:
            raise ValidationError(f"epsilon must be > 0, got {self.epsilon}")


@dataclass(frozen=True)
class Triangle:
    """Canonically ordered triangle: ``vertices[0]`` faces the longest edge, order is counter-clockwise."""

    vertices: tuple[int, int, int]
    edge_lengths: tuple[float, float, float]  # (v0-v1, v1-v2, v2-v0)


@dataclass(frozen=True, eq=False)
class TriangleSet:
    positions: np.ndarray  # (N, 3) stem positions the indices refer to
    vertices: np.ndarray   # (M, 3) canonical vertex order
    edges: np.ndarray      # (M, 3) canonical edge lengths

    def __len__(self) -> int:
        return len(self.vertices)

    def __getitem__(self, i: int) -> Triangle:
        return Triangle(tuple(int(v) for v in self.vertices[i]), tuple(float(e) for e in self.edges[i]))


@dataclass(frozen=True)
class MatchedPair:
    source: int          # triangle index in the source set
    target: int          # triangle index in the target set
    dissimilarity: float


@dataclass(frozen=True, eq=False)
class ConsensusSet:
    seed: int              # index of the seed pair in the matched-pair list
    members: np.ndarray    # pair indices, seed included, ascending
    mean_dissimilarity: float


@dataclass
class MatchStats:
    """Work counters filled in by the matching stages."""

    source_triangles: int = 0
    target_triangles: int = 0
    local_tests: int = 0
    local_pairs: int = 0
    global_tests: int = 0
    consensus_size: int = 0

    def as_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    pairs: np.ndarray  # (N_c, 2) rows of (source stem, target stem), sorted by source stem
    consensus: Optional[ConsensusSet] = None
    stats: MatchStats = field(default_factory=MatchStats)

    def __post_init__(self):
        p = np.array(self.pairs, dtype=np.int64).reshape(-1, 2)
        if len(np.unique(p[:, 0])) != len(p) or len(np.unique(p[:, 1])) != len(p):
            raise ValidationError("correspondences must be one-to-one")
        p.flags.writeable = False
        object.__setattr__(self, "pairs", p)

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def count(self) -> int:
        return len(self.pairs)


# ---------------------------------------------------------------------------
# triangles
# ---------------------------------------------------------------------------

def _positions(stems) -> np.ndarray:
    pos = getattr(stems, "positions", stems)
    return np.asarray(pos, dtype=np.float64).reshape(-1, 3)


def _canonical_order(P: np.ndarray, tri: np.ndarray) -> np.ndarray:
    """Reorder rows of vertex indices (each ascending) into canonical order."""
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    opposite = np.column_stack([
        np.linalg.norm(P[b] - P[c], axis=1),
        np.linalg.norm(P[a] - P[c], axis=1),
        np.linalg.norm(P[a] - P[b], axis=1),
    ])
    longest = opposite.max(axis=1, keepdims=True)
    # first column within the tie tolerance of the maximum; columns follow index order
    first = np.argmax(opposite >= longest - LONGEST_EDGE_TIE, axis=1)
    rest = np.array([[1, 2], [0, 2], [0, 1]])[first]
    rows = np.arange(len(tri))
    v0 = tri[rows, first]
    v1 = tri[rows, rest[:, 0]]
    v2 = tri[rows, rest[:, 1]]
    d1, d2 = P[v1] - P[v0], P[v2] - P[v0]
    cross_z = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    flip = cross_z < 0
    return np.column_stack([v0, np.where(flip, v2, v1), np.where(flip, v1, v2)])


def _edge_lengths(P: np.ndarray, tri: np.ndarray) -> np.ndarray:
    return np.column_stack([
        np.linalg.norm(P[tri[:, 0]] - P[tri[:, 1]], axis=1),
        np.linalg.norm(P[tri[:, 1]] - P[tri[:, 2]], axis=1),
        np.linalg.norm(P[tri[:, 2]] - P[tri[:, 0]], axis=1),
    ])


def min_altitude(P: np.ndarray, tri: np.ndarray) -> np.ndarray:
    """Smallest altitude of each triangle: twice the area over the longest edge."""
    P = np.asarray(P, dtype=np.float64)
    tri = np.asarray(tri, dtype=np.int64).reshape(-1, 3)
    area2 = np.linalg.norm(np.cross(P[tri[:, 1]] - P[tri[:, 0]], P[tri[:, 2]] - P[tri[:, 0]]), axis=1)
    longest = _edge_lengths(P, tri).max(axis=1)
    return np.where(longest > 0, area2 / np.where(longest > 0, longest, 1.0), 0.0)


def canonicalize(points, indices=(0, 1, 2)) -> Triangle:
    """Canonical form of one triangle given its three vertex positions.

    ``indices`` are the stem indices of the rows of ``points``; they break
    longest-edge ties and label the result.

    Raises:
        DegenerateGeometryError: the vertices are (nearly) collinear.
    """
    P = np.asarray(points, dtype=np.float64).reshape(3, 3)
    idx = np.asarray(indices, dtype=np.int64).reshape(3)
    if len(set(idx.tolist())) != 3:
        raise ValidationError("triangle vertices must be distinct")
    order = np.argsort(idx)
    local = order.reshape(1, 3)
    if min_altitude(P, local)[0] < MIN_ALTITUDE:
        raise DegenerateGeometryError("degenerate triangle: vertices are nearly collinear", stage="match")
    # work in local row numbers sorted by stem index, then map back
    canon = _canonical_order(P, local)[0]
    edges = _edge_lengths(P, canon.reshape(1, 3))[0]
    return Triangle(tuple(int(idx[r]) for r in canon), tuple(float(e) for e in edges))


def neighbor_lists(positions: np.ndarray, k: int) -> np.ndarray:
    """Row ``i`` holds the ``min(k, N-1)`` nearest other stems of stem ``i``, ties by index."""
    P = _positions(positions)
    n = len(P)
    k = min(int(k), n - 1)
    index = SpatialIndex(P)
    out = np.empty((n, k), dtype=np.int64)
    for i in range(n):
        nb = [j for j, _ in index.knn(P[i], k + 1) if j != i]
        out[i] = nb[:k]
    return out


def build_triangles(stems, params: MatchParams = MatchParams()) -> TriangleSet:
    """Local triangles over each stem and every pair of its K nearest neighbors.

    Triangles are deduplicated by vertex set, degenerate ones (minimum
    altitude below 1 cm) are dropped, and the rest are stored in canonical
    order sorted by vertex triple.

    Raises:
        InsufficientDataError: fewer than three stems.
    """
    P = _positions(stems)
    n = len(P)
    if n < 3:
        raise InsufficientDataError(f"insufficient stems: need at least 3, got {n}", stage="match")
    nb = neighbor_lists(P, params.K)
    k = nb.shape[1]
    ii, jj = np.triu_indices(k, 1)
    tri = np.empty((n * len(ii), 3), dtype=np.int64)
    tri[:, 0] = np.repeat(np.arange(n), len(ii))
    tri[:, 1] = nb[:, ii].ravel()
    tri[:, 2] = nb[:, jj].ravel()
    tri = np.unique(np.sort(tri, axis=1), axis=0)
    tri = tri[min_altitude(P, tri) >= MIN_ALTITUDE]
    canon = _canonical_order(P, tri)
    edges = _edge_lengths(P, canon)
    P = P.copy()
    for arr in (P, canon, edges):
        arr.flags.writeable = False
    return TriangleSet(P, canon, edges)


def count_bound(n_stems: int, K: int) -> int:
    """Upper bound on the local triangle count: ``(K^2 - K) / 2`` per stem."""
    return (K * K - K) // 2 * n_stems


def exhaustive_count(n_stems: int) -> int:
    """Number of triangles over all stem triples, ``N^3/6 - N^2/2 + N/3``."""
    n = n_stems
    return (n ** 3 - 3 * n ** 2 + 2 * n) // 6


# ---------------------------------------------------------------------------
# local matching
# ---------------------------------------------------------------------------

def local_dissimilarity(t1, t2, epsilon: float) -> Optional[float]:
    """Sum of canonical edge-length differences, or None if any difference reaches ``epsilon``."""
    e1 = np.asarray(getattr(t1, "edge_lengths", t1), dtype=np.float64)
    e2 = np.asarray(getattr(t2, "edge_lengths", t2), dtype=np.float64)
    diff = np.abs(e1 - e2)
    if np.any(diff >= epsilon):
        return None
    return float(diff.sum())


@njit(parallel=True, cache=True)
def _local_kernel(src_edges, tgt_edges, epsilon):
    ns, nt = src_edges.shape[0], tgt_edges.shape[0]
    best = np.full(nt, -1, dtype=np.int64)
    best_d = np.full(nt, np.inf)
    tests = np.zeros(nt, dtype=np.int64)
    for t in prange(nt):
        a0, a1, a2 = tgt_edges[t, 0], tgt_edges[t, 1], tgt_edges[t, 2]
        bi = -1
        bd = np.inf
        done = 0
        for s in range(ns):
            done += 1
            d0 = abs(src_edges[s, 0] - a0)
            if d0 >= epsilon:
                continue
            d1 = abs(src_edges[s, 1] - a1)
            if d1 >= epsilon:
                continue
            d2 = abs(src_edges[s, 2] - a2)
            if d2 >= epsilon:
                continue
            d = d0 + d1 + d2
            if d < bd:
                bd = d
                bi = s
        best[t] = bi
        best_d[t] = bd
        tests[t] = done
    return best, best_d, tests


def _local_arrays(src: TriangleSet, tgt: TriangleSet, params: MatchParams):
    best, best_d, tests = _local_kernel(np.ascontiguousarray(src.edges), np.ascontiguousarray(tgt.edges),
                                 float(params.epsilon))
    t = np.flatnonzero(best >= 0)
    return best[t], t, best_d[t], int(tests.sum())


def local_match(src: TriangleSet, tgt: TriangleSet, params: MatchParams = MatchParams(),
                stats: Optional[MatchStats] = None) -> list[MatchedPair]:
    """Best source triangle for every target triangle that has an admissible one.

    Every (source, target) combination is tested; among equally good sources
    the lowest index wins. Pairs are listed by target triangle index.

    Raises:
        NoLocalMatchesError: no triangle pair passes the edge test.
    """
    if len(src) == 0 or len(tgt) == 0:
        raise NoLocalMatchesError("no local matches: a triangle set is empty", stage="match")
    s, t, d, tests = _local_arrays(src, tgt, params)
    if stats is not None:
        stats.source_triangles, stats.target_triangles = len(src), len(tgt)
        stats.local_tests += tests
        stats.local_pairs = len(s)
    if len(s) == 0:
        raise NoLocalMatchesError("no local matches: no congruent triangle pair", stage="match")
    return [MatchedPair(int(a), int(b), float(c)) for a, b, c in zip(s, t, d)]


# ---------------------------------------------------------------------------
# global matching
# ---------------------------------------------------------------------------

def stem_distances(positions) -> np.ndarray:
    """Euclidean distance matrix between stems; cross-edge lengths are read from it."""
    P = _positions(positions)
    d = P[:, None, :] - P[None, :, :]
    return np.sqrt((d * d).sum(axis=2))


def global_dissimilarity(u1: MatchedPair, u2: MatchedPair, src: TriangleSet, tgt: TriangleSet) -> float:
    """Largest length difference over the nine cross edges between two matched pairs."""
    s1, s2 = src.vertices[u1.source], src.vertices[u2.source]
    t1, t2 = tgt.vertices[u1.target], tgt.vertices[u2.target]
    ds = stem_distances(src.positions[np.concatenate([s1, s2])])[:3, 3:]
    dt = stem_distances(tgt.positions[np.concatenate([t1, t2])])[:3, 3:]
    return float(np.abs(ds - dt).max())


@njit(inline="always")
def _seed_weights(Ds, Dt, si, ti, VP, w):
    """For every vertex pair (x, y): largest difference between x's source distances and
    y's target distances to the seed's three vertices."""
    rs0, rs1, rs2 = Ds[si[0]], Ds[si[1]], Ds[si[2]]
    rt0, rt1, rt2 = Dt[ti[0]], Dt[ti[1]], Dt[ti[2]]
    for m in range(VP.shape[0]):
        x, y = VP[m, 0], VP[m, 1]
        w[m] = max(abs(rs0[x] - rt0[y]), abs(rs1[x] - rt1[y]), abs(rs2[x] - rt2[y]))


@njit(parallel=True, cache=True)
def _global_kernel(Ds, Dt, VS, VT, VP, PJ, epsilon):
    # VS, VT: (N_u, 3) stem indices of each pair's source and target triangle.
    # VP: (M, 2) distinct (source stem, target stem) vertex pairs; PJ: (N_u, 3) rows of VP per pair.
    # The nine cross edges of pairs i and j are covered by the seed weights of j's three vertex pairs.
    n = VS.shape[0]
    size = np.ones(n, dtype=np.int64)
    dsum = np.zeros(n)
    tests = np.zeros(n, dtype=np.int64)
    for i in prange(n):
        w = np.empty(VP.shape[0])
        _seed_weights(Ds, Dt, VS[i], VT[i], VP, w)
        cnt = 0
        acc = 0.0
        done = 0
        for j in range(n):
            if j == i:
                continue
            done += 1
            worst = max(w[PJ[j, 0]], w[PJ[j, 1]], w[PJ[j, 2]])
            if worst < epsilon:
                cnt += 1
                acc += worst
        size[i] = cnt + 1
        dsum[i] = acc
        tests[i] = done
    return size, dsum, tests


@njit(cache=True)
def _members_kernel(Ds, Dt, VS, VT, VP, PJ, seed, epsilon):
    n = VS.shape[0]
    w = np.empty(VP.shape[0])
    _seed_weights(Ds, Dt, VS[seed], VT[seed], VP, w)
    keep = np.zeros(n, dtype=np.bool_)
    for j in range(n):
        keep[j] = j == seed or max(w[PJ[j, 0]], w[PJ[j, 1]], w[PJ[j, 2]]) < epsilon
    return np.flatnonzero(keep)


def _pair_vertices(pairs, src: TriangleSet, tgt: TriangleSet):
    s = np.array([u.source for u in pairs], dtype=np.int64)
    t = np.array([u.target for u in pairs], dtype=np.int64)
    VS = np.ascontiguousarray(src.vertices[s])
    VT = np.ascontiguousarray(tgt.vertices[t])
    keys = VS.ravel() * len(tgt.positions) + VT.ravel()
    uniq, inv = np.unique(keys, return_inverse=True)
    VP = np.ascontiguousarray(np.column_stack([uniq // len(tgt.positions), uniq % len(tgt.positions)]))
    PJ = np.ascontiguousarray(inv.reshape(-1, 3))
    return stem_distances(src.positions), stem_distances(tgt.positions), VS, VT, VP, PJ


def consensus_sets(pairs: list[MatchedPair], src: TriangleSet, tgt: TriangleSet,
                   params: MatchParams = MatchParams(), stats: Optional[MatchStats] = None):
    """Size and mean member dissimilarity of the consensus set grown from every seed pair.

    The mean is taken over the members other than the seed (0 for a lone seed).
    """
    size, dsum, tests = _global_kernel(*_pair_vertices(pairs, src, tgt), float(params.epsilon))
    if stats is not None:
        stats.global_tests += int(tests.sum())
    mean = np.where(size > 1, dsum / np.maximum(size - 1, 1), 0.0)
    return size, mean


def best_consensus(pairs: list[MatchedPair], src: TriangleSet, tgt: TriangleSet,
                   params: MatchParams = MatchParams(), stats: Optional[MatchStats] = None) -> ConsensusSet:
    """Largest consensus set; ties go to the smaller mean dissimilarity, then the lower seed index."""
    if not pairs:
        raise NoLocalMatchesError("no local matches to group", stage="match")
    size, mean = consensus_sets(pairs, src, tgt, params, stats)
    n = len(pairs)
    seed = int(np.lexsort((np.arange(n), mean, -size))[0])
    members = _members_kernel(*_pair_vertices(pairs, src, tgt), seed, float(params.epsilon))
    if stats is not None:
        stats.consensus_size = len(members)
    return ConsensusSet(seed, members.astype(np.int64), float(mean[seed]))


def extract_correspondences(pairs: list[MatchedPair], consensus: ConsensusSet, src: TriangleSet,
                            tgt: TriangleSet) -> np.ndarray:
    """One-to-one stem pairs from the vertices of a consensus set's member pairs.

    Candidate (source, target) vertex pairs are ranked by how many member
    pairs propose them (more first), then by the summed local dissimilarity
    of those members (less first), then by index; each is accepted unless one
    of its stems is already taken.
    """
    votes: dict[tuple[int, int], list] = {}
    for m in consensus.members:
        u = pairs[int(m)]
        for a, b in zip(src.vertices[u.source], tgt.vertices[u.target]):
            v = votes.setdefault((int(a), int(b)), [0, 0.0])
            v[0] += 1
            v[1] += u.dissimilarity
    ranked = sorted(votes.items(), key=lambda kv: (-kv[1][0], kv[1][1], kv[0]))
    used_s, used_t, out = set(), set(), []
    for (a, b), _ in ranked:
        if a in used_s or b in used_t:
            continue
        used_s.add(a)
        used_t.add(b)
        out.append((a, b))
    out.sort()
    return np.array(out, dtype=np.int64).reshape(-1, 2)


def prune_inconsistent(corr: np.ndarray, src: TriangleSet, tgt: TriangleSet, epsilon: float) -> np.ndarray:
    """Drop correspondences that do not move rigidly with the rest.

    For each pair the median, over the other pairs, of the difference between
    its source-side and target-side stem distances is its rigidity residual.
    The pair with the largest residual at or above ``epsilon`` is removed and
    the residuals recomputed until every remaining pair is below ``epsilon``.
    """
    keep = np.asarray(corr, dtype=np.int64).reshape(-1, 2)
    if len(keep) < 3:
        return keep
    Ds = stem_distances(src.positions[keep[:, 0]])
    Dt = stem_distances(tgt.positions[keep[:, 1]])
    alive = np.ones(len(keep), dtype=bool)
    while alive.sum() >= 3:
        idx = np.flatnonzero(alive)
        diff = np.abs(Ds[np.ix_(idx, idx)] - Dt[np.ix_(idx, idx)])
        np.fill_diagonal(diff, np.nan)
        res = np.nanmedian(diff, axis=1)
        worst = int(np.argmax(res))  # first index on ties
        if res[worst] < epsilon:
            break
        alive[idx[worst]] = False
    return keep[alive]


def global_match(pairs: list[MatchedPair], src: TriangleSet, tgt: TriangleSet,
                 params: MatchParams = MatchParams(), stats: Optional[MatchStats] = None) -> CorrespondenceSet:
    """Correspondences from the largest consensus set of matched triangle pairs.

    Raises:
        NoLocalMatchesError: ``pairs`` is empty.
        InsufficientCorrespondencesError: fewer than three one-to-one pairs result.
    """
    stats = stats if stats is not None else MatchStats()
    consensus = best_consensus(pairs, src, tgt, params, stats)
    corr = prune_inconsistent(extract_correspondences(pairs, consensus, src, tgt), src, tgt,
                              float(params.epsilon))
    if len(corr) < 3:
        raise InsufficientCorrespondencesError(
            f"insufficient correspondences: {len(corr)} (need 3)", stage="match")
    return CorrespondenceSet(corr, consensus, stats)


def match_stems(src_stems, tgt_stems, params: MatchParams = MatchParams()) -> CorrespondenceSet:
    """Triangles, local matching and global matching in one call."""
    stats = MatchStats()
    src = build_triangles(src_stems, params)
    tgt = build_triangles(tgt_stems, params)
    pairs = local_match(src, tgt, params, stats)
    return global_match(pairs, src, tgt, params, stats)
