"""Coarse differentiation: monotonicity of path images, multiscale statistics over box
geodesic families, good tiles, orientation votes and per-tile product-map fits."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit, vectorize

from .core import PipelineConfig, PreconditionViolation
from .dl_geometry import Box, DLVertex, _prefix, dl_distance, embed_ids
from .trees import tree_distance


class NoGoodScale(RuntimeError):
    pass


class MalformedGraph(ValueError):
    pass


class DegenerateFace(ValueError):
    pass


class BoundViolation(AssertionError):
    pass


class HypothesisFail(ValueError):
    def __init__(self, name: str, detail: str = ""):
        super().__init__(f"{name}: {detail}" if detail else name)
        self.name = name


# level-set kernels -------------------------------------------------------------
#
# Paths are piecewise linear between samples.  For a fixed level y the times
# with height y form a set whose first and last points are piecewise linear in
# y, min of linear functions for the first and max for the last, so the
# spread last - first (and (1 - eta) last - first) is convex in y between
# consecutive sample heights.  Checking every sample height is therefore exact.

@njit(cache=True)
def _crossings(times, h, y):
    first = np.inf
    last = -np.inf
    for i in range(len(h)):
        if h[i] == y:
            if times[i] < first:
                first = times[i]
            if times[i] > last:
                last = times[i]
        if i + 1 < len(h):
            a, b = h[i], h[i + 1]
            if (a - y) * (b - y) < 0:
                s = times[i] + (times[i + 1] - times[i]) * (y - a) / (b - a)
                if s < first:
                    first = s
                if s > last:
                    last = s
    return first, last


@njit(cache=True)
def _spread(times, h, eta):
    """max over levels of (1 - eta) last - first, with the attaining times."""
    best = -np.inf
    w1 = 0.0
    w2 = 0.0
    for k in range(len(h)):
        f, l = _crossings(times, h, h[k])
        v = (1.0 - eta) * l - f
        if v > best:
            best = v
            w1 = f
            w2 = l
    return best, w1, w2


@njit(cache=True)
def _integer_spread(h):
    # unit time steps and integer heights: levels are integers in the range
    lo = h.min()
    hi = h.max()
    best = 0.0
    for y in range(lo, hi + 1):
        first = np.inf
        last = -np.inf
        for i in range(len(h)):
            if h[i] == y:
                first = min(first, float(i))
                last = max(last, float(i))
            if i + 1 < len(h):
                a, b = h[i], h[i + 1]
                if (a - y) * (b - y) < 0:
                    s = i + (y - a) / (b - a)
                    first = min(first, s)
                    last = max(last, s)
        if last - first > best:
            best = last - first
    return best


@njit(cache=True)
def _window_fail(H, lim):
    out = np.zeros(H.shape[0], dtype=np.bool_)
    for p in range(H.shape[0]):
        out[p] = _integer_spread(H[p]) >= lim
    return out


def _rel(x: float) -> float:
    # comparisons against eps*r use a relative tolerance so that exact ties count
    return x * (1 - 1e-12)


# sampled paths -------------------------------------------------------------------

@dataclass
class SampledPath:
    times: np.ndarray
    heights: np.ndarray
    ids: np.ndarray | None = None
    box: Box | None = None
    source: tuple | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.heights = np.asarray(self.heights, dtype=float)
        if len(self.times) != len(self.heights) or len(self.times) == 0:
            raise ValueError("times and heights must be nonempty and aligned")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must increase")

    @property
    def r(self) -> float:
        return float(self.times[-1] - self.times[0])

    @classmethod
    def from_ids(cls, box: Box, ids, source=None) -> "SampledPath":
        ids = np.asarray(ids, dtype=np.int64)
        h = box.coords[0][ids] + box.h_bottom
        return cls(np.arange(len(ids), dtype=float), h, ids, box, source)

    @classmethod
    def from_heights(cls, heights, source=None) -> "SampledPath":
        return cls(np.arange(len(heights), dtype=float), heights, source=source)


@dataclass(frozen=True)
class MonotoneResult:
    ok: bool
    spread: float
    witness: tuple[float, float] | None

    def __bool__(self) -> bool:
        return self.ok


def is_epsilon_monotone(path: SampledPath, eps: float) -> MonotoneResult:
    """Equal-height times closer than eps r; on failure the widest equal-height pair."""
    if not path.r > 0:
        raise ValueError("path length must be positive")
    t = path.times - path.times[0]
    s, a, b = _spread(t, path.heights, 0.0)
    ok = s < _rel(eps * path.r)
    return MonotoneResult(bool(ok), float(s), None if ok else (float(a), float(b)))


def is_weakly_monotone(path: SampledPath, eta: float, c1: float) -> MonotoneResult:
    """t2 - t1 < eta t2 + c1 for equal-height times t1 < t2."""
    if not path.r > 0:
        raise ValueError("path length must be positive")
    t = path.times - path.times[0]
    s, a, b = _spread(t, path.heights, eta)
    ok = s < _rel(c1) if c1 > 0 else s <= 0
    return MonotoneResult(bool(ok), float(s), None if ok else (float(a), float(b)))


def subdivision_gain(path: SampledPath, N: int, eps: float | None = None, kappa: float = 1.0,
                     c_add: float = 0.0, const: float = 8.0) -> tuple[float, float, float]:
    """(sum_j |h(t_{j+1}) - h(t_j)| on N equal pieces, |h(end) - h(start)|, gain).

    With ``eps`` given, a path that is not eps-monotone and r >= 2 kappa c_add / eps
    (same-height points then stay eps r / (2 kappa) apart), the gain must be at
    least eps r / (const kappa^2); BoundViolation otherwise.
    """
    if N < 1:
        raise ValueError("N must be positive")
    t0, r = path.times[0], path.r
    grid = t0 + r * np.arange(N + 1) / N
    h = np.interp(grid, path.times, path.heights)
    var = float(np.abs(np.diff(h)).sum())
    end = float(abs(path.heights[-1] - path.heights[0]))
    gain = var - end
    if eps is not None and r >= 2 * kappa * c_add / eps and not is_epsilon_monotone(path, eps).ok:
        need = eps * r / (const * kappa ** 2)
        if gain < need - 1e-9:
            raise BoundViolation(f"subdivision gain {gain} below {need} at N={N}")
    return var, end, gain


# vertical fits -----------------------------------------------------------------

@dataclass
class VerticalFit:
    t_lo: int
    t_hi: int
    x: int          # T1 index at level t_lo of the target box
    y: int          # T2 index at level t_hi
    ids: np.ndarray
    gap: int

    def to_dict(self) -> dict:
        return {"t_lo": self.t_lo, "t_hi": self.t_hi, "x": self.x, "y": self.y, "gap": self.gap}


def vertical_ids(box: Box, t_lo: int, t_hi: int, x: int, y: int) -> np.ndarray:
    """Box ids of the vertical segment with bottom T1 index x and top T2 index y."""
    t = np.arange(t_lo, t_hi + 1, dtype=np.int64)
    i1 = x // np.int64(box.m) ** (t - t_lo)
    i2 = y // np.int64(box.n) ** (t_hi - t)
    return box.id_of(t, i1, i2)


def _lift1(box: Box, t: int, i: int, t_new: int) -> int:
    # move a T1 index between levels: ancestor upward, zero extension downward
    return i // box.m ** (t_new - t) if t_new >= t else i * box.m ** (t - t_new)


def _lift2(box: Box, t: int, i: int, t_new: int) -> int:
    return i // box.n ** (t - t_new) if t_new <= t else i * box.n ** (t_new - t)


def fit_vertical_segment(box: Box, ids) -> VerticalFit:
    """Vertical segment through the path's level range, read off the endpoints.

    The lower endpoint supplies the T1 coordinate and the upper endpoint the
    T2 coordinate; the gap is the Hausdorff distance between the two sets.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if len(ids) == 0:
        raise ValueError("empty path")
    t, i1, i2 = (c[ids] for c in box.coords)
    lo_end, hi_end = (0, len(ids) - 1) if t[-1] >= t[0] else (len(ids) - 1, 0)
    t_lo, t_hi = int(t.min()), int(t.max())
    x = _lift1(box, int(t[lo_end]), int(i1[lo_end]), t_lo)
    y = _lift2(box, int(t[hi_end]), int(i2[hi_end]), t_hi)
    lam = vertical_ids(box, t_lo, t_hi, x, y)
    d = box.distance_ids(ids[:, None], lam[None, :])
    gap = int(max(d.min(axis=1).max(), d.min(axis=0).max()))
    return VerticalFit(t_lo, t_hi, x, y, lam, gap)


def weak_gap_profile(box: Box, ids) -> np.ndarray:
    """d(alpha(t), lambda(t)) for the endpoint fit, lambda parametrized by height."""
    fit = fit_vertical_segment(box, ids)
    ids = np.asarray(ids, dtype=np.int64)
    t = box.coords[0][ids]
    lam = fit.ids[t - fit.t_lo]
    return box.distance_ids(ids, lam)


# scale scans -------------------------------------------------------------------

def window_segments(L: int, m: int, n: int, a: int, r: int) -> tuple[np.ndarray, np.ndarray]:
    """Local (t, i1, i2) rows of every distinct segment of the window [a, a+r].

    Segment (u, w) has bottom T1 index u and top T2 index w; it is shared by
    m^a n^(L-a-r) box geodesics.  Rows are ordered u-major.
    """
    U, W = m ** (L - a), n ** (a + r)
    u = np.repeat(np.arange(U, dtype=np.int64), W)[:, None]
    w = np.tile(np.arange(W, dtype=np.int64), U)[:, None]
    t = np.arange(a, a + r + 1, dtype=np.int64)[None, :]
    i1 = u // np.int64(m) ** (t - a)
    i2 = w // np.int64(n) ** (a + r - t)
    return np.broadcast_to(t, i1.shape), i1, i2


def window_ids(box: Box, a: int, r: int) -> np.ndarray:
    t, i1, i2 = window_segments(box.L, box.m, box.n, a, r)
    return box.id_of(t, i1, i2)


def window_failures(box: Box, target_levels: np.ndarray, a: int, r: int, eps: float) -> np.ndarray:
    """Fail flags of the window's segments, shape (m^(L-a), n^(a+r))."""
    ids = window_ids(box, a, r)
    H = np.ascontiguousarray(target_levels[ids])
    flags = _window_fail(H, _rel(eps * r))
    return flags.reshape(box.m ** (box.L - a), box.n ** (a + r))


@dataclass
class ScaleStats:
    ladder: tuple[int, ...]
    L: int
    epsilon: float
    family_average: list[float]
    threshold: float
    s_star: int | None
    sum_bound: float
    max_sum: float
    violations: int
    evaluations: int
    windows: dict = field(default_factory=dict, repr=False)
    per_path: np.ndarray | None = field(default=None, repr=False)

    @property
    def R(self) -> int | None:
        return None if self.s_star is None else self.ladder[self.s_star]

    def require(self) -> int:
        if self.s_star is None:
            raise NoGoodScale(f"no scale with family average <= {self.threshold:g}: {self.family_average}")
        return self.s_star

    def to_dict(self) -> dict:
        return {
            "ladder": list(self.ladder), "L": self.L, "family_average": self.family_average,
            "threshold": self.threshold, "s_star": self.s_star, "R": self.R,
            "sum_bound": self.sum_bound, "max_sum": self.max_sum, "violations": self.violations,
            "path_scale_evaluations": self.evaluations,
        }

    def csv_rows(self, limit: int | None = None):
        """(path_id, s, r_s, delta_s) rows; path_id = j1 * n^L + j2."""
        if self.per_path is None:
            return
        P = self.per_path.shape[1] if limit is None else min(limit, self.per_path.shape[1])
        for p in range(P):
            for s, r in enumerate(self.ladder):
                yield p, s, r, float(self.per_path[s, p])


def path_deltas(box: Box, F: dict, r: int) -> np.ndarray:
    """delta_s for every box geodesic (j1 major) from the window fail tables at scale r."""
    m, n, L = box.m, box.n, box.L
    j1 = np.arange(m ** L, dtype=np.int64)[:, None]
    j2 = np.arange(n ** L, dtype=np.int64)[None, :]
    acc = np.zeros((m ** L, n ** L), dtype=np.float64)
    for a in range(0, L, r):
        acc += F[a][j1 // m ** a, j2 // n ** (L - a - r)]
    return (acc / (L // r)).ravel()


def scale_scan(box: Box, phi, ladder, cfg: PipelineConfig, kappa: float = 1.0,
               per_path: bool = True) -> ScaleStats:
    """delta_s over the full geodesic family of the box on the aligned grid of each scale."""
    ladder = tuple(int(r) for r in ladder)
    if any(box.L % r for r in ladder):
        raise ValueError(f"every scale must divide L={box.L}")
    tgt, img = phi.image(box)
    levels = tgt.coords[0][img]
    eps = cfg.epsilon
    windows = {}
    averages = []
    for r in ladder:
        F = {a: window_failures(box, levels, a, r, eps) for a in range(0, box.L, r)}
        windows[r] = F
        averages.append(float(np.mean([f.mean() for f in F.values()])))
    thr = cfg.delta ** cfg.ledger.average_exp
    s_star = next((s for s, v in enumerate(averages) if v <= thr), None)
    bound = cfg.ledger.scales_sum * kappa ** 3 / eps
    pp = None
    max_sum = float(sum(averages)) if not per_path else 0.0
    violations = 0
    if per_path:
        pp = np.stack([path_deltas(box, windows[r], r) for r in ladder])
        sums = pp.sum(axis=0)
        max_sum = float(sums.max())
        violations = int((sums > bound).sum())
    return ScaleStats(ladder, box.L, eps, averages, thr, s_star, bound, max_sum, violations,
                      box.geodesic_count * len(ladder), windows, pp)


def scan_paths(paths: list[SampledPath], ladder, eps: float) -> np.ndarray:
    """delta_s of arbitrary sampled paths (rows) at each scale (columns).

    Each path is cut on the aligned grid j r_s of its own parameter.
    """
    out = np.zeros((len(paths), len(ladder)))
    for p, path in enumerate(paths):
        for s, r in enumerate(ladder):
            k = int(round(path.r / r))
            bad = 0
            for j in range(k):
                sel = (path.times >= path.times[0] + j * r - 1e-9) & (path.times <= path.times[0] + (j + 1) * r + 1e-9)
                sub = SampledPath(path.times[sel], path.heights[sel])
                bad += not is_epsilon_monotone(sub, eps).ok
            out[p, s] = bad / k
    return out


# good tiles ------------------------------------------------------------------------

def tile_band_mu(box: Box, R: int, band: int) -> int:
    """Parent measure owned by one tile of a band: levels (band R, (band+1) R], plus level 0."""
    m, n, L = box.m, box.n, box.L
    lo = band * R
    levels = range(lo if band == 0 else lo + 1, lo + R + 1)
    return sum(m ** (R - (t - lo)) * n ** (t - lo) * box.level_weight(t) for t in levels)


@dataclass
class TileRef:
    band: int
    i1: int
    i2: int
    average: float

    def to_dict(self) -> dict:
        return {"band": self.band, "i1": self.i1, "i2": self.i2, "average": self.average}


@dataclass
class GoodBoxReport:
    R: int
    tiles: list[TileRef]
    good: list[int]
    threshold: float
    good_mu_fraction: float
    markov_bound: float
    family_average: float
    votes: dict = field(default_factory=dict)
    fits: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "R": self.R, "tile_count": len(self.tiles), "good_count": len(self.good),
            "threshold": self.threshold, "good_mu_fraction": self.good_mu_fraction,
            "markov_bound": self.markov_bound, "family_average": self.family_average,
            "bad_tiles": [self.tiles[k].to_dict() for k in range(len(self.tiles)) if k not in set(self.good)],
            "votes": {str(k): v.to_dict() for k, v in sorted(self.votes.items())},
            "fits": {str(k): v.to_dict() for k, v in sorted(self.fits.items())},
            "notes": list(self.notes),
        }


def tile_averages(box: Box, F: dict, R: int) -> list[TileRef]:
    """Per-tile mean failure over the tile's own geodesic family (its window segments)."""
    m, n, L = box.m, box.n, box.L
    out = []
    for band in range(L // R):
        a = band * R
        f = F[a]  # (m^(L-a), n^(a+R)); the tile is (u // m^R, w // n^R)
        U1, W1 = m ** (L - a - R), n ** a
        means = f.reshape(U1, m ** R, W1, n ** R).mean(axis=(1, 3))
        for I1 in range(U1):
            for I2 in range(W1):
                out.append(TileRef(band, I1, I2, float(means[I1, I2])))
    return out


def select_good_boxes(box: Box, stats: ScaleStats, cfg: PipelineConfig, s: int | None = None) -> GoodBoxReport:
    """Tiles at R = r_s whose family average is at most goodbox_factor delta^goodbox_exp."""
    s = stats.require() if s is None else s
    R = stats.ladder[s]
    led = cfg.ledger
    thr = led.goodbox_factor * cfg.delta ** led.goodbox_exp
    tiles = tile_averages(box, stats.windows[R], R)
    good = [k for k, t in enumerate(tiles) if t.average <= thr]
    mu_band = [tile_band_mu(box, R, b) for b in range(box.L // R)]
    good_mu = sum(mu_band[tiles[k].band] for k in good)
    frac = good_mu / box.mu()
    # Markov per band: bad tile fraction <= band average / thr, then weight bands by measure
    band_avg = [float(stats.windows[R][b * R].mean()) for b in range(box.L // R)]
    per_band = [len([1 for t in tiles if t.band == b]) for b in range(box.L // R)]
    markov = sum(min(1.0, band_avg[b] / thr) * mu_band[b] * per_band[b] for b in range(box.L // R)) / box.mu()
    return GoodBoxReport(R, tiles, good, thr, frac, markov, stats.family_average[s])


def tile_geodesic_ids(box: Box, R: int, tile: TileRef) -> np.ndarray:
    """Parent ids along the tile's geodesics, shape (m^R n^R, R+1), rows (x, y) x-major.

    x is the tile-local bottom T1 index and y the tile-local top T2 index.
    """
    m, n = box.m, box.n
    a = tile.band * R
    x = np.repeat(np.arange(m ** R, dtype=np.int64), n ** R)[:, None]
    y = np.tile(np.arange(n ** R, dtype=np.int64), m ** R)[:, None]
    u = tile.i1 * m ** R + x
    w = tile.i2 * n ** R + y
    t = np.arange(a, a + R + 1, dtype=np.int64)[None, :]
    i1 = u // np.int64(m) ** (t - a)
    i2 = w // np.int64(n) ** (a + R - t)
    return box.id_of(t, i1, i2)


def tile_fail_flags(stats: ScaleStats, box: Box, R: int, tile: TileRef) -> np.ndarray:
    m, n = box.m, box.n
    a = tile.band * R
    f = stats.windows[R][a]
    blk = f[tile.i1 * m ** R:(tile.i1 + 1) * m ** R, tile.i2 * n ** R:(tile.i2 + 1) * n ** R]
    return blk.ravel()


# orientation -------------------------------------------------------------------------

@dataclass
class OrientationVote:
    up: float
    down: float
    monotone: float
    dominant: str
    required: float
    holds: bool

    def to_dict(self) -> dict:
        return {"up": self.up, "down": self.down, "monotone": self.monotone, "dominant": self.dominant,
                "required": self.required, "holds": self.holds}


def alignment_vote(G_levels: np.ndarray, fails: np.ndarray, cfg: PipelineConfig) -> OrientationVote:
    """Vote over a tile's geodesic images: target levels (rows, R+1) and fail flags."""
    rise = G_levels[:, -1] - G_levels[:, 0]
    mono = ~fails
    k = len(fails)
    up = float((mono & (rise > 0)).sum() / k)
    down = float((mono & (rise < 0)).sum() / k)
    need = 1 - cfg.ledger.alignment * cfg.delta
    dom = "up" if up >= down else "down"
    return OrientationVote(up, down, float(mono.mean()), dom, need, max(up, down) >= need)


def classify_bipartite_orientation(edges) -> dict:
    """Orient K_{2,2} on p1, p2, q1, q2 and report case i, ii or iii.

    ``edges`` is four (tail, head) pairs with names from {"p1","p2","q1","q2"},
    one per (p_i, q_j).  Case iii comes with two distinct simple directed paths
    between the same endpoints, one endpoint being p1 or p2.  Four digraphs
    with k = 2 satisfy none of the cases: the two directed 4-cycles (no two
    simple paths share endpoints) and the two with a source q and a sink q
    (the only doubly joined pair is q1, q2).  They are returned as case
    "none" with the reason.
    """
    P, Q = ("p1", "p2"), ("q1", "q2")
    edges = [tuple(e) for e in edges]
    seen = set()
    for a, b in edges:
        pair = (a, b) if a in P else (b, a)
        if not ((a in P and b in Q) or (a in Q and b in P)) or pair in seen:
            raise MalformedGraph(f"bad edge {a}->{b}")
        seen.add(pair)
    if len(seen) != 4:
        raise MalformedGraph("need exactly one edge per (p_i, q_j)")
    k = sum(1 for a, _ in edges if a in P)
    if k == 4:
        return {"case": "i", "k": k}
    if k == 0:
        return {"case": "ii", "k": k}
    succ = {v: [b for a, b in edges if a == v] for v in P + Q}

    def paths(u, v, seen=()):
        if u == v:
            yield (u,)
            return
        for w in succ[u]:
            if w not in seen:
                for rest in paths(w, v, seen + (u,)):
                    yield (u,) + rest

    doubled = []
    for u, v in itertools.permutations(P + Q, 2):
        ps = list(paths(u, v))
        if len(ps) >= 2:
            if u in P or v in P:
                return {"case": "iii", "k": k, "ends": (u, v), "paths": ps[:2]}
            doubled.append(((u, v), ps[:2]))
    if doubled:
        (u, v), ps = doubled[0]
        return {"case": "none", "k": k, "reason": "both ends in Q", "ends": (u, v), "paths": ps}
    return {"case": "none", "k": k, "reason": "directed 4-cycle"}


@dataclass
class QuadResult:
    case: str            # "up", "down" or "mixed"
    c1: int
    deviation_height: int
    lengths: tuple

    def to_dict(self) -> dict:
        return {"case": self.case, "c1": self.c1, "deviation_height": self.deviation_height,
                "lengths": list(self.lengths)}


def _dist_to_set(p: DLVertex, pts) -> int:
    return min(dl_distance(p, w) for w in pts)


def quadrilateral_classify(p: tuple, q: tuple, segs: dict, C: float, D: float, eps: float) -> QuadResult:
    """Check the hypotheses on a DL quadrilateral and classify its orientation.

    ``segs[(i, j)]`` is the vertex list of a vertical segment from near p_i to
    near q_j (i, j in {1, 2}).  The horocycle deviation C1 is the distance from
    p2 to the x-horocycle (up) or y-horocycle (down) through p1.  Mixed
    orientations are returned, not raised: they would contradict the lemma.
    """
    lengths = []
    for (i, j), g in sorted(segs.items()):
        if len(g) < 2:
            raise HypothesisFail("length", f"segment {i}{j} is a point")
        for a, b in zip(g, g[1:]):
            if abs(a.height - b.height) != 1 or dl_distance(a, b) != 1:
                raise HypothesisFail("vertical", f"segment {i}{j} is not a unit-step path")
        if len({v.height for v in g}) != len(g) or dl_distance(g[0], g[-1]) != len(g) - 1:
            raise HypothesisFail("vertical", f"segment {i}{j} is not a vertical geodesic")
        ell = len(g) - 1
        lengths.append(ell)
        if dl_distance(p[i - 1], g[0]) > C:
            raise HypothesisFail("near_p", f"segment {i}{j} starts far from p{i}")
        if dl_distance(q[j - 1], g[-1]) > D:
            raise HypothesisFail("near_q", f"segment {i}{j} ends far from q{j}")
        if not D < eps * ell:
            raise HypothesisFail("D<eps*l", f"D={D} not below eps*l={eps * ell}")
    for i in (1, 2):
        g1, g2 = segs[i, 1], segs[i, 2]
        for t, x in enumerate(g1):
            if _dist_to_set(x, g2) < t / 10 - C:
                raise HypothesisFail("divergence", f"segments from p{i} do not diverge at t={t}")
    ups = [g[-1].height > g[0].height for _, g in sorted(segs.items())]
    p1, p2 = p
    dh = abs(p1.height - p2.height)
    if all(ups):
        return QuadResult("up", tree_distance(p1.t2, p2.t2), dh, tuple(lengths))
    if not any(ups):
        return QuadResult("down", tree_distance(p1.t1, p2.t1), dh, tuple(lengths))
    return QuadResult("mixed", -1, dh, tuple(lengths))


# uniform sets ----------------------------------------------------------------------

@dataclass
class UniformSet:
    ids: np.ndarray          # tile-local ids in U
    bad_fraction: np.ndarray  # F(x) for every tile vertex
    theta1: float
    mu_fraction: float
    worst_in_u: float

    @property
    def holds(self) -> bool:
        s = math.sqrt(self.theta1)
        return self.mu_fraction >= 1 - 2 * s and self.worst_in_u <= s

    def to_dict(self) -> dict:
        return {"size": int(len(self.ids)), "theta1": self.theta1, "mu_fraction": self.mu_fraction,
                "worst_in_u": self.worst_in_u, "holds": self.holds}


def uniform_subset(box: Box, good_pairs: np.ndarray, theta1: float) -> UniformSet:
    """U = {x : F(x) <= sqrt(theta1)} with F(x) the fraction of pairs (geodesic, x) outside E.

    ``good_pairs`` is a boolean (geodesic, position) mask over the box's
    vertical geodesics in ``all_geodesics`` order.  A level-t vertex lies on
    level_weight(t) geodesics, so sum_x F(x) level_weight(t(x)) counts the bad
    pairs and Markov's inequality bounds the measure of the complement of U.
    """
    good_pairs = np.asarray(good_pairs, dtype=bool)
    G = box.geodesic_ids(*box.all_geodesics())
    if good_pairs.shape != G.shape:
        raise ValueError(f"mask shape {good_pairs.shape} != {G.shape}")
    total = good_pairs.size
    if good_pairs.sum() < (1 - theta1) * total - 1e-9:
        raise PreconditionViolation(f"|E| = {int(good_pairs.sum())} below (1 - theta1)|Y'| = {(1 - theta1) * total}")
    bad = np.bincount(G[~good_pairs], minlength=box.size)
    F = bad / box.weights
    U = np.nonzero(F <= math.sqrt(theta1) + 1e-15)[0]
    worst = float(F[U].max()) if len(U) else 0.0
    return UniformSet(U, F, theta1, box.mu(U) / box.mu(), worst)


# product-map fits ------------------------------------------------------------------

@dataclass
class ProductMapFit:
    orientation: str
    f: dict              # bottom-face x -> (target level, index) in the target tree read off there
    g: dict              # top-face y -> (target level, index)
    q: list              # target level per tile level
    U: np.ndarray
    U1: np.ndarray
    U2: np.ndarray
    mu_U: float
    mu_U1: float
    mu_U2: float
    sup_error: int
    c_fit: float
    checks: dict
    values: np.ndarray | None = None   # fitted target id per tile vertex, -1 where undefined

    def to_dict(self) -> dict:
        return {"orientation": self.orientation, "q": list(self.q), "mu_U": self.mu_U, "mu_U1": self.mu_U1,
                "mu_U2": self.mu_U2, "sup_error": self.sup_error, "c_fit": self.c_fit,
                "checks": dict(self.checks), "f_size": len(self.f), "g_size": len(self.g)}


def _lower_median(v: np.ndarray) -> int:
    s = np.sort(v)
    return int(s[(len(s) - 1) // 2])


def extract_product_map(tile: Box, tgt: Box, img: np.ndarray, U: np.ndarray, orientation: str,
                        cfg: PipelineConfig) -> ProductMapFit:
    """Fit (x, y, z) -> (f(x), g(y), q(z)) to phi on a tile.

    ``img`` holds target ids of phi on the tile's vertices (tile id order).
    For an upward tile f reads the target T1 coordinate of the bottom face and
    g the target T2 coordinate of the top face; downward tiles swap the target
    trees.  The fit at p = (t, i1, i2) uses the first bottom-face x below p and
    the first top-face y above p that lie in U.
    """
    if orientation not in ("up", "down"):
        raise ValueError("orientation must be up or down")
    R, m, n = tile.L, tile.m, tile.n
    eps, led = cfg.epsilon, cfg.ledger
    tt, ti1, ti2 = tile.coords
    gt, g1, g2 = tgt.coords
    lev = gt[img]
    inU = np.zeros(tile.size, dtype=bool)
    inU[np.asarray(U, dtype=np.int64)] = True
    q = []
    for t in range(R + 1):
        sel = tile.level_ids(t)
        sel = sel[inU[sel]]
        if len(sel) == 0:
            raise DegenerateFace(f"U misses tile level {t}")
        q.append(_lower_median(lev[sel]))
    q = np.array(q, dtype=np.int64)
    U1 = np.nonzero(inU & (np.abs(lev - q[tt]) <= _tol(led.fit_height * eps * R)))[0]
    bottom = tile.level_ids(0)
    top = tile.level_ids(R)
    F1 = bottom[inU[bottom]]
    F2 = top[inU[top]]
    if len(F1) == 0 or len(F2) == 0:
        raise DegenerateFace("U misses the bottom or top face")
    # bottom-face vertex (0, x, 0) has id x; top-face (R, 0, y) has id offsets[R] + y
    fx = F1 - tile.offsets[0]
    gy = F2 - tile.offsets[R]
    if orientation == "up":
        f = {int(x): (int(gt[img[k]]), int(g1[img[k]])) for x, k in zip(fx, F1)}
        g = {int(y): (int(gt[img[k]]), int(g2[img[k]])) for y, k in zip(gy, F2)}
    else:
        f = {int(x): (int(gt[img[k]]), int(g2[img[k]])) for x, k in zip(fx, F1)}
        g = {int(y): (int(gt[img[k]]), int(g1[img[k]])) for y, k in zip(gy, F2)}
    # first x in F1 below each (t, i1) and first y in F2 above each (t, i2)
    xs = np.full(m ** R + 1, -1, dtype=np.int64)
    ys = np.full(n ** R + 1, -1, dtype=np.int64)
    xs[fx] = fx
    ys[gy] = gy
    fit = np.full(tile.size, -1, dtype=np.int64)
    for k in range(tile.size):
        t, i1, i2 = int(tt[k]), int(ti1[k]), int(ti2[k])
        lo1, hi1 = i1 * m ** t, (i1 + 1) * m ** t
        cand = xs[lo1:hi1]
        cand = cand[cand >= 0]
        lo2, hi2 = i2 * n ** (R - t), (i2 + 1) * n ** (R - t)
        cand2 = ys[lo2:hi2]
        cand2 = cand2[cand2 >= 0]
        if len(cand) == 0 or len(cand2) == 0:
            continue
        x, y = int(cand[0]), int(cand2[0])
        z = int(q[t])
        if orientation == "up":
            (l1, a1), (l2, a2) = f[x], g[y]
        else:
            (l2, a2), (l1, a1) = f[x], g[y]
        j1 = _lift1(tgt, l1, a1, z)
        j2 = _lift2(tgt, l2, a2, z)
        fit[k] = int(tgt.id_of(z, j1, j2))
    has = fit >= 0
    U2 = np.nonzero(has & np.isin(np.arange(tile.size), U1))[0]
    sup = int(tgt.distance_ids(img[U2], fit[U2]).max()) if len(U2) else 0
    mu = tile.mu()
    d4 = cfg.delta ** 0.25
    steps = np.diff(q)
    mono = bool((steps > 0).all()) if orientation == "up" else bool((steps < 0).all())
    checks = {
        "U": tile.mu(U) / mu >= 1 - led.uniform_u * math.sqrt(cfg.delta),
        "U1": tile.mu(U1) / mu >= 1 - led.height_preserving * d4,
        "U2": tile.mu(U2) / mu >= 1 - led.product_map * d4,
        "q_monotone": mono,
    }
    return ProductMapFit(orientation, f, g, [int(v) for v in q], np.asarray(U, dtype=np.int64), U1, U2,
                         tile.mu(U) / mu, tile.mu(U1) / mu, tile.mu(U2) / mu, sup, sup / (eps * R), checks, fit)


def _tol(x: float) -> float:
    return x * (1 + 1e-12)


# Step I driver ---------------------------------------------------------------------

@dataclass
class StepOneResult:
    stats: ScaleStats
    report: GoodBoxReport | None
    kappa: float
    c_fit: float
    ok: bool
    failures: list

    def to_dict(self) -> dict:
        return {"scale_stats": self.stats.to_dict(), "good_boxes": self.report.to_dict() if self.report else None,
                "kappa_hat": self.kappa, "c_fit": self.c_fit, "ok": self.ok, "failures": list(self.failures)}


def step_one(box: Box, phi, cfg: PipelineConfig, ladder, kappa: float = 1.0,
             per_path: bool = False) -> StepOneResult:
    """Scale scan, good tiles, votes, uniform sets and product fits on every good tile."""
    stats = scale_scan(box, phi, ladder, cfg, kappa, per_path=per_path)
    failures = []
    if stats.violations:
        failures.append(f"scales sum bound violated on {stats.violations} paths")
    if stats.s_star is None:
        failures.append("no good scale")
        return StepOneResult(stats, None, kappa, math.inf, False, failures)
    rep = select_good_boxes(box, stats, cfg)
    R = rep.R
    if rep.good_mu_fraction < 1 - cfg.theta:
        failures.append(f"good tiles cover {rep.good_mu_fraction:.4f} < 1 - theta")
    tgt, img = phi.image(box)
    levels = tgt.coords[0][img]
    theta1 = cfg.ledger.alignment * cfg.delta
    c_fit = 0.0
    for k in rep.good:
        tile = rep.tiles[k]
        G = tile_geodesic_ids(box, R, tile)
        fails = tile_fail_flags(stats, box, R, tile)
        vote = alignment_vote(levels[G], fails, cfg)
        rep.votes[k] = vote
        if not vote.holds:
            rep.notes.append(f"tile {k}: dominant fraction {max(vote.up, vote.down):.4f} below {vote.required:.4f}")
        rise = levels[G[:, -1]] - levels[G[:, 0]]
        ok_geo = ~fails & ((rise > 0) if vote.dominant == "up" else (rise < 0))
        tb = _tile_box(box, R, tile)
        mask = np.repeat(ok_geo[:, None], R + 1, axis=1)
        th1 = max(theta1, 1 - ok_geo.mean())
        try:
            us = uniform_subset(tb, mask, th1)
        except PreconditionViolation as exc:  # pragma: no cover - th1 is chosen to satisfy it
            rep.notes.append(f"tile {k}: {exc}")
            continue
        ids = embed_ids(tb, box)
        try:
            fit = extract_product_map(tb, tgt, img[ids], us.ids, vote.dominant, cfg)
        except DegenerateFace as exc:
            rep.notes.append(f"tile {k}: {exc}")
            failures.append(f"degenerate face on tile {k}")
            continue
        rep.fits[k] = fit
        c_fit = max(c_fit, fit.c_fit)
    ok = not failures
    return StepOneResult(stats, rep, kappa, c_fit, ok, failures)


def _tile_box(box: Box, R: int, tile: TileRef) -> Box:
    from .dl_geometry import _digits

    top_level = (tile.band + 1) * R
    bot_level = tile.band * R
    top = box.top.descend(_digits(tile.i1, box.m, box.L - top_level))
    bottom = box.bottom.descend(_digits(tile.i2, box.n, bot_level))
    return Box(top, bottom, R)


def _segment(box: Box, u: int, v: int) -> np.ndarray:
    t, i1, i2 = box.coords
    lo, hi = (u, v) if t[u] < t[v] else (v, u)
    seg = vertical_ids(box, int(t[lo]), int(t[hi]), int(i1[lo]), int(i2[hi]))
    return seg if lo == u else seg[::-1]


@vectorize(["int64(int64, int64, int64, int64, int64)"], cache=True)
def _tree_gap(ia, ib, la, lb, base):
    return la + lb - 2 * _prefix(ia, ib, la, lb, base)


def tree_distances(box: Box) -> tuple[np.ndarray, np.ndarray]:
    """Pairwise T1 and T2 tree distances between box vertices."""
    t, i1, i2 = box.coords
    L = np.int64(box.L)
    d1 = _tree_gap(i1[:, None], i1[None, :], (L - t)[:, None], (L - t)[None, :], np.int64(box.m))
    d2 = _tree_gap(i2[:, None], i2[None, :], t[:, None], t[None, :], np.int64(box.n))
    return d1, d2


def quadrilateral_search(box: Box, simple_only: bool = True) -> dict:
    """Every quadrilateral of exact vertical segments inside the box, classified.

    Corners p1, p2, q1, q2 are distinct vertices with each (p_i, q_j) joined
    by a vertical geodesic (C = D = 0).  Divergence is checked with C = 0,
    i.e. d(g_i1(t), g_i2) >= t/10 for every t.  With ``simple_only`` the four
    segments must form a simple cycle; collinear configurations, where a
    corner lies inside another corner's segment, are counted separately.
    """
    ids = np.arange(box.size)
    D = box.distance_ids(ids[:, None], ids[None, :])
    t = box.coords[0]
    aligned = (D == np.abs(t[:, None] - t[None, :])) & (D > 0)
    partners = [np.nonzero(aligned[u])[0] for u in range(box.size)]
    t1_dist, t2_dist = tree_distances(box)
    segs: dict = {}

    def seg(u, v):
        if (u, v) not in segs:
            segs[u, v] = _segment(box, u, v)
        return segs[u, v]

    div: dict = {}

    def diverge(p, qa, qb):
        # both segments at p, each checked against the other
        if (p, qa, qb) not in div:
            ok = True
            for g1, g2 in ((seg(p, qa), seg(p, qb)), (seg(p, qb), seg(p, qa))):
                d = D[np.ix_(g1, g2)].min(axis=1)
                ok = ok and bool((d >= np.arange(len(g1)) / 10).all())
            div[p, qa, qb] = ok
        return div[p, qa, qb]

    counts = {"up": 0, "down": 0, "mixed": 0, "no_divergence": 0, "not_simple": 0}
    c1 = {"up": 0, "down": 0}
    c1_level = {"up": 0, "down": 0}
    mixed = []
    for p1 in range(box.size):
        for a, b in itertools.combinations(partners[p1], 2):
            q1, q2 = int(a), int(b)
            others = [int(p2) for p2 in np.nonzero(aligned[q1] & aligned[q2])[0] if p2 > p1]
            if not diverge(p1, q1, q2):
                counts["no_divergence"] += len(others)
                continue
            for p2 in others:
                if not diverge(p2, q1, q2):
                    counts["no_divergence"] += 1
                    continue
                g = {(1, 1): seg(p1, q1), (1, 2): seg(p1, q2), (2, 1): seg(p2, q1), (2, 2): seg(p2, q2)}
                cyc = np.concatenate([s[1:-1] for s in g.values()] + [np.array([p1, p2, q1, q2])])
                simple = len(np.unique(cyc)) == len(cyc)
                if not simple:
                    counts["not_simple"] += 1
                    if simple_only:
                        continue
                ups = [t[s[-1]] > t[s[0]] for s in g.values()]
                kind = "up" if all(ups) else "down" if not any(ups) else "mixed"
                counts[kind] += 1
                if kind == "mixed":
                    if len(mixed) < 5:
                        mixed.append((p1, p2, q1, q2))
                    continue
                dev = int(t2_dist[p1, p2] if kind == "up" else t1_dist[p1, p2])
                c1[kind] = max(c1[kind], dev)
                if t[p1] == t[p2]:
                    c1_level[kind] = max(c1_level[kind], dev)
    return {"counts": counts, "c1": c1, "c1_equal_heights": c1_level, "mixed_examples": mixed}
