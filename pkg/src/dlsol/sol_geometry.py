"""Numerical Sol(m,n) with metric ds^2 = dz^2 + e^{-2mz} dx^2 + e^{2nz} dy^2.

There is no closed form for the global distance.  The two coordinate planes
(y fixed, x fixed) are totally geodesic hyperbolic planes with curvature
-m^2 and -n^2, so their distances are exact; everything else is reported
as a (lower, upper) interval.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np
from scipy.optimize import minimize_scalar

from .core import ModelParams, SpaceKind
from .dl_geometry import IndivisibleSize, MixedSpaces

_LOG2 = math.log(2.0)


@dataclass(frozen=True)
class SolPoint:
    x: float
    y: float
    z: float

    def __post_init__(self):
        for name in ("x", "y", "z"):
            v = float(getattr(self, name))
            if not math.isfinite(v):
                raise ValueError(f"non-finite coordinate {name}={v}")
            object.__setattr__(self, name, v)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    def __str__(self) -> str:
        return f"(x={self.x!r}, y={self.y!r}, z={self.z!r})"


def act(p: SolPoint, q: SolPoint, m: float, n: float) -> SolPoint:
    """Left translation of q by p (the group law of R semidirect R^2)."""
    return SolPoint(p.x + math.exp(m * p.z) * q.x, p.y + math.exp(-n * p.z) * q.y, p.z + q.z)


def inverse(p: SolPoint, m: float, n: float) -> SolPoint:
    return SolPoint(-math.exp(-m * p.z) * p.x, -math.exp(n * p.z) * p.y, -p.z)


def _log_sinh(a: float) -> float:
    # log(sinh(a)) for a > 0 without overflow
    if a > 20:
        return a - _LOG2 + math.log1p(-math.exp(-2 * a))
    return math.log(math.sinh(a))


def _arccosh1p_log(logy: float) -> float:
    """arccosh(1 + y) given log(y)."""
    if logy == -math.inf:
        return 0.0
    if logy > 30:
        inv = math.exp(-logy)
        return logy + math.log(1 + inv + math.sqrt(1 + 2 * inv))
    y = math.exp(logy)
    return math.log1p(y + math.sqrt(y * (y + 2)))


def _hyp_distance(dx: float, z1: float, z2: float, k: float) -> float:
    """Distance in the plane dz^2 + e^{-2kz} dx^2 (curvature -k^2)."""
    if k <= 0:
        raise ValueError("curvature parameter must be positive")
    terms = []
    if dx != 0:
        terms.append(2 * math.log(k * abs(dx)) - k * (z1 + z2) - _LOG2)
    dz = abs(z1 - z2)
    if dz != 0:
        terms.append(_LOG2 + 2 * _log_sinh(k * dz / 2))
    if not terms:
        return 0.0
    logy = terms[0] if len(terms) == 1 else float(np.logaddexp(terms[0], terms[1]))
    return _arccosh1p_log(logy) / k


def plane_distance_xz(p1: SolPoint, p2: SolPoint, m: float, check: bool = True) -> float:
    if check and p1.y != p2.y:
        raise ValueError("points do not share the y coordinate")
    return _hyp_distance(p2.x - p1.x, p1.z, p2.z, m)


def plane_distance_yz(p1: SolPoint, p2: SolPoint, n: float, check: bool = True) -> float:
    if check and p1.x != p2.x:
        raise ValueError("points do not share the x coordinate")
    return _hyp_distance(p2.y - p1.y, -p1.z, -p2.z, n)


@dataclass(frozen=True)
class DistanceBounds:
    lower: float
    upper: float
    order: str
    via_height: float

    def __iter__(self) -> Iterator[float]:
        yield self.lower
        yield self.upper

    @property
    def ratio(self) -> float:
        if self.lower == 0:
            return 1.0 if self.upper == 0 else math.inf
        return self.upper / self.lower

    @property
    def gap(self) -> float:
        return self.upper - self.lower


def _two_leg(p1: SolPoint, p2: SolPoint, m: float, n: float, x_first: bool) -> tuple[float, float]:
    if x_first:
        def cost(w):
            return _hyp_distance(p2.x - p1.x, p1.z, w, m) + _hyp_distance(p2.y - p1.y, -w, -p2.z, n)
    else:
        def cost(w):
            return _hyp_distance(p2.y - p1.y, -p1.z, -w, n) + _hyp_distance(p2.x - p1.x, w, p2.z, m)
    # the cost is convex in the turning height (sum of distances to points
    # along a geodesic of each plane), so a bounded scalar search suffices
    cands = [(cost(p1.z), p1.z), (cost(p2.z), p2.z)]
    span = min(c for c, _ in cands)
    lo, hi = min(p1.z, p2.z) - span, max(p1.z, p2.z) + span
    if hi > lo:
        res = minimize_scalar(cost, bounds=(lo, hi), method="bounded",
                              options={"xatol": 1e-10, "maxiter": 500})
        cands.append((float(res.fun), float(res.x)))
    return min(cands)


def sol_distance_bounds(p1: SolPoint, p2: SolPoint, m: float, n: float) -> DistanceBounds:
    """Lower bound from the two 1-Lipschitz plane projections, upper bound from two-leg paths."""
    lower = max(_hyp_distance(p2.x - p1.x, p1.z, p2.z, m), _hyp_distance(p2.y - p1.y, -p1.z, -p2.z, n))
    if p1 == p2:
        return DistanceBounds(0.0, 0.0, "xy", p1.z)
    a = _two_leg(p1, p2, m, n, True)
    b = _two_leg(p1, p2, m, n, False)
    (up, w), order = (a, "xy") if a[0] <= b[0] else (b, "yx")
    return DistanceBounds(lower, max(up, lower), order, w)


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(16)


def segment_length(a: np.ndarray, b: np.ndarray, m: float, n: float) -> np.ndarray:
    """Length of the coordinate-straight segments a -> b (arrays of shape (..., 3))."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    d = b - a
    s = (_GL_NODES + 1) / 2
    z = a[..., 2, None] + s * d[..., 2, None]
    speed = np.sqrt(d[..., 2, None] ** 2 + np.exp(-2 * m * z) * d[..., 0, None] ** 2
                    + np.exp(2 * n * z) * d[..., 1, None] ** 2)
    return speed @ (_GL_WEIGHTS / 2)


def path_length(points: np.ndarray, m: float, n: float) -> float:
    pts = np.asarray(points, dtype=float)
    return float(segment_length(pts[:-1], pts[1:], m, n).sum())


@dataclass(frozen=True)
class SolVerticalGeodesic:
    x: float
    y: float

    def point_at(self, z: float) -> SolPoint:
        return SolPoint(self.x, self.y, z)


def same_x_horocycle(p: SolPoint, q: SolPoint, tol: float = 0.0) -> bool:
    """Same height and same y: the pair lies on a horocycle of an xz-plane."""
    return abs(p.z - q.z) <= tol and abs(p.y - q.y) <= tol


def same_y_horocycle(p: SolPoint, q: SolPoint, tol: float = 0.0) -> bool:
    return abs(p.z - q.z) <= tol and abs(p.x - q.x) <= tol


@dataclass(frozen=True)
class SolBox:
    """Left translate by ``center`` of [-e^{2mL}/2, e^{2mL}/2] x [-e^{2nL}/2, e^{2nL}/2] x [-L/2, L/2]."""
    center: SolPoint
    L: float
    m: float
    n: float

    def __post_init__(self):
        if not self.L > 0:
            raise ValueError("box size must be positive")
        if not self.m >= self.n > 0:
            raise ValueError("need m >= n > 0")

    @property
    def width_x(self) -> float:
        return math.exp(2 * self.m * self.L + self.m * self.center.z)

    @property
    def width_y(self) -> float:
        return math.exp(2 * self.n * self.L - self.n * self.center.z)

    @property
    def z_lo(self) -> float:
        return self.center.z - self.L / 2

    @property
    def z_hi(self) -> float:
        return self.center.z + self.L / 2

    @property
    def x_lo(self) -> float:
        return self.center.x - self.width_x / 2

    @property
    def y_lo(self) -> float:
        return self.center.y - self.width_y / 2

    def contains(self, p: SolPoint) -> bool:
        return (abs(p.x - self.center.x) <= self.width_x / 2 and abs(p.y - self.center.y) <= self.width_y / 2
                and abs(p.z - self.center.z) <= self.L / 2)

    def mu(self) -> float:
        return self.width_x * self.width_y * self.L

    def volume(self) -> float:
        k = self.n - self.m
        area = self.width_x * self.width_y
        if k == 0:
            return area * self.L
        return area * (math.exp(k * self.z_hi) - math.exp(k * self.z_lo)) / k

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        """Points distributed according to mu, as an array of shape (count, 3)."""
        u = rng.random((count, 3)) - 0.5
        return np.column_stack([self.center.x + u[:, 0] * self.width_x,
                                self.center.y + u[:, 1] * self.width_y,
                                self.center.z + u[:, 2] * self.L])


@dataclass
class SolBand:
    z_center: float
    tile_x: float
    tile_y: float
    count_x: int
    count_y: int
    ratio_x: float
    ratio_y: float
    exact: bool


@dataclass
class SolTiling:
    parent: SolBox
    R: float
    bands: list[SolBand]
    upsilon_mu: float
    collar_mu: float
    exact: bool
    info: dict = field(default_factory=dict)

    @property
    def tile_count(self) -> int:
        return sum(b.count_x * b.count_y for b in self.bands)

    @property
    def c_realized(self) -> float:
        return self.upsilon_mu / ((self.R / self.parent.L) * self.parent.mu())

    @property
    def c_certified(self) -> float:
        return self.collar_mu / ((self.R / self.parent.L) * self.parent.mu())

    def locate(self, p: SolPoint) -> tuple[int, int, int] | None:
        """(band, i, j) of the tile containing p, or None when p lies in the remainder."""
        b = self.parent
        if not b.contains(p):
            return None
        k = min(int((p.z - b.z_lo) // self.R), len(self.bands) - 1)
        band = self.bands[k]
        i = int((p.x - b.x_lo) // band.tile_x)
        j = int((p.y - b.y_lo) // band.tile_y)
        if i >= band.count_x or j >= band.count_y:
            return None
        return k, i, j

    def in_collar(self, p: SolPoint) -> bool:
        """Within R in height of top or bottom, or within one tile of an x- or y-side."""
        b = self.parent
        if p.z - b.z_lo < self.R or b.z_hi - p.z < self.R:
            return True
        band = self.bands[min(int((p.z - b.z_lo) // self.R), len(self.bands) - 1)]
        dx = min(p.x - b.x_lo, b.x_lo + b.width_x - p.x)
        dy = min(p.y - b.y_lo, b.y_lo + b.width_y - p.y)
        return dx < band.tile_x or dy < band.tile_y

    def tile(self, k: int, i: int, j: int) -> SolBox:
        band = self.bands[k]
        b = self.parent
        cx = b.x_lo + (i + 0.5) * band.tile_x
        cy = b.y_lo + (j + 0.5) * band.tile_y
        return SolBox(SolPoint(cx, cy, band.z_center), self.R, b.m, b.n)


def _shortfall(ratio: float, count: int) -> float:
    # fraction of a side not covered by ``count`` tiles
    return max(0.0, (ratio - count) / ratio)


def sol_tile_box(b: SolBox, R: float, rel_tol: float = 1e-9) -> SolTiling:
    """Cover b by a grid of size-R boxes in each height band of thickness R; the rest is the remainder."""
    q = b.L / R
    if R <= 0 or abs(q - round(q)) > rel_tol * max(1.0, q):
        raise IndivisibleSize(f"L={b.L} is not a multiple of R={R}")
    J = int(round(q))
    bands = []
    ups = 0.0
    collar = 0.0
    exact = True
    slab = R * b.width_x * b.width_y
    for k in range(J):
        zc = b.z_lo + (k + 0.5) * R
        tx = math.exp(2 * b.m * R + b.m * zc)
        ty = math.exp(2 * b.n * R - b.n * zc)
        rx, ry = b.width_x / tx, b.width_y / ty
        cx = int(math.floor(rx * (1 + rel_tol)))
        cy = int(math.floor(ry * (1 + rel_tol)))
        # past 1/rel_tol the float ratio cannot certify an integer count, so
        # fall back to the bound (one tile short) on the shortfall
        resolved = max(rx, ry) * rel_tol < 0.5
        ex = resolved and abs(rx - round(rx)) <= rel_tol * rx and abs(ry - round(ry)) <= rel_tol * ry
        exact = exact and ex
        if ex:
            gx = gy = 0.0
        elif resolved:
            gx, gy = _shortfall(rx, cx), _shortfall(ry, cy)
        else:
            gx, gy = min(1.0, 1 / rx), min(1.0, 1 / ry)
        ups += slab * (gx + gy - gx * gy)
        if k == 0 or k == J - 1:
            collar += slab
        else:
            sx, sy = min(1.0, 2 / rx), min(1.0, 2 / ry)
            collar += slab * (sx + sy - sx * sy)
        bands.append(SolBand(zc, tx, ty, cx, cy, rx, ry, ex))
    return SolTiling(b, R, bands, ups, collar, exact,
                     {"bands": J, "upsilon_fraction": ups / b.mu(), "collar_fraction": collar / b.mu()})


def sol_space(params: ModelParams) -> tuple[float, float]:
    if params.kind is not SpaceKind.SOL:
        raise MixedSpaces("expected a Sol space")
    return params.m, params.n
