"""Exact geometry of DL(m,n).

A vertex is a pair of tree vertices ``t1`` in T_{m+1} and ``t2`` in T_{n+1}
with ``t1.height + t2.height == 0``; its height is ``t1.height``.  Moving up
sends ``t1`` to its parent and ``t2`` to one of its ``n`` children; moving
down sends ``t1`` to one of its ``m`` children and ``t2`` to its parent.

Boxes are handled in local coordinates ``(t, i1, i2)``: ``t`` is the level
above the bottom, ``i1`` indexes the descendants of the top T1 vertex at depth
``L - t`` and ``i2`` indexes the descendants of the bottom T2 vertex at depth
``t`` (most significant digit first).
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Iterable, Sequence

import numpy as np
from numba import njit, vectorize

from .core import ModelParams, SpaceKind
from .trees import LadicAddress, tree_distance


class MixedSpaces(ValueError):
    pass


class InsufficientDepth(ValueError):
    pass


class IndivisibleSize(ValueError):
    pass


@dataclass(frozen=True, order=True)
class DLVertex:
    t1: LadicAddress
    t2: LadicAddress

    def __post_init__(self):
        if self.t1.height + self.t2.height != 0:
            raise ValueError("tree heights must sum to zero")

    @property
    def height(self) -> int:
        return self.t1.height

    @property
    def m(self) -> int:
        return self.t1.base

    @property
    def n(self) -> int:
        return self.t2.base

    def up(self) -> list["DLVertex"]:
        p = self.t1.parent()
        return [DLVertex(p, self.t2.child(d)) for d in range(self.n)]

    def down(self) -> list["DLVertex"]:
        p = self.t2.parent()
        return [DLVertex(self.t1.child(d), p) for d in range(self.m)]

    def neighbors(self) -> list["DLVertex"]:
        return self.up() + self.down()

    def __str__(self) -> str:
        return f"(x={self.t1}, y={self.t2}, z={self.height})"

    @classmethod
    def parse(cls, text: str) -> "DLVertex":
        mt = re.fullmatch(r"\s*\(\s*x=([^,\s]+)\s*,\s*y=([^,\s]+)\s*,\s*z=(-?\d+)\s*\)\s*", text)
        if not mt:
            raise ValueError(f"bad vertex literal {text!r}")
        t1 = LadicAddress.parse(mt.group(1))
        t2 = LadicAddress.parse(mt.group(2))
        z = int(mt.group(3))
        if t1.height != z or t2.height != -z:
            raise ValueError(f"inconsistent vertex literal {text!r}")
        return cls(t1, t2)


def dl_origin(m: int, n: int) -> DLVertex:
    return DLVertex(LadicAddress(m, 0), LadicAddress(n, 0))


def _check(u: DLVertex, v: DLVertex) -> None:
    if u.m != v.m or u.n != v.n:
        raise MixedSpaces(f"DL({u.m},{u.n}) vs DL({v.m},{v.n})")


def dl_distance(u: DLVertex, v: DLVertex) -> int:
    _check(u, v)
    return tree_distance(u.t1, v.t1) + tree_distance(u.t2, v.t2) - abs(u.height - v.height)


def confluent_heights(u: DLVertex, v: DLVertex) -> tuple[int, int]:
    """(c1, c2): heights of the T1 and T2 confluents (c2 <= min height <= max height <= c1)."""
    from .trees import confluent_height
    return confluent_height(u.t1, v.t1), -confluent_height(u.t2, v.t2)


def height_profile(hu: int, hv: int, c1: int, c2: int) -> list[int]:
    """Heights along the canonical geodesic: up first unless the target is strictly higher."""
    if hv > hu:
        turns = [hu, c2, c1, hv]
    else:
        turns = [hu, c1, c2, hv]
    out = [hu]
    for a, b in zip(turns, turns[1:]):
        step = 1 if b > a else -1
        out += list(range(a + step, b + step, step)) if a != b else []
    return out


def geodesic(u: DLVertex, v: DLVertex) -> list[DLVertex]:
    """A geodesic from u to v (canonical choice of the free branches: digit 0)."""
    _check(u, v)
    c1, c2 = confluent_heights(u, v)
    profile = height_profile(u.height, v.height, c1, c2)
    out = [u]
    t1, t2 = u.t1, u.t2
    for h in profile[1:]:
        if h > t1.height:
            t1 = t1.parent()
            if v.t2.height < t2.height and t2.is_ancestor_of(v.t2):
                t2 = v.t2.ancestor(t2.height - 1)
            else:
                t2 = t2.child(0)
        else:
            t2 = t2.parent()
            if v.t1.height < t1.height and t1.is_ancestor_of(v.t1):
                t1 = v.t1.ancestor(t1.height - 1)
            else:
                t1 = t1.child(0)
        out.append(DLVertex(t1, t2))
    return out


@dataclass(frozen=True)
class VerticalGeodesic:
    x: LadicAddress
    y: LadicAddress
    z_lo: int
    z_hi: int

    def __post_init__(self):
        if self.z_lo > self.z_hi:
            raise ValueError("empty height range")
        if self.x.height > self.z_lo:
            raise InsufficientDepth(f"x known only down to {self.x.height} > {self.z_lo}")
        if self.y.height > -self.z_hi:
            raise InsufficientDepth(f"y known only down to tree height {self.y.height}")

    def point_at(self, z: int) -> DLVertex:
        if not self.z_lo <= z <= self.z_hi:
            raise ValueError("height outside range")
        return DLVertex(self.x.ancestor(z), self.y.ancestor(-z))

    def points(self) -> list[DLVertex]:
        return [self.point_at(z) for z in range(self.z_lo, self.z_hi + 1)]

    def __len__(self) -> int:
        return self.z_hi - self.z_lo + 1


def vertical_geodesic(x: LadicAddress, y: LadicAddress, z_lo: int, z_hi: int) -> VerticalGeodesic:
    return VerticalGeodesic(x, y, z_lo, z_hi)


def _digits(i: int, base: int, length: int) -> tuple[int, ...]:
    out = [0] * length
    for k in range(length - 1, -1, -1):
        i, out[k] = divmod(i, base)
    return tuple(out)


def _undigits(ds: Sequence[int], base: int) -> int:
    i = 0
    for d in ds:
        i = i * base + d
    return i


@dataclass(frozen=True)
class Box:
    """The component of a height slab of size L, given by its top T1 and bottom T2 vertices."""

    top: LadicAddress
    bottom: LadicAddress
    L: int

    def __post_init__(self):
        if self.L < 0:
            raise ValueError("negative box size")
        if self.top.height - (-self.bottom.height) != self.L:
            raise ValueError("top and bottom heights do not span L")

    @property
    def m(self) -> int:
        return self.top.base

    @property
    def n(self) -> int:
        return self.bottom.base

    @property
    def h_top(self) -> int:
        return self.top.height

    @property
    def h_bottom(self) -> int:
        return -self.bottom.height

    def level_size(self, t: int) -> int:
        return self.m ** (self.L - t) * self.n ** t

    @cached_property
    def offsets(self) -> tuple[int, ...]:
        off = [0]
        for t in range(self.L + 1):
            off.append(off[-1] + self.level_size(t))
        return tuple(off)

    @property
    def size(self) -> int:
        return self.offsets[-1]

    @property
    def geodesic_count(self) -> int:
        return self.m ** self.L * self.n ** self.L

    @property
    def center(self) -> DLVertex:
        h = self.h_bottom + self.L // 2
        return DLVertex(self.top.descend([0] * (self.h_top - h)),
                        self.bottom.descend([0] * (h - self.h_bottom)))

    def vertex(self, t: int, i1: int, i2: int) -> DLVertex:
        t1 = self.top.descend(_digits(int(i1), self.m, self.L - t))
        t2 = self.bottom.descend(_digits(int(i2), self.n, t))
        return DLVertex(t1, t2)

    def locate(self, v: DLVertex) -> tuple[int, int, int] | None:
        t = v.height - self.h_bottom
        if not 0 <= t <= self.L or v.m != self.m or v.n != self.n:
            return None
        if v.t1.ancestor(self.h_top) != self.top or v.t2.ancestor(self.bottom.height) != self.bottom:
            return None
        w1 = v.t1.word(max(v.t1.anchor, self.top.anchor))
        w2 = v.t2.word(max(v.t2.anchor, self.bottom.anchor))
        return t, _undigits(w1[len(w1) - (self.L - t):], self.m), _undigits(w2[len(w2) - t:], self.n)

    def id_of(self, t, i1, i2):
        t = np.asarray(t, dtype=np.int64)
        return np.asarray(self.offsets, dtype=np.int64)[t] + np.asarray(i1, dtype=np.int64) * \
            (np.int64(self.n) ** t) + np.asarray(i2, dtype=np.int64)

    @cached_property
    def coords(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        ts, i1s, i2s = [], [], []
        for t in range(self.L + 1):
            a, b = self.m ** (self.L - t), self.n ** t
            idx = np.arange(a * b, dtype=np.int64)
            ts.append(np.full(a * b, t, dtype=np.int64))
            i1s.append(idx // b)
            i2s.append(idx % b)
        return np.concatenate(ts), np.concatenate(i1s), np.concatenate(i2s)

    def level_ids(self, t: int) -> np.ndarray:
        return np.arange(self.offsets[t], self.offsets[t + 1], dtype=np.int64)

    def vertices(self) -> Iterable[DLVertex]:
        t, i1, i2 = self.coords
        for k in range(self.size):
            yield self.vertex(int(t[k]), int(i1[k]), int(i2[k]))

    # measures ------------------------------------------------------------
    def level_weight(self, t: int) -> int:
        """Integer weight m^t n^(L-t): the number of box geodesics through a level-t vertex."""
        return self.m ** t * self.n ** (self.L - t)

    @cached_property
    def weights(self) -> np.ndarray:
        t = self.coords[0]
        w = np.array([self.level_weight(k) for k in range(self.L + 1)], dtype=np.int64)
        return w[t]

    def mu(self, ids=None) -> int:
        if ids is None:
            return self.geodesic_count * (self.L + 1)
        return int(self.weights[np.asarray(ids, dtype=np.int64)].sum())

    def volume(self, ids=None) -> int:
        return self.size if ids is None else len(np.unique(np.asarray(ids)))

    # geodesics -------------------------------------------------------------
    def geodesic_ids(self, j1, j2) -> np.ndarray:
        """Vertex ids along the box geodesics (j1 bottom index, j2 top index), shape (..., L+1)."""
        j1 = np.asarray(j1, dtype=np.int64)[..., None]
        j2 = np.asarray(j2, dtype=np.int64)[..., None]
        t = np.arange(self.L + 1, dtype=np.int64)
        i1 = j1 // np.int64(self.m) ** t
        i2 = j2 // np.int64(self.n) ** (self.L - t)
        return self.id_of(t, i1, i2)

    def all_geodesics(self) -> tuple[np.ndarray, np.ndarray]:
        j1, j2 = np.meshgrid(np.arange(self.m ** self.L, dtype=np.int64),
                             np.arange(self.n ** self.L, dtype=np.int64), indexing="ij")
        return j1.ravel(), j2.ravel()

    def geodesic(self, j1: int, j2: int) -> VerticalGeodesic:
        x = self.top.descend(_digits(j1, self.m, self.L))
        y = self.bottom.descend(_digits(j2, self.n, self.L))
        return VerticalGeodesic(x, y, self.h_bottom, self.h_top)

    # graph -----------------------------------------------------------------
    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        """Up-edges (lower id, upper id) in canonical order."""
        us, vs = [], []
        for t in range(self.L):
            ids = self.level_ids(t)
            tt, i1, i2 = (c[ids] for c in self.coords)
            for d in range(self.n):
                us.append(ids)
                vs.append(self.id_of(t + 1, i1 // self.m, i2 * self.n + d))
        if not us:
            return np.zeros(0, np.int64), np.zeros(0, np.int64)
        return np.concatenate(us), np.concatenate(vs)

    def dump_edges(self) -> str:
        """Plain-text dump: header comments, one ``v id literal`` line per vertex, one ``e a b`` per edge."""
        lines = [
            "# dlsol box edge list",
            f"# space dl:{self.m},{self.n} L {self.L} top {self.top} bottom {self.bottom}",
            f"# vertices {self.size}",
        ]
        t, i1, i2 = self.coords
        for k in range(self.size):
            lines.append(f"v {k} {self.vertex(int(t[k]), int(i1[k]), int(i2[k]))}")
        a, b = self.edges()
        lines += [f"e {int(x)} {int(y)}" for x, y in zip(a, b)]
        return "\n".join(lines) + "\n"

    def distance_ids(self, a, b) -> np.ndarray:
        """Vectorized DL distance between vertex ids (broadcasting)."""
        t, i1, i2 = self.coords
        a = np.asarray(a, dtype=np.int64)
        b = np.asarray(b, dtype=np.int64)
        return local_distance(self.L, self.m, self.n, t[a], i1[a], i2[a], t[b], i1[b], i2[b])

    def enlarge(self, k: int) -> "Box":
        return Box(self.top.ancestor(self.h_top + k), self.bottom.ancestor(self.bottom.height + k),
                   self.L + 2 * k)

    def boundary_distance(self) -> np.ndarray:
        t = self.coords[0]
        return np.minimum(t, self.L - t)


@njit(cache=True)
def _prefix(a, b, la, lb, base):
    """Common prefix length of two most-significant-first digit words."""
    l = min(la, lb)
    for _ in range(la - l):
        a //= base
    for _ in range(lb - l):
        b //= base
    while a != b:
        a //= base
        b //= base
        l -= 1
    return l


@vectorize(["int64(int64, int64, int64, int64, int64, int64, int64, int64, int64)"], cache=True)
def _local_distance(L, m, n, ta, ia1, ia2, tb, ib1, ib2):
    la = L - ta
    lb = L - tb
    p1 = _prefix(ia1, ib1, la, lb, m)
    p2 = _prefix(ia2, ib2, ta, tb, n)
    return (la + lb - 2 * p1) + (ta + tb - 2 * p2) - abs(ta - tb)


def local_distance(L, m, n, ta, ia1, ia2, tb, ib1, ib2) -> np.ndarray:
    """DL distance between box-local coordinates (broadcasting)."""
    return _local_distance(np.int64(L), np.int64(m), np.int64(n), ta, ia1, ia2, tb, ib1, ib2)


def box_at(center: DLVertex, L: int) -> Box:
    """The box of size L (even) around a vertex: the slab component of [h - L/2, h + L/2]."""
    if L < 0 or L % 2:
        raise ValueError("box size must be even and >= 0")
    h = center.height
    top = center.t1.ancestor(h + L // 2)
    bottom = center.t2.ancestor(-(h - L // 2))
    return Box(top, bottom, L)


def box_between(anchor: DLVertex, h_bottom: int, h_top: int) -> Box:
    return Box(anchor.t1.ancestor(h_top), anchor.t2.ancestor(-h_bottom), h_top - h_bottom)


def embed_ids(child: Box, parent: Box) -> np.ndarray:
    """Parent ids of every child vertex (child must sit inside parent)."""
    loc_top = parent.locate(DLVertex(child.top, _t2_at(parent, child.h_top)))
    loc_bot = parent.locate(DLVertex(_t1_at(parent, child.h_bottom), child.bottom))
    if loc_top is None or loc_bot is None:
        raise ValueError("child box not inside parent")
    I1 = loc_top[1]
    I2 = loc_bot[2]
    B = child.h_bottom - parent.h_bottom
    t, k1, k2 = child.coords
    m, n, Lc = child.m, child.n, child.L
    i1 = I1 * np.int64(m) ** (Lc - t) + k1
    i2 = I2 * np.int64(n) ** t + k2
    return parent.id_of(B + t, i1, i2)


def _t2_at(box: Box, h: int) -> LadicAddress:
    return box.bottom.descend([0] * (h - box.h_bottom))


def _t1_at(box: Box, h: int) -> LadicAddress:
    return box.top.descend([0] * (box.h_top - h))


# tilings -------------------------------------------------------------------

@dataclass(frozen=True)
class Tile:
    band: int
    i1: int      # T1 index of the tile top at parent level (band+1) R
    i2: int      # T2 index of the tile bottom at parent level band R
    box: Box


@dataclass
class Tiling:
    parent: Box
    R: int
    tiles: list[Tile]
    remainder: np.ndarray

    @property
    def bands(self) -> int:
        return self.parent.L // self.R

    def tile_ids(self, k: int) -> np.ndarray:
        """Parent ids of all vertices of tile k (closed box)."""
        tile = self.tiles[k]
        return _tile_ids(self.parent, self.R, tile.band, tile.i1, tile.i2)

    def owned_ids(self, k: int) -> np.ndarray:
        """Vertices owned by tile k: levels (jR, (j+1)R], plus level 0 for band 0."""
        tile = self.tiles[k]
        ids = self.tile_ids(k)
        t = self.parent.coords[0][ids]
        lo = tile.band * self.R
        keep = (t > lo) | (lo == 0)
        return ids[keep]

    def owner(self) -> np.ndarray:
        """Tile index owning each parent vertex."""
        out = np.full(self.parent.size, -1, dtype=np.int64)
        for k in range(len(self.tiles)):
            out[self.owned_ids(k)] = k
        return out


def _tile_ids(parent: Box, R: int, band: int, I1: int, I2: int) -> np.ndarray:
    m, n, L = parent.m, parent.n, parent.L
    out = []
    for tp in range(R + 1):
        t = band * R + tp
        k1 = np.arange(m ** (R - tp), dtype=np.int64)
        k2 = np.arange(n ** tp, dtype=np.int64)
        i1 = (I1 * m ** (R - tp) + k1)[:, None]
        i2 = (I2 * n ** tp + k2)[None, :]
        out.append(parent.id_of(t, i1, i2).ravel())
    return np.concatenate(out)


def band_tile_count(parent: Box, R: int, band: int) -> int:
    return parent.m ** (parent.L - (band + 1) * R) * parent.n ** (band * R)


def tile_box(b: Box, R: int) -> Tiling:
    if R <= 0 or b.L % R:
        raise IndivisibleSize(f"R={R} does not divide L={b.L}")
    tiles = []
    for band in range(b.L // R):
        top_level = (band + 1) * R
        bot_level = band * R
        for I1 in range(b.m ** (b.L - top_level)):
            for I2 in range(b.n ** bot_level):
                top = b.top.descend(_digits(I1, b.m, b.L - top_level))
                bottom = b.bottom.descend(_digits(I2, b.n, bot_level))
                tiles.append(Tile(band, I1, I2, Box(top, bottom, R)))
    return Tiling(b, R, tiles, np.zeros(0, dtype=np.int64))


def boundary_collar_fraction(b: Box, eps: float) -> dict:
    """Fractions of the box within eps*L of its boundary (top and bottom levels)."""
    if not 0 < eps < 0.5:
        raise ValueError("eps must lie in (0, 1/2)")
    near = b.boundary_distance() <= eps * b.L
    ids = np.nonzero(near)[0]
    mu_frac = b.mu(ids) / b.mu()
    vol_frac = len(ids) / b.size
    return {"mu_fraction": mu_frac, "volume_fraction": vol_frac, "c_mu": mu_frac / eps,
            "c_volume": vol_frac / eps}


# balls and coverings -------------------------------------------------------

def ball(p: DLVertex, r: int) -> tuple[Box, np.ndarray]:
    """The closed ball D(p, r) as ids inside the size-2r box around p (which contains it)."""
    b = box_at(p, 2 * r)
    c = b.locate(p)
    cid = int(b.id_of(*c))
    d = b.distance_ids(np.arange(b.size), cid)
    return b, np.nonzero(d <= r)[0]


def _tree_shell(base: int, h: int, c: int) -> int:
    # vertices at height h whose confluent with the origin's vertex is at height c
    lo = max(0, h)
    if c < lo:
        return 0
    if c == lo:
        return base ** (lo - h)
    return (base - 1) * base ** (c - 1 - h)


def ball_size(m: int, n: int, r: int) -> int:
    """|D(p, r)| by counting confluent-height pairs: d = 2 c1 + 2 c2 - |h|."""
    total = 0
    for h in range(-r, r + 1):
        for c1 in range(max(0, h), r + 1):
            n1 = _tree_shell(m, h, c1)
            for c2 in range(max(0, -h), r + 1):
                if 2 * c1 + 2 * c2 - abs(h) > r:
                    break
                total += n1 * _tree_shell(n, -h, c2)
    return total


def ball_growth_ratio(m: int, n: int, a: int, b: int, points: Sequence[DLVertex] | None = None) -> dict:
    if not b > a >= 0:
        raise ValueError("need b > a >= 0")
    pts = list(points) if points else [dl_origin(m, n)]
    sa = [len(ball(p, a)[1]) for p in pts]
    sb = [len(ball(p, b)[1]) for p in pts]
    omega = max(sb) / min(sa)
    return {"omega": omega, "log_rate": float(np.log(omega) / (b - a)), "sizes_a": sa, "sizes_b": sb}


def greedy_5a_cover(points: Sequence, a: float, dist: Callable) -> list:
    """Greedy maximal subset with pairwise distances > 2a, in the given order."""
    chosen: list = []
    for x in points:
        if all(dist(x, g) > 2 * a for g in chosen):
            chosen.append(x)
    return chosen


def greedy_5a_cover_ids(box: Box, ids: np.ndarray, a: float) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    chosen: list[int] = []
    blocked = np.zeros(len(ids), dtype=bool)
    for k in range(len(ids)):
        if blocked[k]:
            continue
        chosen.append(int(ids[k]))
        blocked |= box.distance_ids(ids, ids[k]) <= 2 * a
    return np.array(chosen, dtype=np.int64)


# horocycles and shadows ----------------------------------------------------

def y_horocycle(box: Box, t: int, i1: int) -> np.ndarray:
    """Box vertices at level t sharing the T1 vertex i1."""
    k2 = np.arange(box.n ** t, dtype=np.int64)
    return box.id_of(t, i1, k2)


def x_horocycle(box: Box, t: int, i2: int) -> np.ndarray:
    k1 = np.arange(box.m ** (box.L - t), dtype=np.int64)
    return box.id_of(t, k1, i2)


@dataclass
class Shadow:
    horocycle: np.ndarray
    rho: float
    direction: str
    members: np.ndarray


def shadow(H: np.ndarray, rho: float, b: Box, direction: str = "down") -> Shadow:
    """Box vertices reached by vertical geodesics leaving N_rho(H) straight down (or up)."""
    k = int(np.floor(rho))
    big = b.enlarge(k) if k > 0 else b
    emb = embed_ids(b, big) if k > 0 else np.arange(b.size, dtype=np.int64)
    Hb = emb[np.asarray(H, dtype=np.int64)]
    if k > 0:
        dmin = np.full(big.size, np.iinfo(np.int64).max)
        for h in Hb:
            dmin = np.minimum(dmin, big.distance_ids(np.arange(big.size), h))
        nb = np.nonzero(dmin <= rho)[0]
    else:
        nb = Hb
    t, i1, i2 = big.coords
    tv, v1, v2 = t[emb], i1[emb], i2[emb]
    member = np.zeros(b.size, dtype=bool)
    m, n = b.m, b.n
    tw_all = t[nb]
    for tw in np.unique(tw_all):
        w = nb[tw_all == tw]
        w1, w2 = i1[w], i2[w]
        if direction == "down":
            levels = np.unique(tv[tv <= tw])
        else:
            levels = np.unique(tv[tv >= tw])
        for tl in levels:
            sel = np.nonzero(tv == tl)[0]
            dlt = abs(int(tw) - int(tl))
            if direction == "down":
                keys_w = w1 * (n ** int(tl)) + w2 // n ** dlt
                keys_v = (v1[sel] // m ** dlt) * (n ** int(tl)) + v2[sel]
            else:
                keys_w = (w1 // m ** dlt) * (n ** int(tw)) + w2
                keys_v = v1[sel] * (n ** int(tw)) + v2[sel] // n ** dlt
            member[sel[np.isin(keys_v, keys_w)]] = True
    return Shadow(np.asarray(H), rho, direction, np.nonzero(member)[0])


def dl_space(params: ModelParams) -> tuple[int, int]:
    if params.kind is not SpaceKind.DL:
        raise MixedSpaces("expected a DL space")
    return params.m, params.n
