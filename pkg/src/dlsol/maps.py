"""Candidate quasi-isometries between DL graphs: boundary transducers, product maps,
adversarial library maps, and measurement of their constants."""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .core import ModelParams, PreconditionViolation, QiConstants, SpaceKind
from .dl_geometry import Box, DLVertex, _digits, _undigits, ball_size, box_at, dl_distance, dl_origin
from .trees import LadicAddress


class BadParams(ValueError):
    pass


def stable_hash(*parts) -> int:
    """64-bit hash that does not depend on the interpreter's hash seed."""
    h = hashlib.blake2b("|".join(str(p) for p in parts).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "big")


# boundary maps ---------------------------------------------------------------

class BoundaryMap:
    """A digit transducer between regular trees, applied top-down from a fixed height.

    Digits at heights >= ``top`` are passed through unchanged and the
    transducer state starts fresh at ``top``, so the map is defined on every
    vertex and sends height h to height h.
    """

    base_in: int
    base_out: int
    top: int = 0
    bilip: float = 1.0
    name: str = "map"

    def start(self):
        return None

    def step(self, state, height: int, digit: int) -> tuple[object, int]:
        raise NotImplementedError

    def finish(self, state, height: int, out: list[int]) -> list[int]:
        return out

    def __call__(self, v: LadicAddress) -> LadicAddress:
        if v.base != self.base_in:
            raise BadParams(f"{self.name} expects base {self.base_in}, got {v.base}")
        A = max(v.anchor, self.top)
        state = self.start()
        out = []
        k = A - 1
        for d in v.word(A):
            state, e = self.step(state, k, d)
            out.append(e)
            k -= 1
        out = self.finish(state, v.height, out)
        return LadicAddress(self.base_out, A, tuple(out))

    def to_dict(self) -> dict:
        return {"name": self.name, "base_in": self.base_in, "base_out": self.base_out, "bilip": self.bilip}


class IdentityMap(BoundaryMap):
    def __init__(self, base: int):
        self.base_in = self.base_out = base
        self.name = "id"

    def __call__(self, v: LadicAddress) -> LadicAddress:
        if v.base != self.base_in:
            raise BadParams(f"id expects base {self.base_in}, got {v.base}")
        return v

    def step(self, state, height, digit):
        return state, digit


class DigitPermutation(BoundaryMap):
    """Independent digit permutation at each height in [lo, top); an isometry of the boundary."""

    def __init__(self, base: int, perms: dict[int, Sequence[int]]):
        self.base_in = self.base_out = base
        self.perms = {int(k): tuple(int(x) for x in p) for k, p in perms.items()}
        for p in self.perms.values():
            if sorted(p) != list(range(base)):
                raise BadParams("not a permutation")
        self.top = max(self.perms) + 1 if self.perms else 0
        self.name = "perm"

    @classmethod
    def seeded(cls, base: int, lo: int, hi: int, seed: int) -> "DigitPermutation":
        rng = np.random.default_rng(stable_hash("perm", base, lo, hi, seed) % 2 ** 32)
        return cls(base, {k: tuple(int(x) for x in rng.permutation(base)) for k in range(lo, hi)})

    def step(self, state, height, digit):
        p = self.perms.get(height)
        return state, (p[digit] if p else digit)

    def to_dict(self) -> dict:
        d = super().to_dict()
        d["perms"] = {str(k): list(v) for k, v in sorted(self.perms.items())}
        return d


class AddConstant(BoundaryMap):
    """x -> x + c in the l-adic boundary; carries run toward lower heights."""

    def __init__(self, base: int, digits: dict[int, int]):
        self.base_in = self.base_out = base
        self.digits = {int(k): int(v) % base for k, v in digits.items()}
        self.top = max(self.digits) + 1 if self.digits else 0
        self.name = "add"

    def start(self):
        return 0

    def step(self, carry, height, digit):
        s = digit + self.digits.get(height, 0) + carry
        return s // self.base_in, s % self.base_in

    def to_dict(self) -> dict:
        d = super().to_dict()
        d["digits"] = {str(k): v for k, v in sorted(self.digits.items())}
        return d


class SiteSwap(BoundaryMap):
    """Exchange the digits at heights ``site`` and ``site - 1``.

    Bilipschitz with constant equal to the base.  A vertex at height exactly
    ``site`` sees only one of the two digits; it keeps its height and takes
    digit 0 at the site, which moves it by at most 2.
    """

    def __init__(self, base: int, site: int):
        self.base_in = self.base_out = base
        self.site = int(site)
        self.top = self.site + 1
        self.bilip = float(base)
        self.name = "swap"

    def __call__(self, v: LadicAddress) -> LadicAddress:
        if v.base != self.base_in:
            raise BadParams(f"swap expects base {self.base_in}, got {v.base}")
        A = max(v.anchor, self.top)
        w = list(v.word(A))
        i = A - 1 - self.site
        if v.height <= self.site - 1:
            w[i], w[i + 1] = w[i + 1], w[i]
        elif v.height == self.site:
            w[i] = 0
        return LadicAddress(self.base_out, A, tuple(w))

    def to_dict(self) -> dict:
        d = super().to_dict()
        d["site"] = self.site
        return d


class Recode(BoundaryMap):
    """Digit-by-digit recoding between bases (table[0] must be 0)."""

    def __init__(self, base_in: int, base_out: int, table: Sequence[int], name: str = "recode"):
        if len(table) != base_in or table[0] != 0 or any(not 0 <= t < base_out for t in table):
            raise BadParams("bad recoding table")
        self.base_in, self.base_out = base_in, base_out
        self.table = tuple(int(t) for t in table)
        self.name = name
        injective = len(set(self.table)) == base_in
        self.bilip = 1.0 if injective and base_in == base_out else math.inf

    def step(self, state, height, digit):
        return state, self.table[digit]

    def to_dict(self) -> dict:
        d = super().to_dict()
        d["table"] = list(self.table)
        return d


def encode(base_in: int, base_out: int) -> Recode:
    if base_in > base_out:
        raise BadParams("encode needs base_in <= base_out")
    return Recode(base_in, base_out, list(range(base_in)), "encode")


def collapse(base_in: int, base_out: int) -> Recode:
    return Recode(base_in, base_out, [min(d, base_out - 1) for d in range(base_in)], "collapse")


def boundary_map(spec: dict | str | None, base: int, seed: int = 0) -> BoundaryMap:
    """Build a boundary map from a small spec: id, perm, add, swap."""
    if spec is None or spec == "id":
        return IdentityMap(base)
    if isinstance(spec, str):
        spec = {"kind": spec}
    kind = spec.get("kind", "id")
    if kind == "id":
        return IdentityMap(base)
    if kind == "perm":
        return DigitPermutation.seeded(base, int(spec.get("lo", -8)), int(spec.get("hi", 8)),
                                       int(spec.get("seed", seed)))
    if kind == "add":
        c = spec.get("digits", {0: 1})
        return AddConstant(base, {int(k): int(v) for k, v in dict(c).items()})
    if kind == "swap":
        return SiteSwap(base, int(spec.get("site", 0)))
    raise BadParams(f"unknown boundary map kind {kind!r}")


# vertex maps -----------------------------------------------------------------

def translate(v: DLVertex, c: int) -> DLVertex:
    """Height translation by c (an isometry)."""
    return DLVertex(LadicAddress(v.t1.base, v.t1.anchor + c, v.t1.digits),
                    LadicAddress(v.t2.base, v.t2.anchor - c, v.t2.digits))


@dataclass
class ProductMapSpec:
    """(t1, t2, h) -> (f(t1), g(t2), h + shift), or with ``swap`` (g(t2), f(t1), -h + shift)."""
    f: BoundaryMap
    g: BoundaryMap
    shift: int = 0
    swap: bool = False

    @property
    def bilip(self) -> float:
        return max(self.f.bilip, self.g.bilip)

    @property
    def preserving(self) -> bool:
        return not self.swap

    def q(self, h: int) -> int:
        return (-h if self.swap else h) + self.shift

    def apply(self, v: DLVertex) -> DLVertex:
        a, b = self.f(v.t1), self.g(v.t2)
        w = DLVertex(b, a) if self.swap else DLVertex(a, b)
        return translate(w, self.shift) if self.shift else w

    def to_dict(self) -> dict:
        return {"f": self.f.to_dict(), "g": self.g.to_dict(), "shift": self.shift, "swap": self.swap,
                "bilip": self.bilip}


def enclosing_box(t1s: Iterable[LadicAddress], t2s: Iterable[LadicAddress]) -> Box:
    """Smallest box containing every vertex whose coordinates are drawn from t1s and t2s."""
    t1s, t2s = list(t1s), list(t2s)

    def lca(vs):
        A = max(v.anchor for v in vs)
        words = [v.word(A) for v in vs]
        lo, hi = min(words), max(words)
        p = 0
        while p < min(len(lo), len(hi)) and lo[p] == hi[p]:
            p += 1
        return LadicAddress(vs[0].base, A, lo[:p])

    c1, c2 = lca(t1s), lca(t2s)
    h_top = max(c1.height, max(v.height for v in t1s))
    h_bot = min(-c2.height, min(-v.height for v in t2s))
    return Box(c1.ancestor(h_top), c2.ancestor(-h_bot), h_top - h_bot)


@dataclass
class QiMap:
    """A candidate quasi-isometry, evaluated on single vertices or on whole boxes."""
    name: str
    source: ModelParams
    target: ModelParams
    func: Callable[[DLVertex], DLVertex]
    product: ProductMapSpec | None = None
    claimed: QiConstants | None = None
    preserving: bool | None = None
    height_respecting: bool | None = None
    params: dict = field(default_factory=dict)
    height_fn: Callable[[int], int] | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __call__(self, v: DLVertex) -> DLVertex:
        return self.func(v)

    def image(self, box: Box) -> tuple[Box, np.ndarray]:
        """(target box containing phi(box), target ids of phi(v) in source id order)."""
        key = (box.top, box.bottom, box.L)
        if key not in self._cache:
            if self.product is not None and self.func == self.product.apply:
                res = _product_image(self.product, box)
            elif self.height_fn is not None:
                res = _height_image(self.height_fn, self.target, box)
            else:
                res = _generic_image(self.func, box)
            self._cache[key] = res
        return self._cache[key]

    def describe(self) -> dict:
        return {
            "name": self.name, "source": str(self.source), "target": str(self.target),
            "params": self.params,
            "product": self.product.to_dict() if self.product else None,
            "claimed": {"kappa": self.claimed.kappa, "C": self.claimed.c_add} if self.claimed else None,
            "preserving": self.preserving, "height_respecting": self.height_respecting,
        }


def _generic_image(func, box: Box) -> tuple[Box, np.ndarray]:
    imgs = [func(v) for v in box.vertices()]
    tgt = enclosing_box([w.t1 for w in imgs], [w.t2 for w in imgs])
    ids = np.array([int(tgt.id_of(*tgt.locate(w))) for w in imgs], dtype=np.int64)
    return tgt, ids


def _height_image(fn, target: ModelParams, box: Box) -> tuple[Box, np.ndarray]:
    zs = [fn(box.h_bottom + t) for t in range(box.L + 1)]
    lo, hi = min(zs), max(zs)
    tgt = Box(LadicAddress(target.m, hi), LadicAddress(target.n, -lo), hi - lo)
    # the zero geodesic has local indices 0 at every level
    lev = np.array([tgt.offsets[z - lo] for z in zs], dtype=np.int64)
    return tgt, lev[box.coords[0]]


def _product_image(spec: ProductMapSpec, box: Box) -> tuple[Box, np.ndarray]:
    # the coordinates factor, so evaluate f and g once per tree vertex of the box
    m, n, L = box.m, box.n, box.L
    f_img = {}
    g_img = {}
    for t in range(L + 1):
        for i1 in range(m ** (L - t)):
            f_img[t, i1] = spec.f(box.top.descend(_digits(i1, m, L - t)))
        for i2 in range(n ** t):
            g_img[t, i2] = spec.g(box.bottom.descend(_digits(i2, n, t)))
    c = spec.shift
    if spec.swap:
        new1 = {k: LadicAddress(v.base, v.anchor + c, v.digits) for k, v in g_img.items()}
        new2 = {k: LadicAddress(v.base, v.anchor - c, v.digits) for k, v in f_img.items()}
    else:
        new1 = {k: LadicAddress(v.base, v.anchor + c, v.digits) for k, v in f_img.items()}
        new2 = {k: LadicAddress(v.base, v.anchor - c, v.digits) for k, v in g_img.items()}
    tgt = enclosing_box(new1.values(), new2.values())
    M, N = tgt.m, tgt.n

    def local1(a: LadicAddress) -> int:
        t = a.height - tgt.h_bottom
        w = a.word(max(a.anchor, tgt.top.anchor))
        return _undigits(w[len(w) - (tgt.L - t):], M)

    def local2(a: LadicAddress) -> int:
        t = -a.height - tgt.h_bottom
        w = a.word(max(a.anchor, tgt.bottom.anchor))
        return _undigits(w[len(w) - t:], N)

    # per level lookup tables: local index and target level of each tree vertex
    tabs = {}
    for name, new, local in (("1", new1, local1), ("2", new2, local2)):
        idx, lev = [], []
        for t in range(L + 1):
            cnt = sum(1 for k in new if k[0] == t)
            idx.append(np.array([local(new[t, i]) for i in range(cnt)], dtype=np.int64))
            lev.append(np.array([new[t, i].height for i in range(cnt)], dtype=np.int64))
        tabs[name] = (idx, lev)
    tt, i1, i2 = box.coords
    out = np.empty(box.size, dtype=np.int64)
    off = np.asarray(tgt.offsets, dtype=np.int64)
    for t in range(L + 1):
        sel = slice(box.offsets[t], box.offsets[t + 1])
        a, b = i1[sel], i2[sel]
        if spec.swap:
            j1, h1 = tabs["1"][0][t][b], tabs["1"][1][t][b]
            j2 = tabs["2"][0][t][a]
        else:
            j1, h1 = tabs["1"][0][t][a], tabs["1"][1][t][a]
            j2 = tabs["2"][0][t][b]
        tp = h1 - tgt.h_bottom
        out[sel] = off[tp] + j1 * np.int64(N) ** tp + j2
    return tgt, out


# library ---------------------------------------------------------------------

def _walk(v: DLVertex, steps: int, key: int) -> DLVertex:
    for s in range(steps):
        nb = v.neighbors()
        v = nb[stable_hash(key, s) % len(nb)]
    return v


def _fold(z0: int):
    return lambda h: z0 - abs(h - z0)


def _on_zero_geodesic(m: int, n: int, fold):
    # the image depends on the height only: the vertical geodesic through the origin
    def f(v: DLVertex) -> DLVertex:
        z = fold(v.height)
        return DLVertex(LadicAddress(m, z), LadicAddress(n, -z))
    return f


def _sheared(s1: int, s2: int):
    def f(v: DLVertex) -> DLVertex:
        h = v.height
        if h > s1 or h < -s2:
            return v
        e = v.t2.digit_at(s2)
        A = max(v.t1.anchor, s1 + 1)
        w = list(v.t1.word(A))
        pos = A - s1 - 1
        w[pos] = (w[pos] + e) % v.t1.base
        return DLVertex(LadicAddress(v.t1.base, A, tuple(w)), v.t2)
    return f


def library_map(kind: str, source: ModelParams, target: ModelParams | None = None, **params) -> QiMap:
    """Named maps: identity, height_translation, standard, flip, sheared, scrambled, hairpin."""
    if source.kind is not SpaceKind.DL:
        raise BadParams("library maps are implemented on DL spaces")
    target = target or source
    m, n = source.m, source.n
    seed = int(params.get("seed", 0))
    if kind == "identity":
        spec = ProductMapSpec(IdentityMap(m), IdentityMap(n))
        return QiMap("identity", source, target, spec.apply, spec, QiConstants(1, 0), True, True, params)
    if kind == "height_translation":
        c = int(params.get("shift", 5))
        spec = ProductMapSpec(IdentityMap(m), IdentityMap(n), shift=c)
        return QiMap("height_translation", source, target, spec.apply, spec, QiConstants(1, 0), True, True,
                     {"shift": c})
    if kind == "standard":
        if target != source:
            raise BadParams("standard maps are self-maps here")
        f = boundary_map(params.get("f", "perm"), m, seed)
        g = boundary_map(params.get("g", "perm"), n, seed + 1)
        shift = int(params.get("shift", 0))
        spec = ProductMapSpec(f, g, shift)
        b = spec.bilip
        claimed = QiConstants(b, 2.0 if b > 1 else 0.0)
        p = {"f": f.to_dict(), "g": g.to_dict(), "shift": shift, "b": b, "seed": seed}
        return QiMap(f"standard(b={b:g})", source, target, spec.apply, spec, claimed, True, True, p)
    if kind == "flip":
        isometry = bool(params.get("isometry", False))
        if m == n:
            spec = ProductMapSpec(IdentityMap(m), IdentityMap(n), int(params.get("shift", 0)), swap=True)
            return QiMap("flip", source, target, spec.apply, spec, QiConstants(1, 0), False, True,
                         {"shift": spec.shift})
        if isometry:
            raise BadParams("the flip is an isometry only when m = n")
        # orientation-reversing product map: encode the n-adic coordinate into
        # the m-adic tree and collapse the m-adic one; not a quasi-isometry
        spec = ProductMapSpec(collapse(m, n), encode(n, m), int(params.get("shift", 0)), swap=True)
        claimed = QiConstants(float(params.get("kappa", 1.0)), float(params.get("C", 2.0)))
        return QiMap("flip", source, target, spec.apply, spec, claimed, False, True,
                     {"shift": spec.shift, "isometry": False})
    if kind == "sheared":
        s1, s2 = int(params.get("s1", 0)), int(params.get("s2", 0))
        return QiMap("sheared", source, target, _sheared(s1, s2), None,
                     QiConstants(1, 2.0 * (s1 + s2 + 2)), True, True, {"s1": s1, "s2": s2})
    if kind == "scrambled":
        a = int(params.get("amplitude", 1))
        frac = float(params.get("fraction", 0.03))
        base_kind = params.get("base", "identity")
        base_params = dict(params.get("base_params", {}))
        base = library_map(base_kind, source, target, **base_params)
        cutoff = int(frac * 2 ** 64)

        def f(v: DLVertex) -> DLVertex:
            w = base(v)
            k = stable_hash("scramble", seed, v)
            if k >= cutoff:
                return w
            return _walk(w, 1 + (k >> 8) % a, k)

        claimed = QiConstants(base.claimed.kappa, base.claimed.c_add + 2 * a) if base.claimed else None
        p = {"amplitude": a, "fraction": frac, "base": base_kind, "base_params": base_params, "seed": seed}
        m_ = QiMap(f"scrambled({base.name})", source, target, f, None, claimed, base.preserving, False, p)
        m_.params["base_product"] = base.product.to_dict() if base.product else None
        m_.base = base  # type: ignore[attr-defined]
        return m_
    if kind == "hairpin":
        # 1-Lipschitz, but folds heights at z0 and collapses every level to a point:
        # distances within budget at small scale, unbounded distortion at large scale
        z0 = int(params.get("z0", 1))
        fold = _fold(z0)
        return QiMap("hairpin", source, target, _on_zero_geodesic(m, n, fold), None, None, None, False,
                     {"z0": z0}, height_fn=fold)
    raise BadParams(f"unknown map kind {kind!r}")


def table_map(pairs: dict[DLVertex, DLVertex], source: ModelParams, target: ModelParams,
              name: str = "table") -> QiMap:
    """User map given on finitely many vertices, completed by the nearest tabled vertex."""
    keys = sorted(pairs)

    def f(v: DLVertex) -> DLVertex:
        if v in pairs:
            return pairs[v]
        best = min(keys, key=lambda k: (dl_distance(v, k), k))
        return pairs[best]

    return QiMap(name, source, target, f, None, None, None, None, {"entries": len(keys)})


def load_table(text: str, source: ModelParams, target: ModelParams) -> QiMap:
    """Parse lines ``<vertex literal> -> <vertex literal>`` (``#`` comments allowed)."""
    pairs = {}
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        a, b = line.split("->")
        pairs[DLVertex.parse(a)] = DLVertex.parse(b)
    if not pairs:
        raise BadParams("empty map table")
    return table_map(pairs, source, target)


# measurement -----------------------------------------------------------------

@dataclass
class QiEstimate:
    kappa: float
    c_add: float
    budget: float
    pairs: int
    d_max: int
    witness_upper: tuple[int, int] | None
    witness_lower: tuple[int, int] | None

    def to_dict(self) -> dict:
        return {"kappa": self.kappa, "C": self.c_add, "budget": self.budget, "pairs": self.pairs,
                "d_max": self.d_max, "witness_upper": self.witness_upper, "witness_lower": self.witness_lower}


def sample_pairs(box: Box, count: int, d_max: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded pairs of box vertices with 0 < d <= d_max, stratified by distance."""
    rng = np.random.default_rng(seed)
    per = max(1, count // d_max)
    A, B = [], []
    for d in range(1, d_max + 1):
        got = 0
        for _ in range(60):
            a = rng.integers(0, box.size, 4 * per)
            b = rng.integers(0, box.size, 4 * per)
            dd = box.distance_ids(a, b)
            sel = np.nonzero(dd == d)[0][: per - got]
            A.append(a[sel])
            B.append(b[sel])
            got += len(sel)
            if got >= per:
                break
    return np.concatenate(A), np.concatenate(B)


def fit_constants(dx: np.ndarray, dy: np.ndarray, budget: float) -> tuple[float, float, int, int]:
    """Smallest kappa >= 1 with additive error <= budget on every pair, and the realized error.

    For fixed kappa the least C is max(dy - kappa dx, dx / kappa - dy, 0),
    which decreases in kappa; the threshold kappa is a max over pairs.
    """
    dx = dx.astype(float)
    dy = dy.astype(float)
    up = np.where(dx > 0, (dy - budget) / np.where(dx > 0, dx, 1), -np.inf)
    lo = np.where(dy + budget > 0, dx / np.maximum(dy + budget, 1e-300), np.inf)
    kappa = float(max(1.0, up.max(initial=1.0), lo.max(initial=1.0)))
    c_up = dy - kappa * dx
    c_lo = dx / kappa - dy
    c = float(max(0.0, c_up.max(initial=0.0), c_lo.max(initial=0.0)))
    return kappa, c, int(np.argmax(up)) if len(up) else -1, int(np.argmax(lo)) if len(lo) else -1


def estimate_qi_constants(phi: QiMap, box: Box, pairs: int = 2000, d_max: int = 6, seed: int = 0,
                          budget: float = 2.0) -> QiEstimate:
    a, b = sample_pairs(box, pairs, d_max, seed)
    return estimate_on_pairs(phi, box, a, b, budget, d_max)


def estimate_on_pairs(phi: QiMap, box: Box, a: np.ndarray, b: np.ndarray, budget: float,
                      d_max: int | None = None) -> QiEstimate:
    tgt, img = phi.image(box)
    dx = box.distance_ids(a, b)
    dy = tgt.distance_ids(img[a], img[b])
    k, c, iu, il = fit_constants(dx, dy, budget)
    wu = (int(a[iu]), int(b[iu])) if iu >= 0 else None
    wl = (int(a[il]), int(b[il])) if il >= 0 else None
    return QiEstimate(k, c, budget, len(a), int(d_max if d_max is not None else dx.max(initial=0)), wu, wl)


def exhaustive_constants(phi: QiMap, box: Box, budget: float = 0.0) -> QiEstimate:
    """All pairs of the box."""
    ids = np.arange(box.size)
    a, b = np.meshgrid(ids, ids, indexing="ij")
    sel = a < b
    return estimate_on_pairs(phi, box, a[sel], b[sel], budget)


def omega(m: int, n: int, r1: float, r2: float) -> float:
    """Ball growth ratio |D(r2)| / |D(r1)| (vertex-transitive, so basepoint free)."""
    return ball_size(m, n, math.ceil(r2)) / ball_size(m, n, max(0, math.floor(r1)))


def _neighbourhood(box: Box, ids: np.ndarray, a: int) -> tuple[Box, np.ndarray]:
    # N_a(U) = {x : d(x, U) < a}; it lies inside the box enlarged by a
    big = box.enlarge(a)
    from .dl_geometry import embed_ids

    emb = embed_ids(box, big)[np.asarray(ids, dtype=np.int64)]
    all_ids = np.arange(big.size)
    near = np.zeros(big.size, dtype=bool)
    for chunk in np.array_split(emb, max(1, len(emb) // 256)):
        d = big.distance_ids(all_ids[:, None], chunk[None, :])
        near |= (d < a).any(axis=1)
    return big, np.nonzero(near)[0]


def transport_volume(phi: QiMap, box: Box, U: np.ndarray, a: int, qi: QiConstants) -> dict:
    """The three volumes of the transport inequality and the omega_1 it is checked against."""
    if not a > 4 * qi.kappa * qi.c_add:
        raise PreconditionViolation(f"a={a} must exceed 4 kappa C = {4 * qi.kappa * qi.c_add}")
    big, nu = _neighbourhood(box, U, a)
    tgt, img = phi.image(big)
    n_u = len(nu)
    phi_n = len(np.unique(img[nu]))
    # N_a(phi(U)) inside the target box enlarged by a
    from .dl_geometry import embed_ids

    emb_u = img[embed_ids(box, big)[np.asarray(U, dtype=np.int64)]]
    tbig = tgt.enlarge(a)
    e2 = embed_ids(tgt, tbig)[np.unique(emb_u)]
    all_t = np.arange(tbig.size)
    near = np.zeros(tbig.size, dtype=bool)
    for chunk in np.array_split(e2, max(1, len(e2) // 256)):
        near |= (tbig.distance_ids(all_t[:, None], chunk[None, :]) < a).any(axis=1)
    n_phi_u = int(near.sum())
    k, C = qi.kappa, qi.c_add
    m, n = box.m, box.n
    om1 = max(omega(m, n, a, 5 * k * a + C), omega(m, n, a / k - 2 * C, 5 * a))
    return {
        "N_a(U)": n_u, "phi(N_a(U))": phi_n, "N_a(phi(U))": n_phi_u, "omega_1": om1,
        "ratio_forward": phi_n / n_u, "ratio_back": n_u / n_phi_u,
        "holds": phi_n / om1 <= n_u <= om1 * n_phi_u,
    }


def nearest_preimage(phi: QiMap, box: Box, target_ids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """For target vertices (ids in phi's image box), the source id whose image is nearest.

    Returns (source ids, distances).  Ties go to the smallest source id.
    """
    tgt, img = phi.image(box)
    target_ids = np.asarray(target_ids, dtype=np.int64)
    best = np.empty(len(target_ids), dtype=np.int64)
    dist = np.empty(len(target_ids), dtype=np.int64)
    for k0 in range(0, len(target_ids), 64):
        chunk = target_ids[k0:k0 + 64]
        d = tgt.distance_ids(chunk[:, None], img[None, :])
        best[k0:k0 + 64] = d.argmin(axis=1)
        dist[k0:k0 + 64] = d.min(axis=1)
    return best, dist


def standard_corpus(source: ModelParams, seed: int = 0) -> list[QiMap]:
    """b-standard library maps (b <= 2) on a DL space, used by the end-to-end checks."""
    m, n = source.m, source.n
    maps = [
        library_map("identity", source),
        library_map("height_translation", source, shift=3),
        library_map("standard", source, f="perm", g="perm", seed=seed),
        library_map("standard", source, f={"kind": "add", "digits": {0: 1, -2: 1}}, g="id", seed=seed),
        library_map("standard", source, f="id", g={"kind": "swap", "site": 0}, seed=seed),
    ]
    if m == n:
        maps.append(library_map("flip", source))
    return maps
