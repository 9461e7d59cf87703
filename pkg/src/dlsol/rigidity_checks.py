"""Step II (no orientation flips when m > n) and Step III (global height control).

Step II is a refutation engine: on an orientation-reversing fit it runs the
shadow / plane / pieces construction, looks for the short target path that
avoids the image of the separating horocycle, pulls it back and reports an
explicit pair of points violating the claimed quasi-isometry constants.  A
genuine (kappa, C)-QI can never produce such a pair, so the certificate has no
false positives by construction.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .coarse_diff import (BoundViolation, DegenerateFace, HypothesisFail, ProductMapFit, SampledPath,
                          StepOneResult, _tile_box, extract_product_map, fit_vertical_segment, is_weakly_monotone,
                          quadrilateral_classify, vertical_ids)
from .core import PipelineConfig, PreconditionViolation, QiConstants
from .dl_geometry import Box, DLVertex, _digits, ball_size, dl_distance, embed_ids, geodesic, shadow, y_horocycle


class StageDataMissing(RuntimeError):
    pass


# downward rays ---------------------------------------------------------------------

def unblocked_rays(box: Box, blocked: np.ndarray, t_stop: int = 0) -> dict:
    """Per level t >= t_stop, the number of downward rays from each vertex that reach
    level t_stop without meeting a blocked vertex (start and end included).

    Arrays have shape (m^(L-t), n^t), indexed by (i1, i2).  A ray from (t, i1, i2)
    steps to (t-1, i1 m + d, i2 // n).
    """
    m, n, L = box.m, box.n, box.L
    blocked = np.asarray(blocked, dtype=bool)
    out = {}
    cur = (~blocked[box.level_ids(t_stop)]).astype(np.int64).reshape(m ** (L - t_stop), n ** t_stop)
    out[t_stop] = cur
    for t in range(t_stop + 1, L + 1):
        s = cur.reshape(m ** (L - t), m, n ** (t - 1)).sum(axis=1)
        s = np.repeat(s, n, axis=1)
        cur = s * (~blocked[box.level_ids(t)]).reshape(m ** (L - t), n ** t)
        out[t] = cur
    return out


def _ray_counts(box: Box, counts: dict, ids: np.ndarray) -> np.ndarray:
    t, i1, i2 = (c[ids] for c in box.coords)
    return np.array([counts[int(a)][int(b), int(c)] for a, b, c in zip(t, i1, i2)], dtype=np.int64)


def _neighbourhood(box: Box, ids: np.ndarray, r: float) -> np.ndarray:
    mask = np.zeros(box.size, dtype=bool)
    ids = np.unique(np.asarray(ids, dtype=np.int64))
    if r < 1:
        mask[ids] = True
        return mask
    allv = np.arange(box.size)
    for h in ids:
        mask |= box.distance_ids(allv, h) <= r
    return mask


# trapping -------------------------------------------------------------------------

@dataclass
class TrapResult:
    hypothesis_ok: bool
    length: int
    bound: float
    holds: bool
    k: int
    r: int
    area: int
    c2: float

    def to_dict(self) -> dict:
        return {"hypothesis_ok": self.hypothesis_ok, "length": self.length, "bound": self.bound,
                "holds": self.holds, "k": self.k, "r": self.r, "area": self.area, "c2": self.c2}


def trapping_bound(box: Box, U, gamma, k: int, r: int = 0) -> TrapResult:
    """Length-area inequality for a set gamma blocking every downward ray from U.

    U is an equal-height set of box ids and gamma a set of box ids at least k
    levels below it.  Blocking is checked exhaustively inside the box (rays end
    at the bottom level).  When it holds, |gamma| |D(r)| n^k >= m^k |U| is
    asserted in integers; c2 = log |D(r)| / r.
    """
    U = np.unique(np.asarray(U, dtype=np.int64))
    gamma = np.unique(np.asarray(gamma, dtype=np.int64))
    t = box.coords[0]
    levels = np.unique(t[U])
    if len(U) == 0 or len(levels) != 1:
        raise PreconditionViolation("U must be a nonempty equal-height set")
    tU = int(levels[0])
    if len(gamma) and t[gamma].max() > tU - k:
        raise PreconditionViolation(f"gamma must stay {k} levels below U")
    blocked = _neighbourhood(box, gamma, r)
    free = _ray_counts(box, unblocked_rays(box, blocked, 0), U)
    if (free > 0).any():
        raise HypothesisFail("blocking", f"{int((free > 0).sum())} of {len(U)} vertices keep an unblocked ray")
    m, n = box.m, box.n
    ball = ball_size(m, n, r)
    ell = len(gamma)
    holds = ell * ball * n ** k >= m ** k * len(U)
    if not holds:
        raise BoundViolation(f"blocking set of size {ell} below (m/n)^k |U| / |D(r)|")
    return TrapResult(True, ell, (m / n) ** k * len(U) / ball, holds, k, r, len(U),
                      math.log(ball) / r if r else 0.0)


# A-uniform points -------------------------------------------------------------------

@dataclass
class UniformPoints:
    uniform: np.ndarray
    theta: float
    density: float
    A: float

    def to_dict(self) -> dict:
        return {"points": int(len(self.uniform)), "uniform": int(self.uniform.sum()), "theta": self.theta,
                "density": self.density, "A": self.A}


def _window_counts(bad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # P(x, T) and |I(x, T)| for T = 1 .. N-1, I(x, T) = [x - T, x + T] clipped to the path
    N = len(bad)
    cs = np.concatenate([[0], np.cumsum(bad.astype(np.int64))])
    x = np.arange(N)[:, None]
    T = np.arange(1, max(N, 2))[None, :]
    lo = np.maximum(x - T, 0)
    hi = np.minimum(x + T, N - 1)
    return cs[hi + 1] - cs[lo], hi - lo + 1


def a_uniform_points(bad, A: float) -> UniformPoints:
    """Points x of a path where every window I(x, T), T >= 1, has bad count below A nu |I|.

    ``bad`` flags the path points outside the good set W and nu is their
    fraction.  Windows are normalized by their clipped size, which makes the
    covering argument exact on a lattice path: the non-uniform fraction is at
    most 2/A (asserted).
    """
    bad = np.asarray(bad, dtype=bool)
    N = len(bad)
    nbad = int(bad.sum())
    if nbad == 0 or N < 2:
        return UniformPoints(np.ones(N, dtype=bool), 0.0, nbad / max(N, 1), A)
    P, size = _window_counts(bad)
    nonuni = (P * N >= A * nbad * size).any(axis=1)
    theta = float(nonuni.sum() / N)
    if theta > 2 / A + 1e-12:
        raise BoundViolation(f"non-uniform fraction {theta} above 2/A = {2 / A}")
    return UniformPoints(~nonuni, theta, nbad / N, A)


# weak monotonicity ---------------------------------------------------------------

@dataclass
class WeakCheck:
    precondition: bool
    holds: bool | None
    eta: float
    c1: float
    spread: float

    def to_dict(self) -> dict:
        return {"precondition": self.precondition, "holds": self.holds, "eta": self.eta, "c1": self.c1,
                "spread": self.spread}


def weak_monotonicity_from_uniformity(heights, bad, x: int, cfg: PipelineConfig, R: int,
                                      kappa: float = 1.0) -> WeakCheck:
    """Check that the image rays from x along a path are (eta, C1)-weakly monotone.

    ``heights`` are target heights of phi along the path and ``bad`` flags
    points outside W.  The precondition is the density bound at x: every
    window around x has bad count below eta1 |I|.  eta = weak_eta kappa^2 eta1
    (capped below 1) and C1 = weak_c1 eta1 R.  ``spread`` is the smallest C1
    the rays would need at this eta.
    """
    led = cfg.ledger
    eta = min(led.weak_eta * kappa ** 2 * cfg.eta1, 1.0 - 1e-9)
    c1 = led.weak_c1 * cfg.eta1 * R
    bad = np.asarray(bad, dtype=bool)
    heights = np.asarray(heights, dtype=float)
    if bad.any() and len(bad) > 1:
        P, size = _window_counts(bad)
        if (P[x] >= cfg.eta1 * size[x]).any():
            return WeakCheck(False, None, eta, c1, math.nan)
    spread = 0.0
    ok = True
    for ray in (heights[x:], heights[x::-1]):
        if len(ray) < 2:
            continue
        res = is_weakly_monotone(SampledPath.from_heights(ray), eta, c1)
        spread = max(spread, res.spread)
        ok = ok and res.ok
    return WeakCheck(True, ok, eta, c1, spread)


# Step II: no flips ---------------------------------------------------------------

@dataclass
class Inconclusive:
    stage: str
    reason: str
    stages: dict = field(default_factory=dict)

    fired = False

    def to_dict(self) -> dict:
        return {"result": "inconclusive", "stage": self.stage, "reason": self.reason, "stages": self.stages}


@dataclass
class RefutationCertificate:
    violation: dict
    witness: list
    stages: dict
    violations: list

    fired = True

    def to_dict(self) -> dict:
        return {"result": "refuted", "violation": self.violation, "witness": list(self.witness),
                "stages": self.stages, "violation_count": len(self.violations)}


def noflips_min_R(m: int, n: int, cfg: PipelineConfig) -> float:
    """Smallest R with exp((c rho2 - D rho1) R) >= noflips_area, c = noflips_c log(m/n)."""
    led = cfg.ledger
    rate = led.noflips_c * math.log(m / n) * cfg.rho2 - led.noflips_d * cfg.rho1
    if rate <= 0:
        return math.inf
    return math.log(led.noflips_area) / rate


def _qi_pair(d_src: float, d_tgt: float, qi: QiConstants) -> str | None:
    # the (kappa, C) inequalities d/kappa - C <= d' <= kappa d + C
    if d_src > qi.kappa * (d_tgt + qi.c_add) + 1e-9:
        return "lower"
    if d_tgt > qi.kappa * d_src + qi.c_add + 1e-9:
        return "upper"
    return None


def _violation(kind: str, stage: str, u: DLVertex, v: DLVertex, d_src: int, d_tgt: int,
               qi: QiConstants) -> dict:
    bound = qi.kappa * (d_tgt + qi.c_add) if kind == "lower" else qi.kappa * d_src + qi.c_add
    return {"stage": stage, "kind": kind, "u": str(u), "v": str(v), "d_src": int(d_src), "d_tgt": int(d_tgt),
            "kappa": qi.kappa, "C": qi.c_add, "bound": bound}


def _down_pair(tgt: Box, t: int, c: int, a: int, b: int, blocked: np.ndarray):
    """Digits taking (t, c, a) and (t, c, b) down together, avoiding blocked vertices,
    until the T2 indices merge.  Returns the list of T1 indices per depth or None."""
    m, n = tgt.m, tgt.n

    def ok(tt, cc, aa):
        return not blocked[int(tgt.id_of(tt, cc, aa))]

    def rec(j, cc):
        tt = t - j
        aj, bj = a // n ** j, b // n ** j
        if not (ok(tt, cc, aj) and ok(tt, cc, bj)):
            return None
        if aj == bj:
            return [cc]
        if tt == 0:
            return None
        for d in range(m):
            rest = rec(j + 1, cc * m + d)
            if rest is not None:
                return [cc] + rest
        return None

    return rec(0, c)


def noflips_certificate(box: Box, phi, fit: ProductMapFit, cfg: PipelineConfig, qi: QiConstants | None = None,
                        require_reversing: bool = True) -> RefutationCertificate | Inconclusive:
    """Run the no-flips construction on a tile and look for an explicit QI violation.

    ``fit`` is the product fit on ``box`` (its U2 is the good set).  The
    construction: a y-horocycle H above the middle with the best shadow, a
    level P between rho2 R and 2 rho2 R below it, pieces S1, S2 of the shadow
    on P in different T1 subtrees under H (every path between them meets the
    horocycle through H), their images W1, W2, the parts W' whose downward rays
    mostly avoid phi(H), a target path between W1' and W2' avoiding phi(H), and
    its pull-back.  Any pair violating the (kappa, C) inequalities found on
    the way (collapsed areas, chain jumps, the crossing of H) is returned as
    the refutation.
    """
    m, n, R = box.m, box.n, box.L
    if m == n:
        raise PreconditionViolation("no-flips fails for m = n: flips are isometries there")
    if m < n:
        raise PreconditionViolation("expects m > n (swap the trees)")
    qi = qi or phi.claimed
    if qi is None:
        raise PreconditionViolation("no QI constants to refute")
    q = np.asarray(fit.q)
    reversing = fit.orientation == "down" and bool((np.diff(q) < 0).all())
    stages: dict = {"R": R, "R_min": noflips_min_R(m, n, cfg), "reversing": reversing}
    if require_reversing and not reversing:
        return Inconclusive("fit", "fit not reversing", stages)
    if R < stages["R_min"]:
        return Inconclusive("size", "R below the ledger minimum", stages)
    led = cfg.ledger
    t, i1, i2 = box.coords
    inU = np.zeros(box.size, dtype=bool)
    inU[fit.U2] = True
    w = box.weights
    rho = led.noflips_radius * cfg.rho1 * R

    # good shadow: H above the middle; P at distance d in (rho2 R, 2 rho2 R) below it
    ds = [d for d in range(1, R + 1) if cfg.rho2 * R < d < 2 * cfg.rho2 * R]
    best = None
    for tH in range(R // 2 + 1, R + 1):
        if not any(tH - d >= 0 for d in ds):
            continue
        for a in range(m ** (R - tH)):
            H = y_horocycle(box, tH, a)
            sh = shadow(H, rho, box, "down").members
            bad = float(w[sh][~inU[sh]].sum() / w[sh].sum())
            if best is None or bad < best[0]:
                best = (bad, tH, a, H, sh)
    if best is None:
        return Inconclusive("shadow", "no level above the middle with a plane below", stages)
    bad_sh, tH, a1, H, sh = best
    stages["shadow"] = {"t_H": tH, "i1": a1, "bad": bad_sh, "limit": led.shadow_const * math.sqrt(cfg.theta),
                            "ok": bad_sh <= led.shadow_const * math.sqrt(cfg.theta)}
    in_sh = np.zeros(box.size, dtype=bool)
    in_sh[sh] = True
    plane = None
    for d in ds:
        tP = tH - d
        if tP < 0:
            continue
        lev = box.level_ids(tP)
        lev = lev[in_sh[lev]]
        bad = float(w[lev][~inU[lev]].sum() / w[lev].sum())
        if plane is None or bad < plane[0]:
            plane = (bad, tP, d, lev)
    bad_p, tP, d, Pids = plane
    stages["plane"] = {"t_P": tP, "d": d, "bad": bad_p, "limit": led.plane_const * cfg.theta ** 0.25,
                           "ok": bad_p <= led.plane_const * cfg.theta ** 0.25}

    # pieces: first T1 digit below H equal to 0 (S1) or m - 1 (S2)
    first = (i1[Pids] // m ** (d - 1)) % m
    S = [Pids[first == 0], Pids[first == m - 1]]
    ell_H = len(H)
    pieces = []
    Sp = []
    for j in (0, 1):
        keep = []
        for p in S[j]:
            fine = inU[p]
            for other in S:
                row = other[i2[other] == i2[p]]
                fine = fine and inU[row].sum() > 0.5 * len(row)
            if fine:
                keep.append(int(p))
        Sp.append(np.array(keep, dtype=np.int64))
        pieces.append({"area": int(len(S[j])), "good": len(keep),
                       "area_over_H": len(S[j]) / ell_H})
    stages["pieces"] = {"pieces": pieces, "separation": "tree: paths between the pieces meet T1 vertex of H",
                            "ok": all(len(s) > 0 for s in Sp)}
    if not stages["pieces"]["ok"]:
        return Inconclusive("pieces", "empty good piece", stages)

    tgt, img = phi.image(box)
    verts_src = {}

    def sv(k: int) -> DLVertex:
        if k not in verts_src:
            verts_src[k] = box.vertex(int(t[k]), int(i1[k]), int(i2[k]))
        return verts_src[k]

    def tv(k: int) -> DLVertex:
        tt, a, b = (int(c[k]) for c in tgt.coords)
        return tgt.vertex(tt, a, b)

    violations: list = []

    # areas of the images; a collapse below the QI volume bound shows up as a pair
    W = [np.unique(img[s]) for s in Sp]
    phiH = np.unique(img[H])
    c_rate = led.noflips_c * math.log(m / n)
    growth = math.exp((c_rate * cfg.rho2 - led.noflips_d * cfg.rho1) * R)
    stages["areas"] = {"W": [int(len(x)) for x in W], "phi_H": int(len(phiH)), "growth": growth,
                       "required": [led.noflips_area * len(phiH)] * 2,
                       "ok": all(len(x) >= led.noflips_area * len(phiH) for x in W)}
    for j, s in enumerate(Sp):
        order = np.argsort(img[s], kind="stable")
        s_sorted, im_sorted = s[order], img[s][order]
        starts = np.flatnonzero(np.r_[True, im_sorted[1:] != im_sorted[:-1]])
        for lo, hi in zip(starts, np.r_[starts[1:], len(s_sorted)]):
            if hi - lo < 2:
                continue
            grp = s_sorted[lo:hi]
            D = box.distance_ids(grp[:, None], grp[None, :])
            a, b = np.unravel_index(int(D.argmax()), D.shape)
            kind = _qi_pair(int(D[a, b]), 0, qi)
            if kind:
                violations.append(_violation(kind, "areas", sv(int(grp[a])), sv(int(grp[b])),
                                             int(D[a, b]), 0, qi))
                break

    # trapping in the target: rays from W going down past phi(H)
    tl = tgt.coords[0]
    if tl[np.concatenate(W)].min() <= tl[phiH].max():
        stages["trapping"] = {"ok": False}
        return _finish(violations, [], stages, "trapping", "images not above phi(H)")
    blocked = _neighbourhood(tgt, phiH, rho)
    t_stop = int(tl[blocked].min())
    counts = unblocked_rays(tgt, blocked, t_stop)
    Wp = []
    trap = []
    for x in W:
        frac = _ray_counts(tgt, counts, x) / tgt.m ** (tl[x] - t_stop).astype(float)
        keep = x[frac >= led.trap_fraction]
        Wp.append(keep)
        k = int(tl[x].min() - t_stop)
        trap.append({"k": k, "r": rho, "length_phi_H": int(blocked.sum()),
                     "bound": (tgt.m / tgt.n) ** k * len(keep), "area_W": int(len(x)),
                     "area_W_prime": int(len(keep)), "ok": len(keep) >= led.area_fraction * len(x)})
    stages["trapping"] = {"pieces": trap, "ok": all(p["ok"] for p in trap)}

    # a horocycle meeting both W1' and W2', and rays from them that merge avoiding phi(H)
    tg, g1, g2 = tgt.coords
    key = [{} for _ in (0, 1)]
    for j in (0, 1):
        for p in Wp[j]:
            key[j].setdefault((int(tg[p]), int(g1[p])), []).append(int(p))
    path = None
    for hk in sorted(set(key[0]) & set(key[1])):
        for p1 in key[0][hk][:32]:
            for p2 in key[1][hk][:32]:
                if g2[p1] == g2[p2]:
                    continue
                digits = _down_pair(tgt, hk[0], hk[1], int(g2[p1]), int(g2[p2]), blocked)
                if digits is not None:
                    path = (hk[0], digits, int(g2[p1]), int(g2[p2]), p1, p2)
                    break
            if path:
                break
        if path:
            break
    if path is None:
        stages["witness"] = {"ok": False}
        return _finish(violations, [], stages, "witness", "no path avoiding phi(H)")
    tw, digits, a, b, p1, p2 = path
    down = [int(tgt.id_of(tw - j, c, a // tgt.n ** j)) for j, c in enumerate(digits)]
    up = [int(tgt.id_of(tw - j, c, b // tgt.n ** j)) for j, c in enumerate(digits)]
    wpath = down + up[::-1][1:]
    stages["witness"] = {"length": len(wpath) - 1, "avoids_phi_H": bool(not blocked[wpath].any()), "ok": True}

    # pull back: s1, nearest preimages of the inner witness vertices, s2
    from .maps import nearest_preimage

    s1 = int(Sp[0][np.flatnonzero(img[Sp[0]] == p1)[0]])
    s2 = int(Sp[1][np.flatnonzero(img[Sp[1]] == p2)[0]])
    inner, _ = nearest_preimage(phi, box, np.array(wpath[1:-1], dtype=np.int64))
    chain = [s1] + [int(u) for u in inner] + [s2]
    length = 0
    for u, v in zip(chain, chain[1:]):
        dsrc = int(box.distance_ids(u, v))
        dtgt = int(tgt.distance_ids(img[u], img[v]))
        length += dsrc
        kind = _qi_pair(dsrc, dtgt, qi)
        if kind:
            violations.append(_violation(kind, "pullback:jump", sv(u), sv(v), dsrc, dtgt, qi))
    stages["pullback"] = {"chain": len(chain), "length": length,
                          "bound": led.noflips_path * qi.kappa ** 3 * cfg.rho2 * R}
    # the pulled-back path crosses the T1 vertex of H at its height
    hH = box.h_bottom + tH
    t1H = box.vertex(tH, a1, 0).t1
    crossing = None
    for u, v in zip(chain, chain[1:]):
        for z in geodesic(sv(u), sv(v)):
            if z.height == hH and z.t1 == t1H:
                crossing = (z, u, v)
                break
        if crossing:
            break
    if crossing is not None:
        z, u, v = crossing
        fz = phi(z)
        for x in (u, v):
            dsrc = dl_distance(z, sv(x))
            dtgt = dl_distance(fz, phi(sv(x)))
            kind = _qi_pair(dsrc, dtgt, qi)
            if kind:
                violations.append(_violation(kind, "pullback:crossing", z, sv(x), dsrc, dtgt, qi))
        stages["pullback"]["crossing"] = str(z)
    witness = [str(tv(k)) for k in wpath]
    return _finish(violations, witness, stages, "pullback", "pullback consistent with the claimed constants")


def _finish(violations, witness, stages, stage, reason):
    if violations:
        return RefutationCertificate(violations[0], witness, stages, violations)
    return Inconclusive(stage, reason, stages)


# Step II driver --------------------------------------------------------------------

@dataclass
class OrientationCertificate:
    orientations: dict
    consistent: bool
    skipped: bool
    refutations: list
    notes: list

    @property
    def ok(self) -> bool:
        return self.consistent and not any(r.fired for r in self.refutations)

    def to_dict(self) -> dict:
        return {"orientations": {str(k): v for k, v in sorted(self.orientations.items())},
                "consistent": self.consistent, "skipped": self.skipped, "ok": self.ok,
                "refutations": [r.to_dict() for r in self.refutations], "notes": list(self.notes)}


def _containing_tile(box: Box, R: int, tile, R2: int) -> Box:
    band = tile.band * R // R2
    top_old, top_new = (tile.band + 1) * R, (band + 1) * R2
    I1 = tile.i1 // box.m ** (top_new - top_old)
    I2 = tile.i2 // box.n ** (tile.band * R - band * R2)
    return Box(box.top.descend(_digits(I1, box.m, box.L - top_new)),
               box.bottom.descend(_digits(I2, box.n, band * R2)), R2)


def step_two(box: Box, phi, cfg: PipelineConfig, s1: StepOneResult, ladder, qi: QiConstants | None = None
             ) -> OrientationCertificate:
    """Orientation consistency over good tiles; for m > n, refute reversing fits.

    A reversing good tile is lifted to the smallest ladder scale reaching the
    ledger-minimal R that fits in the box, refit there, and handed to
    noflips_certificate.
    """
    if s1.report is None:
        raise StageDataMissing("Step I produced no good tiles")
    rep = s1.report
    ori = {k: v.dominant for k, v in rep.votes.items()}
    consistent = len(set(ori.values())) <= 1
    notes: list = []
    if box.m == box.n:
        notes.append("m = n: flips are allowed, only consistency is checked")
        return OrientationCertificate(ori, consistent, True, [], notes)
    down = sorted(k for k, o in ori.items() if o == "down")
    refs = []
    qi = qi or phi.claimed
    if down and qi is None:
        notes.append("reversing tiles but no claimed QI constants: refutation skipped")
    elif down:
        need = noflips_min_R(box.m, box.n, cfg)
        sizes = [r for r in ladder if r >= need and r <= box.L and box.L % r == 0 and r >= rep.R]
        if not sizes:
            notes.append(f"no ladder scale reaches the ledger-minimal R = {need:.2f}")
        else:
            R2 = sizes[0]
            tb = _containing_tile(box, rep.R, rep.tiles[down[0]], R2)
            tgt, img = phi.image(box)
            ids = embed_ids(tb, box)
            try:
                fit = extract_product_map(tb, tgt, img[ids], np.arange(tb.size), "down", cfg)
                refs.append(noflips_certificate(tb, phi, fit, cfg, qi))
            except DegenerateFace as exc:
                notes.append(f"refit failed: {exc}")
    return OrientationCertificate(ori, consistent, False, refs, notes)


# Step III: multiscale drift --------------------------------------------------------

@dataclass
class DriftReport:
    ladder: list
    plane: int
    coverage: list
    same_rectangle: list
    next_level: list
    uj_step: list
    pairs: list
    failures: list
    notes: list = field(default_factory=list)   # coverage shortfalls (precondition, not a bound failure)

    @property
    def ok(self) -> bool:
        return not self.failures

    def csv_rows(self):
        yield ["pair_id", "d(x,y)", "drift", "bound"]
        for k, p in enumerate(self.pairs):
            yield [k, p["d"], p["drift"], p["bound"]]

    def to_dict(self) -> dict:
        return {"ladder": list(self.ladder), "plane": self.plane, "coverage": self.coverage,
                "same_rectangle": self.same_rectangle, "next_level": self.next_level, "uj_step": self.uj_step,
                "pair_count": len(self.pairs), "max_drift": max((p["drift"] for p in self.pairs), default=0),
                "M": max((p["M"] for p in self.pairs), default=0.0), "failures": list(self.failures),
                "notes": list(self.notes),
                "ok": self.ok}


def drift_ladder(L: int, cfg: PipelineConfig) -> list[int]:
    """L_j = floor((1 + beta)^j L_0), strictly increasing, with 2 L_j <= L."""
    out = []
    j = 0
    while True:
        v = int(math.floor(cfg.r0 * (1 + cfg.beta) ** j + 1e-9))
        if 2 * v > L:
            break
        if not out or v > out[-1]:
            out.append(v)
        j += 1
        if j > 64:
            break
    return out


def _orientation_of(levels: np.ndarray, box: Box) -> str:
    top = np.sort(levels[box.level_ids(box.L)])
    bot = np.sort(levels[box.level_ids(0)])
    return "up" if top[(len(top) - 1) // 2] >= bot[(len(bot) - 1) // 2] else "down"


def multiscale_drift(box: Box, phi, cfg: PipelineConfig, pairs: int = 120, seed: int | None = None
                     ) -> DriftReport:
    """Drift of heights along the plane through the middle of the box.

    Rectangles at scale L_j are the slab components of [P - L_j, P + L_j]; each
    gets a product fit and U_{j,k} = points of its thickening R+ (levels within
    nu L_j / 2 of P) where phi is within nu L_j of the fit.  Checks the
    same-rectangle (2 nu L_j), next-level (12 nu L_j) and chain-step
    (16 nu L_{j+1}) bounds, then chains sampled same-height pairs up to their
    first common rectangle and checks the telescoped bound (32 nu / beta) L_N.
    """
    seed = cfg.seed if seed is None else seed
    led = cfg.ledger
    Ls = drift_ladder(box.L, cfg)
    if not Ls:
        raise StageDataMissing(f"box of size {box.L} holds no rectangle of size 2 L_0 = {2 * cfg.r0}")
    m, n, L = box.m, box.n, box.L
    tP = L // 2
    tgt, img = phi.image(box)
    hphi = tgt.coords[0][img] + tgt.h_bottom
    t, i1, i2 = box.coords
    nu = cfg.nu
    U: list = []            # per level j: dict rect key -> parent ids of U_{j,k}
    coverage, same_rectangle, next_level, uj = [], [], [], []
    failures: list = []
    notes: list = []
    for j, Lj in enumerate(Ls):
        thick = int(math.floor(nu * Lj / 2 + 1e-12))
        Uj = {}
        cov = []
        worst = 0
        for I1 in range(m ** (L - tP - Lj)):
            for I2 in range(n ** (tP - Lj)):
                sb = Box(box.top.descend(_digits(I1, m, L - tP - Lj)),
                         box.bottom.descend(_digits(I2, n, tP - Lj)), 2 * Lj)
                emb = embed_ids(sb, box)
                ori = _orientation_of(tgt.coords[0][img[emb]], sb)
                try:
                    fit = extract_product_map(sb, tgt, img[emb], np.arange(sb.size), ori, cfg)
                except DegenerateFace as exc:  # pragma: no cover - U is the whole rectangle
                    raise StageDataMissing(str(exc))
                st = sb.coords[0]
                thick_mask = np.abs(st - Lj) <= thick
                vals = fit.values
                dist = np.full(sb.size, np.iinfo(np.int64).max)
                has = vals >= 0
                dist[has] = tgt.distance_ids(img[emb][has], vals[has])
                sel = np.flatnonzero(thick_mask & (dist <= nu * Lj))
                Uj[I1, I2] = emb[sel]
                frac = sb.mu(sel) / sb.mu(np.flatnonzero(thick_mask))
                cov.append(frac)
                if len(sel):
                    worst = max(worst, int(np.ptp(hphi[emb[sel]])))
        U.append(Uj)
        coverage.append({"L": Lj, "min": min(cov), "required": 1 - nu, "ok": min(cov) >= 1 - nu})
        if min(cov) < 1 - nu:
            notes.append(f"coverage {min(cov):.4f} below 1 - nu at L={Lj}")
        lim = led.same_level * nu * Lj
        same_rectangle.append({"L": Lj, "max": worst, "bound": lim, "ok": worst <= lim + 1e-9})
        if worst > lim + 1e-9:
            failures.append(f"same-rectangle spread {worst} > {lim:.3f} at L={Lj}")

    def parent_key(key, j):
        # rectangle at level j + 1 containing rectangle key at level j
        dj = Ls[j + 1] - Ls[j]
        return key[0] // m ** dj, key[1] // n ** dj

    for j in range(len(Ls) - 1):
        lim_n = led.next_level * nu * Ls[j]
        lim_s = led.uj_step * nu * Ls[j + 1]
        groups: dict = {}
        for key, ids in U[j].items():
            groups.setdefault(parent_key(key, j), []).append(ids)
        worst_n = worst_s = 0
        for K, lst in groups.items():
            allj = np.concatenate(lst)
            if len(allj):
                worst_n = max(worst_n, int(np.ptp(hphi[allj])))
            up = U[j + 1].get(K, np.zeros(0, dtype=np.int64))
            if len(allj) and len(up):
                a, b = hphi[allj], hphi[up]
                worst_s = max(worst_s, int(max(a.max() - b.min(), b.max() - a.min())))
        next_level.append({"L": Ls[j], "max": worst_n, "bound": lim_n, "ok": worst_n <= lim_n + 1e-9})
        uj.append({"L": Ls[j + 1], "max": worst_s, "bound": lim_s, "ok": worst_s <= lim_s + 1e-9})
        if worst_n > lim_n + 1e-9:
            failures.append(f"next-level spread {worst_n} > {lim_n:.3f} at L={Ls[j]}")
        if worst_s > lim_s + 1e-9:
            failures.append(f"chain step {worst_s} > {lim_s:.3f} at L={Ls[j + 1]}")

    # sampled same-height pairs on the plane, stratified by distance
    plane = box.level_ids(tP)
    rng = np.random.default_rng(seed)
    a = plane[rng.integers(0, len(plane), 16 * pairs)]
    b = plane[rng.integers(0, len(plane), 16 * pairs)]
    d = box.distance_ids(a, b)
    keep = d > 0
    a, b, d = a[keep], b[keep], d[keep]
    bins = np.floor(np.log2(d)).astype(int)
    nb = max(1, len(np.unique(bins)))
    chosen = []
    for bv in np.unique(bins):
        idx = np.flatnonzero(bins == bv)[: max(1, pairs // nb)]
        chosen.extend(idx.tolist())
    chosen.sort()

    def key_of(x, j):
        return int(i1[x]) // m ** Ls[j], int(i2[x]) // n ** Ls[j]

    def rep(x, j, key):
        ids = U[j].get(key)
        if ids is None or len(ids) == 0:
            return None
        dd = box.distance_ids(ids, x)
        return int(ids[np.lexsort((ids, dd))[0]])

    out_pairs = []
    theta = cfg.theta
    for c in chosen:
        x, y = int(a[c]), int(b[c])
        N = next((j for j in range(len(Ls)) if key_of(x, j) == key_of(y, j)), None)
        if N is None:
            continue
        top = rep(x, N, key_of(x, N))
        cx = [rep(x, j, key_of(x, j)) for j in range(N)] + [top]
        cy = [rep(y, j, key_of(y, j)) for j in range(N)] + [top]
        if any(v is None for v in cx + cy):
            failures.append(f"empty U on the chain of pair ({x}, {y})")
            continue
        steps = [abs(int(hphi[u]) - int(hphi[v])) for ch in (cx, cy) for u, v in zip(ch, ch[1:])]
        total = sum(steps)
        cap = sum(2 * led.uj_step * nu * Ls[j + 1] for j in range(N))
        drift = abs(int(hphi[cx[0]]) - int(hphi[cy[0]]))
        bound = led.telescoped * nu / cfg.beta * Ls[N]
        raw = abs(int(hphi[x]) - int(hphi[y]))
        out_pairs.append({"x": x, "y": y, "d": int(d[c]), "N": N, "drift": drift, "total": total,
                          "chain_cap": cap, "bound": bound, "raw": raw, "M": raw - theta * int(d[c])})
        if total > cap + 1e-9:
            failures.append(f"chain total {total} above {cap:.3f} for pair ({x}, {y})")
        if drift > bound + 1e-9:
            failures.append(f"telescoped drift {drift} above {bound:.3f} for pair ({x}, {y})")
    if not out_pairs:
        raise StageDataMissing("no sampled pair shares a rectangle")
    return DriftReport(Ls, tP, coverage, same_rectangle, next_level, uj, out_pairs, failures, notes)


# final verdict -----------------------------------------------------------------------

@dataclass
class Verdict:
    height_respecting: bool
    fit: dict
    constants: dict
    stages: dict
    diagnostics: list

    def to_dict(self) -> dict:
        return {"height_respecting": self.height_respecting, "fit": self.fit, "constants": self.constants,
                "stages": self.stages, "diagnostics": list(self.diagnostics)}


def good_set(box: Box, s1: StepOneResult) -> np.ndarray:
    """Union of the U2 sets of the good-tile fits, as a mask over the box."""
    W = np.zeros(box.size, dtype=bool)
    if s1.report is None:
        return W
    R = s1.report.R
    for k, fit in s1.report.fits.items():
        tb = _tile_box(box, R, s1.report.tiles[k])
        W[embed_ids(tb, box)[fit.U2]] = True
    return W


def global_q(box: Box, phi, W: np.ndarray) -> list[int]:
    """Lower median of the target height per source level over W (all points if W misses a level)."""
    tgt, img = phi.image(box)
    h = tgt.coords[0][img] + tgt.h_bottom
    q = []
    for t in range(box.L + 1):
        ids = box.level_ids(t)
        sel = ids[W[ids]] if W[ids].any() else ids
        s = np.sort(h[sel])
        q.append(int(s[(len(s) - 1) // 2]))
    return q


def q_bilipschitz(q, kappa: float, cfg: PipelineConfig, L: int) -> dict:
    """(1/2 kappa)|z1 - z2| - c delta L < |q(z1) - q(z2)| <= 2 kappa |z1 - z2| + c delta L."""
    slack = cfg.ledger.q_bilip * cfg.delta * L
    worst = None
    for z1 in range(len(q)):
        for z2 in range(z1 + 1, len(q)):
            dz, dq = z2 - z1, abs(q[z2] - q[z1])
            if not (dz / (2 * kappa) - slack < dq <= 2 * kappa * dz + slack):
                worst = (z1, z2, dq)
                break
        if worst:
            break
    return {"ok": worst is None, "kappa": kappa, "slack": slack,
            "violation": None if worst is None else {"z1": worst[0], "z2": worst[1], "dq": worst[2]}}


def _quad_segments(box: Box, a: int, b: int, kind: str):
    """Corners and vertical segments of the genuine quadrilateral on a same-level pair.

    ``down``: a and b share T1; the q's sit where their T2 coordinates merge,
    below a common T1 vertex and split at the first digit.  ``up`` mirrors it.
    """
    m, n, L = box.m, box.n, box.L
    t, i1, i2 = (int(c[a]) for c in box.coords)
    _, j1, j2 = (int(c[b]) for c in box.coords)
    if kind == "down":
        dl = next(k for k in range(1, t + 1) if i2 // n ** k == j2 // n ** k) if t > 0 else None
        if dl is None or i2 == j2:
            return None
        tq = t - dl
        xs = [i1 * m ** dl, i1 * m ** dl + (m - 1) * m ** (dl - 1)]
        segs = {}
        for pi, y in ((1, i2), (2, j2)):
            for qj, x in ((1, xs[0]), (2, xs[1])):
                segs[pi, qj] = vertical_ids(box, tq, t, x, y)[::-1]
    else:
        top = L - t
        du = next((k for k in range(1, top + 1) if i1 // m ** k == j1 // m ** k), None)
        if du is None or i1 == j1:
            return None
        ys = [i2 * n ** du, i2 * n ** du + (n - 1) * n ** (du - 1)]
        segs = {}
        for pi, x in ((1, i1), (2, j1)):
            for qj, y in ((1, ys[0]), (2, ys[1])):
                segs[pi, qj] = vertical_ids(box, t, t + du, x, y)
    q = (int(segs[1, 1][-1]), int(segs[1, 2][-1]))
    return (a, b), q, segs


def pairwise_heights(box: Box, phi, cfg: PipelineConfig, R: int, pairs: int = 60, seed: int | None = None,
                     kappa: float = 1.0) -> dict:
    """Final check on sampled same-height pairs (any points, not only good ones).

    A pair (p1, p2) is split through p3 = (T1 of p1, T2 of p2): p1, p3 span a
    downward and p3, p2 an upward genuine quadrilateral.  The four image
    segments of each are fitted by vertical segments and classified; the
    height difference of the image corners is compared with C1, the larger of
    weak_c1 eta1 R and the weak-monotonicity spread of the images.
    """
    seed = cfg.seed if seed is None else seed
    tgt, img = phi.image(box)
    th = tgt.coords[0]
    hphi = th[img] + tgt.h_bottom
    t, i1, i2 = box.coords
    eta = min(cfg.ledger.weak_eta * kappa ** 2 * cfg.eta1, 1.0 - 1e-9)
    c1_floor = cfg.ledger.weak_c1 * cfg.eta1 * R
    rng = np.random.default_rng(seed)
    cand = []
    for _ in range(40 * pairs):
        tt = int(rng.integers(1, box.L))
        lev = box.level_ids(tt)
        a, b = int(lev[rng.integers(len(lev))]), int(lev[rng.integers(len(lev))])
        if i1[a] != i1[b] and i2[a] != i2[b]:
            cand.append((a, b))
    d = box.distance_ids(np.array([c[0] for c in cand]), np.array([c[1] for c in cand]))
    bins = np.floor(np.log2(d)).astype(int)
    nb = max(1, len(np.unique(bins)))
    chosen = sorted(k for bv in np.unique(bins) for k in np.flatnonzero(bins == bv)[: max(1, pairs // nb)])

    def tvert(k):
        return tgt.vertex(int(th[k]), int(tgt.coords[1][k]), int(tgt.coords[2][k]))

    quads = {"up": 0, "down": 0, "mixed": 0, "hypothesis_fail": 0}
    fails: dict = {}
    c_real = 0.0
    c1_used = c1_floor
    worst_pair = None
    for k in chosen:
        a, b = cand[k]
        p3 = int(box.id_of(int(t[a]), int(i1[a]), int(i2[b])))
        for kind, (u, v) in (("down", (a, p3)), ("up", (p3, b))):
            built = _quad_segments(box, u, v, kind)
            if built is None:
                continue
            (pa, pb), (qa, qb), segs = built
            fitted = {}
            spread = 0.0
            C = D = 0
            try:
                for (pi, qj), seg in segs.items():
                    ims = img[seg]
                    if len(np.unique(ims)) < 2:
                        raise HypothesisFail("length", "image segment is a point")
                    res = is_weakly_monotone(SampledPath.from_ids(tgt, ims), eta, c1_floor)
                    spread = max(spread, res.spread)
                    lam = fit_vertical_segment(tgt, ims).ids
                    if th[img[seg[-1]]] < th[img[seg[0]]]:
                        lam = lam[::-1]
                    fitted[pi, qj] = [tvert(x) for x in lam]
                    pid = pa if pi == 1 else pb
                    qid = qa if qj == 1 else qb
                    C = max(C, int(tgt.distance_ids(lam[0], img[pid])))
                    D = max(D, int(tgt.distance_ids(lam[-1], img[qid])))
                res = quadrilateral_classify((tvert(img[pa]), tvert(img[pb])), (tvert(img[qa]), tvert(img[qb])),
                                             fitted, C, D, cfg.epsilon)
            except HypothesisFail as exc:
                quads["hypothesis_fail"] += 1
                fails[exc.name] = fails.get(exc.name, 0) + 1
                continue
            quads[res.case] += 1
            c1 = max(c1_floor, spread)
            c1_used = max(c1_used, c1)
            dh = abs(int(hphi[pa]) - int(hphi[pb]))
            if dh / c1 > c_real:
                c_real = dh / c1
                worst_pair = (str(box.vertex(int(t[pa]), int(i1[pa]), int(i2[pa]))),
                              str(box.vertex(int(t[pb]), int(i1[pb]), int(i2[pb]))), dh)
    checked = quads["up"] + quads["down"] + quads["mixed"]
    ok = checked > 0 and quads["mixed"] == 0 and c_real <= cfg.ledger.pairwise_c
    return {"pairs": len(chosen), "quadrilaterals": quads, "hypothesis_failures": fails, "c": c_real,
            "c_max": cfg.ledger.pairwise_c, "C1": c1_used, "worst": worst_pair, "ok": ok}


def weak_stage(box: Box, phi, cfg: PipelineConfig, W: np.ndarray, R: int, kappa: float = 1.0,
               geodesics: int = 200, seed: int | None = None) -> dict:
    """A-uniform points on sampled box geodesics and weak monotonicity of their image rays."""
    seed = cfg.seed if seed is None else seed
    tgt, img = phi.image(box)
    h = tgt.coords[0][img]
    rng = np.random.default_rng(seed)
    total = box.geodesic_count
    picks = np.sort(rng.choice(total, min(geodesics, total), replace=False))
    j1 = picks // box.n ** box.L
    j2 = picks % box.n ** box.L
    G = box.geodesic_ids(j1, j2)
    checked = passed = excluded = 0
    theta_max = 0.0
    spread = 0.0
    for row in G:
        bad = ~W[row]
        up = a_uniform_points(bad, cfg.A_uniform)
        theta_max = max(theta_max, up.theta)
        for x in np.flatnonzero(up.uniform):
            res = weak_monotonicity_from_uniformity(h[row], bad, int(x), cfg, R, kappa)
            if not res.precondition:
                excluded += 1
                continue
            checked += 1
            passed += bool(res.holds)
            spread = max(spread, res.spread)
    frac = passed / checked if checked else 0.0
    return {"geodesics": int(len(G)), "checked": checked, "passed": passed, "excluded": excluded,
            "fraction": frac, "theta_max": theta_max, "spread": spread,
            "ok": checked > 0 and frac >= 1 - cfg.theta}


def global_height_verdict(box: Box, phi, cfg: PipelineConfig, ladder, qi: QiConstants | None = None,
                          pairs: int = 60, seed: int | None = None, s1: StepOneResult | None = None,
                          s2: OrientationCertificate | None = None, drift: DriftReport | None = None) -> Verdict:
    """Run every stage on the box and aggregate.

    "yes" needs Step I coverage, orientation consistency (and no refutation
    when m > n), the drift bounds, weak monotonicity on the sampled family,
    the final pairwise bound and a coarsely bilipschitz global q.
    Stage results already computed by the caller can be passed in.
    """
    from .coarse_diff import step_one
    from .maps import estimate_qi_constants

    seed = cfg.seed if seed is None else seed
    est = estimate_qi_constants(phi, box, pairs=2000, d_max=box.L, seed=seed, budget=cfg.ledger.qi_budget)
    qi = qi or phi.claimed
    kappa = qi.kappa if qi is not None else 1.0
    stages: dict = {}
    diag: list = []
    if s1 is None:
        s1 = step_one(box, phi, cfg, ladder, kappa)
    stages["step1"] = {"ok": s1.ok, "failures": list(s1.failures), "c_fit": s1.c_fit,
                       "R": s1.report.R if s1.report else None,
                       "good_mu_fraction": s1.report.good_mu_fraction if s1.report else 0.0,
                       "family_average": [float(v) for v in s1.stats.family_average]}
    for s, v in enumerate(s1.stats.family_average):
        if v > cfg.delta:
            diag.append(f"scale_scan: delta_s = {float(v):.4f} at r={s1.stats.ladder[s]} above delta")
    if not s1.ok:
        diag.extend(f"step1: {f}" for f in s1.failures)
    R = s1.report.R if s1.report else box.L
    W = good_set(box, s1)
    if s1.report is not None:
        if s2 is None:
            s2 = step_two(box, phi, cfg, s1, ladder, qi)
        stages["step2"] = s2.to_dict()
        if not s2.consistent:
            kinds = sorted(set(s2.orientations.values()))
            diag.append(f"step2: good tiles disagree on orientation ({', '.join(kinds)})")
        for r in s2.refutations:
            if r.fired:
                diag.append(f"step2: no-flips refutation at {r.violation['stage']}")
        s2_ok = s2.ok
        orient = sorted(set(s2.orientations.values()))
    else:
        stages["step2"] = {"ok": False, "reason": "no good tiles"}
        s2_ok = False
        orient = []
    try:
        dr = drift if drift is not None else multiscale_drift(box, phi, cfg, seed=seed)
        stages["drift"] = dr.to_dict()
        drift_ok = dr.ok
        diag.extend(f"drift: {f}" for f in dr.failures[:5])
        M = stages["drift"]["M"]
    except StageDataMissing as exc:
        stages["drift"] = {"ok": False, "reason": str(exc)}
        drift_ok = False
        diag.append(f"drift: {exc}")
        M = math.nan
    stages["weak"] = weak_stage(box, phi, cfg, W, R, kappa, seed=seed)
    if not stages["weak"]["ok"]:
        diag.append(f"weak: fraction {stages['weak']['fraction']:.3f} below 1 - theta")
    stages["pairwise"] = pairwise_heights(box, phi, cfg, R, pairs=pairs, seed=seed, kappa=kappa)
    if not stages["pairwise"]["ok"]:
        diag.append(f"pairwise: c = {stages['pairwise']['c']:.3f}, quadrilaterals "
                    f"{stages['pairwise']['quadrilaterals']}")
    q = global_q(box, phi, W)
    qb = q_bilipschitz(q, max(est.kappa, kappa), cfg, box.L)
    stages["q_bilipschitz"] = qb
    if not qb["ok"]:
        diag.append(f"q not coarsely bilipschitz: {qb['violation']}")
    yes = s1.ok and s2_ok and drift_ok and stages["weak"]["ok"] and stages["pairwise"]["ok"] and qb["ok"]
    rising = q[-1] > q[0]
    fit = {"q": q, "orientation": ("up" if rising else "down"), "tile_orientations": orient,
           "good_tiles": len(s1.report.good) if s1.report else 0}
    constants = {"kappa_hat": est.kappa, "C_hat": est.c_add, "M": M, "theta": cfg.theta,
                 "C1": stages["pairwise"]["C1"], "c_pairwise": stages["pairwise"]["c"]}
    return Verdict(bool(yes), fit, constants, stages, diag)
