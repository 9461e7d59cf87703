import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dlsol.coarse_diff import HypothesisFail, extract_product_map, quadrilateral_classify
from dlsol.coarse_diff import step_one
from dlsol.core import ModelParams, PreconditionViolation, SpaceKind, desk_config
from dlsol.dl_geometry import Box, DLVertex, box_at, dl_distance, dl_origin, y_horocycle
from dlsol.maps import library_map, standard_corpus
from dlsol.oracles import minimal_blocking_size
from dlsol.rigidity_checks import (Inconclusive, StageDataMissing, _quad_segments, a_uniform_points,
                                   drift_ladder, global_height_verdict, multiscale_drift, noflips_certificate,
                                   noflips_min_R, q_bilipschitz, step_two, trapping_bound, unblocked_rays,
                                   weak_monotonicity_from_uniformity)

DL32 = ModelParams(SpaceKind.DL, 3, 2)
DL22 = ModelParams(SpaceKind.DL, 2, 2)
LADDER = (2, 4, 8)


@pytest.fixture(scope="module")
def cfg():
    return desk_config()


@pytest.fixture(scope="module")
def box8():
    return box_at(dl_origin(3, 2), 8)


def _vid(box, v):
    return int(box.id_of(*box.locate(v)))


# rays and trapping ----------------------------------------------------------------

def _rays_brute(box, blocked, v, t_stop):
    if blocked[_vid(box, v)]:
        return 0
    if v.height - box.h_bottom == t_stop:
        return 1
    return sum(_rays_brute(box, blocked, w, t_stop) for w in v.down())


def test_unblocked_rays_match_recursion():
    b = box_at(dl_origin(3, 2), 4)
    rng = np.random.default_rng(3)
    blocked = rng.random(b.size) < 0.15
    counts = unblocked_rays(b, blocked, 1)
    verts = list(b.vertices())
    t, i1, i2 = b.coords
    for k in rng.choice(b.size, 60, replace=False):
        if t[k] < 1:
            continue
        assert counts[int(t[k])][i1[k], i2[k]] == _rays_brute(b, blocked, verts[k], 1)


def _cone_box(m, n, k):
    # ambient box whose level k is the bottom plane of a size-2 box; returns (ambient, U ids, U vertices)
    small = box_at(dl_origin(m, n), 2)
    amb = Box(small.top, small.bottom.ancestor(small.bottom.height + k), 2 + k)
    U = [small.vertex(0, a, 0) for a in range(m ** 2)]
    return amb, np.array([_vid(amb, u) for u in U]), U


def test_trapping_dl32_cone_level():
    amb, U, Uv = _cone_box(3, 2, 2)
    gamma = amb.level_ids(0)
    res = trapping_bound(amb, U, gamma, k=2)
    assert res.hypothesis_ok and res.holds
    assert res.length == 81 == minimal_blocking_size(Uv, 2)
    assert res.bound == pytest.approx(20.25)
    with pytest.raises(HypothesisFail):
        trapping_bound(amb, U, gamma[1:], k=2)


def test_trapping_equal_bases_degenerates():
    amb, U, Uv = _cone_box(2, 2, 1)
    res = trapping_bound(amb, U, amb.level_ids(0), k=1)
    assert res.bound == 4 and res.length == 8 == minimal_blocking_size(Uv, 1)


def test_trapping_preconditions():
    amb, U, _ = _cone_box(3, 2, 2)
    with pytest.raises(PreconditionViolation):
        trapping_bound(amb, U, amb.level_ids(1), k=2)
    with pytest.raises(PreconditionViolation):
        trapping_bound(amb, np.r_[U, amb.level_ids(1)[:1]], amb.level_ids(0), k=2)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10 ** 6), k=st.integers(1, 2))
def test_trapping_never_violated(seed, k):
    amb = box_at(dl_origin(3, 2), 4)
    rng = np.random.default_rng(seed)
    tU = 4
    lev = amb.level_ids(tU)
    U = lev[rng.random(len(lev)) < 0.5]
    if len(U) == 0:
        U = lev[:1]
    below = np.concatenate([amb.level_ids(t) for t in range(0, tU - k + 1)])
    gamma = below[rng.random(len(below)) < rng.uniform(0.2, 0.9)]
    try:
        res = trapping_bound(amb, U, gamma, k)
    except HypothesisFail:
        return
    assert res.holds
    verts = list(amb.vertices())
    assert res.length >= minimal_blocking_size([verts[u] for u in U], k)


# A-uniform points -------------------------------------------------------------------

def _uniform_oracle(bad, A):
    N = len(bad)
    nu = sum(bad) / N
    out = []
    for x in range(N):
        ok = True
        for T in range(1, N):
            win = bad[max(0, x - T):min(N, x + T + 1)]
            if sum(win) >= A * nu * len(win):
                ok = False
        out.append(ok)
    return np.array(out)


def test_uniform_points_clean():
    r = a_uniform_points(np.zeros(20, dtype=bool), 4)
    assert r.uniform.all() and r.theta == 0


def test_uniform_points_block():
    bad = np.zeros(100, dtype=bool)
    bad[45:55] = True
    r = a_uniform_points(bad, 4)
    # exhaustive over every radius: 16 of 100 points are not uniform
    assert r.theta == pytest.approx(0.16) and r.theta <= 0.5
    assert (r.uniform == _uniform_oracle(list(bad), 4)).all()


@settings(max_examples=200, deadline=None)
@given(bits=st.lists(st.booleans(), min_size=2, max_size=40), A=st.sampled_from([2.0, 3.0, 4.0, 8.0]))
def test_uniform_points_covering_bound(bits, A):
    bad = np.array(bits)
    r = a_uniform_points(bad, A)
    assert r.theta <= 2 / A
    if bad.any():
        assert (r.uniform == _uniform_oracle(bits, A)).all()


# weak monotonicity -------------------------------------------------------------------

def test_weak_identity_and_standard(cfg, box8):
    row = box8.geodesic_ids(np.array([5]), np.array([17]))[0]
    for phi in (library_map("identity", DL32), standard_corpus(DL32, seed=1)[4]):
        tgt, img = phi.image(box8)
        h = tgt.coords[0][img[row]]
        res = weak_monotonicity_from_uniformity(h, np.zeros(len(row), dtype=bool), 3, cfg, R=8)
        assert res.precondition and res.holds
        assert (res.eta, res.c1) == (0.5, pytest.approx(8 / 24))
        assert res.spread <= 0


def test_weak_hairpin_nonuniform_point_excluded(cfg, box8):
    phi = library_map("hairpin", DL32, z0=0)
    row = box8.geodesic_ids(np.array([0]), np.array([0]))[0]
    tgt, img = phi.image(box8)
    bad = np.zeros(len(row), dtype=bool)
    bad[3:6] = True
    res = weak_monotonicity_from_uniformity(tgt.coords[0][img[row]], bad, 4, cfg, R=8)
    assert not res.precondition and res.holds is None


# no flips ----------------------------------------------------------------------------

def test_noflips_min_R(cfg):
    assert 6 < noflips_min_R(3, 2, cfg) < 7
    assert noflips_min_R(2, 2, cfg) == float("inf")


@pytest.fixture(scope="module")
def flip_cert(cfg, box8):
    phi = library_map("flip", DL32)
    tgt, img = phi.image(box8)
    fit = extract_product_map(box8, tgt, img, np.arange(box8.size), "down", cfg)
    return phi, noflips_certificate(box8, phi, fit, cfg)


def test_noflips_refutes_flip(flip_cert, box8):
    phi, cert = flip_cert
    assert cert.fired
    st_ = cert.stages
    assert (st_["shadow"]["t_H"], st_["plane"]["t_P"]) == (5, 1)
    assert st_["areas"]["W"] == [16, 16] and st_["areas"]["phi_H"] == 32 and not st_["areas"]["ok"]
    assert st_["witness"]["length"] == 8
    assert len(cert.violations) == 3 and cert.violation["stage"] == "areas"
    # every reported pair violates the claimed inequalities, recomputed from the literals
    k, c = phi.claimed.kappa, phi.claimed.c_add
    for v in cert.violations:
        u, w = DLVertex.parse(v["u"]), DLVertex.parse(v["v"])
        ds, dt = dl_distance(u, w), dl_distance(phi(u), phi(w))
        assert ds > k * (dt + c) or dt > k * ds + c


def test_noflips_witness_avoids_image_of_H(flip_cert, box8):
    phi, cert = flip_cert
    path = [DLVertex.parse(s) for s in cert.witness]
    assert all(dl_distance(a, b) == 1 for a, b in zip(path, path[1:]))
    st_ = cert.stages["shadow"]
    verts = list(box8.vertices())
    phiH = {phi(verts[h]) for h in y_horocycle(box8, st_["t_H"], st_["i1"])}
    assert not phiH & set(path)
    assert path[0].t1 == path[-1].t1 and path[0].height == path[-1].height


def test_noflips_quiet_on_preserving_maps(cfg, box8):
    maps = standard_corpus(DL32, seed=2) + [library_map("scrambled", DL32, amplitude=1, fraction=0.05, seed=9)]
    for phi in maps:
        tgt, img = phi.image(box8)
        fit = extract_product_map(box8, tgt, img, np.arange(box8.size), "up", cfg)
        assert noflips_certificate(box8, phi, fit, cfg).reason == "fit not reversing"
        forced = noflips_certificate(box8, phi, fit, cfg, require_reversing=False)
        assert isinstance(forced, Inconclusive)


def test_noflips_preconditions(cfg):
    b = box_at(dl_origin(2, 2), 8)
    phi = library_map("flip", DL22)
    tgt, img = phi.image(b)
    fit = extract_product_map(b, tgt, img, np.arange(b.size), "down", cfg)
    with pytest.raises(PreconditionViolation):
        noflips_certificate(b, phi, fit, cfg)
    small = box_at(dl_origin(3, 2), 4)
    phi = library_map("flip", DL32)
    tgt, img = phi.image(small)
    fit = extract_product_map(small, tgt, img, np.arange(small.size), "down", cfg)
    res = noflips_certificate(small, phi, fit, cfg)
    assert isinstance(res, Inconclusive) and res.stage == "size"


def test_step_two(cfg, box8):
    for name, expect_fire in (("identity", False), ("flip", True)):
        phi = library_map(name, DL32)
        s1 = step_one(box8, phi, cfg, LADDER)
        cert = step_two(box8, phi, cfg, s1, LADDER)
        assert cert.consistent and not cert.skipped
        assert any(r.fired for r in cert.refutations) == expect_fire
        assert cert.ok != expect_fire
    b = box_at(dl_origin(2, 2), 8)
    phi = library_map("flip", DL22)
    cert = step_two(b, phi, cfg, step_one(b, phi, cfg, LADDER), LADDER)
    assert cert.skipped and cert.ok and set(cert.orientations.values()) == {"down"}


# drift -------------------------------------------------------------------------------

def test_drift_ladder(cfg):
    assert drift_ladder(8, cfg) == [2, 3, 4]
    assert drift_ladder(4, cfg) == [2]
    assert drift_ladder(2, cfg) == []
    with pytest.raises(StageDataMissing):
        multiscale_drift(box_at(dl_origin(3, 2), 2), library_map("identity", DL32), cfg)


@pytest.mark.parametrize("kind,params", [("identity", {}), ("height_translation", {"shift": 3})])
def test_drift_isometries(cfg, box8, kind, params):
    dr = multiscale_drift(box8, library_map(kind, DL32, **params), cfg)
    assert dr.ok and dr.ladder == [2, 3, 4]
    assert all(p["drift"] == 0 and p["raw"] == 0 for p in dr.pairs)
    assert len(dr.pairs) > 50


def test_drift_scrambled_dl22(cfg):
    b = box_at(dl_origin(2, 2), 8)
    phi = library_map("scrambled", DL22, amplitude=1, fraction=0.05, seed=1)
    dr = multiscale_drift(b, phi, cfg)
    assert dr.ok
    for p in dr.pairs:
        assert p["drift"] <= p["bound"]
        assert p["total"] <= p["chain_cap"]
    rows = list(dr.csv_rows())
    assert rows[0] == ["pair_id", "d(x,y)", "drift", "bound"] and len(rows) == len(dr.pairs) + 1


# verdict -----------------------------------------------------------------------------

def test_quad_segments_genuine(box8):
    t, i1, i2 = box8.coords
    a = int(box8.id_of(4, 0, 0))
    for b, kind in ((int(box8.id_of(4, 0, 5)), "down"), (int(box8.id_of(4, 7, 0)), "up")):
        (pa, pb), (qa, qb), segs = _quad_segments(box8, a, b, kind)
        verts = {k: [box8.vertex(int(t[x]), int(i1[x]), int(i2[x])) for x in s] for k, s in segs.items()}
        p = tuple(box8.vertex(int(t[x]), int(i1[x]), int(i2[x])) for x in (pa, pb))
        q = tuple(box8.vertex(int(t[x]), int(i1[x]), int(i2[x])) for x in (qa, qb))
        res = quadrilateral_classify(p, q, verts, 0, 0, 1 / 3)
        assert res.case == kind


def test_q_bilipschitz(cfg):
    assert q_bilipschitz(list(range(9)), 1.0, cfg, 8)["ok"]
    assert q_bilipschitz(list(range(8, -1, -1)), 1.0, cfg, 8)["ok"]
    folded = [-abs(z - 4) for z in range(9)]
    res = q_bilipschitz(folded, 1.0, cfg, 8)
    v = res["violation"]
    assert not res["ok"] and v["dq"] <= (v["z2"] - v["z1"]) / 2 - res["slack"]


def test_verdict_identity(cfg, box8):
    v = global_height_verdict(box8, library_map("identity", DL32), cfg, LADDER)
    assert v.height_respecting and not v.diagnostics
    assert v.fit["q"] == list(range(-4, 5))
    assert v.constants["kappa_hat"] == 1.0 and v.constants["c_pairwise"] == 0.0


def test_verdict_hairpin(cfg, box8):
    v = global_height_verdict(box8, library_map("hairpin", DL32, z0=0), cfg, LADDER)
    assert not v.height_respecting
    assert any(d.startswith("scale_scan") for d in v.diagnostics)
    assert not v.stages["step2"]["consistent"] and not v.stages["q_bilipschitz"]["ok"]


def test_verdict_flips(cfg, box8):
    v = global_height_verdict(box_at(dl_origin(2, 2), 8), library_map("flip", DL22), cfg, LADDER)
    assert v.height_respecting and v.fit["orientation"] == "down" and v.stages["step2"]["skipped"]
    v = global_height_verdict(box8, library_map("flip", DL32), cfg, LADDER)
    assert not v.height_respecting
    assert any("no-flips refutation" in d for d in v.diagnostics)


def test_verdict_scrambled_records_c(cfg):
    b = box_at(dl_origin(2, 2), 8)
    v = global_height_verdict(b, library_map("scrambled", DL22, amplitude=1, fraction=0.03, seed=1), cfg, LADDER)
    assert v.height_respecting
    pw = v.stages["pairwise"]
    assert pw["quadrilaterals"]["mixed"] == 0 and pw["c"] <= pw["c_max"]


@pytest.mark.parametrize("idx", range(5))
def test_verdict_monotone_in_box_size(cfg, idx):
    phi = standard_corpus(DL22, seed=3)[idx]
    small = global_height_verdict(box_at(dl_origin(2, 2), 4), phi, cfg, (2, 4))
    big = global_height_verdict(box_at(dl_origin(2, 2), 8), phi, cfg, LADDER)
    assert not small.height_respecting or big.height_respecting
