import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import nquad

from dlsol.dl_geometry import IndivisibleSize
from dlsol.oracles import sol_sandwich_check, xz_geodesic_length, yz_geodesic_length
from dlsol.sol_geometry import (SolBox, SolPoint, act, inverse, path_length, plane_distance_xz,
                                plane_distance_yz, sol_distance_bounds, sol_tile_box)


def test_plane_distance_examples():
    p = SolPoint(0.3, 0.0, -0.2)
    assert plane_distance_xz(p, p, 2.0) == 0.0
    assert plane_distance_xz(p, SolPoint(0.3, 0.0, 1.7), 2.0) == pytest.approx(1.9, rel=1e-12)
    d = plane_distance_xz(SolPoint(0, 0, 0), SolPoint(1, 0, 0), 1.0)
    assert d == pytest.approx(math.acosh(1.5), rel=1e-14)
    # numeric integration along the semicircle gives the same value
    assert xz_geodesic_length(SolPoint(0, 0, 0), SolPoint(1, 0, 0), 1.0) == pytest.approx(d, rel=1e-10)
    with pytest.raises(ValueError):
        plane_distance_xz(SolPoint(0, 0, 0), SolPoint(1, 1, 0), 1.0)


def test_plane_formulas_match_integration():
    rng = np.random.default_rng(11)
    for _ in range(100):
        m = rng.uniform(0.3, 3)
        a = SolPoint(rng.uniform(-4, 4), 0.0, rng.uniform(-2, 2))
        b = SolPoint(rng.uniform(-4, 4), 0.0, rng.uniform(-2, 2))
        assert plane_distance_xz(a, b, m) == pytest.approx(xz_geodesic_length(a, b, m), rel=1e-6)
        a2 = SolPoint(0.0, a.x, a.z)
        b2 = SolPoint(0.0, b.x, b.z)
        assert plane_distance_yz(a2, b2, m) == pytest.approx(yz_geodesic_length(a2, b2, m), rel=1e-6)


def test_overflow_guard():
    # |m z| far beyond the range of exp
    a = SolPoint(0.0, 0.0, -400.0)
    b = SolPoint(1.0, 0.0, -400.0)
    d = plane_distance_xz(a, b, 2.0)
    assert math.isfinite(d)
    # horizontal distance dx at height z: 2/m * log(m dx e^{-m z}) asymptotically
    assert d == pytest.approx(2 * (math.log(2.0) + 800) / 2.0, rel=1e-6)
    assert plane_distance_xz(SolPoint(0, 0, 0), SolPoint(0, 0, 1e4), 3.0) == pytest.approx(1e4)


def test_homothety():
    rng = np.random.default_rng(2)
    for _ in range(50):
        m = rng.uniform(0.5, 3)
        x1, z1, x2, z2 = rng.uniform(-2, 2, 4)
        scaled = plane_distance_xz(SolPoint(x1 / m, 0, z1 / m), SolPoint(x2 / m, 0, z2 / m), m)
        assert scaled == pytest.approx(plane_distance_xz(SolPoint(x1, 0, z1), SolPoint(x2, 0, z2), 1.0) / m,
                                       rel=1e-9)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.floats(-3, 3), st.floats(-2, 2)), min_size=3, max_size=3),
       st.floats(0.3, 3))
def test_plane_metric_axioms(pts, m):
    a, b, c = (SolPoint(x, 0.0, z) for x, z in pts)
    dab = plane_distance_xz(a, b, m)
    assert dab == pytest.approx(plane_distance_xz(b, a, m), abs=1e-12)
    assert plane_distance_xz(a, c, m) <= dab + plane_distance_xz(b, c, m) + 1e-9
    a2, b2, c2 = (SolPoint(0.0, p.x, p.z) for p in (a, b, c))
    assert plane_distance_yz(a2, c2, m) <= plane_distance_yz(a2, b2, m) + plane_distance_yz(b2, c2, m) + 1e-9


def test_bounds_examples():
    p = SolPoint(0.5, -1.0, 0.25)
    assert tuple(sol_distance_bounds(p, p, 2.0, 1.0)) == (0.0, 0.0)
    q = SolPoint(3.0, -1.0, -0.75)
    lo, up = sol_distance_bounds(p, q, 2.0, 1.0)
    d = plane_distance_xz(p, q, 2.0)
    assert lo == pytest.approx(d, rel=1e-12)
    assert up == pytest.approx(d, rel=1e-9)
    q = SolPoint(0.5, 2.0, 1.0)
    lo, up = sol_distance_bounds(p, q, 2.0, 1.0)
    assert lo == pytest.approx(plane_distance_yz(p, q, 1.0)) and up == pytest.approx(lo, rel=1e-9)


def test_bounds_against_explicit_paths():
    # any explicit path is an upper bound for the true distance, hence >= lower
    rng = np.random.default_rng(5)
    m, n = 2.0, 1.0
    for _ in range(40):
        a, b = rng.uniform(-1, 1, (2, 3))
        bd = sol_distance_bounds(SolPoint(*a), SolPoint(*b), m, n)
        straight = path_length(np.linspace(a, b, 200), m, n)
        assert bd.lower <= straight + 1e-9
        assert bd.lower <= bd.upper
        assert bd.ratio < 3


def test_bounds_left_invariant():
    rng = np.random.default_rng(8)
    m, n = 1.5, 1.0
    for _ in range(30):
        g, p, q = (SolPoint(*rng.uniform(-1, 1, 3)) for _ in range(3))
        b0 = sol_distance_bounds(p, q, m, n)
        b1 = sol_distance_bounds(act(g, p, m, n), act(g, q, m, n), m, n)
        assert b1.lower == pytest.approx(b0.lower, rel=1e-7, abs=1e-9)
        assert b1.upper == pytest.approx(b0.upper, rel=1e-6, abs=1e-8)
    e = act(g, inverse(g, m, n), m, n)
    assert abs(e.x) < 1e-12 and abs(e.y) < 1e-12 and abs(e.z) < 1e-12


@pytest.mark.parametrize("mn", [(1.0, 1.0), (2.0, 1.0)])
def test_dijkstra_sandwich(mn):
    res = sol_sandwich_check(*mn, pairs=60, seed=1)
    assert res["lower_violations"] == 0
    assert res["fraction"] >= 0.99
    assert res["discretization_error"] < 0.15


@pytest.mark.parametrize("mn,c", [((1.0, 1.0), (0.4, 0.2, -0.3)), ((2.0, 1.0), (0.0, 1.0, 0.6))])
def test_box_measures_match_integration(mn, c):
    m, n = mn
    b = SolBox(SolPoint(*c), 2.0, m, n)
    xs = [b.x_lo, b.x_lo + b.width_x]
    ys = [b.y_lo, b.y_lo + b.width_y]
    zs = [b.z_lo, b.z_hi]
    vol, _ = nquad(lambda z, y, x: math.exp((n - m) * z), [zs, ys, xs], opts={"epsrel": 1e-12})
    mu, _ = nquad(lambda z, y, x: 1.0, [zs, ys, xs], opts={"epsrel": 1e-12})
    assert b.volume() == pytest.approx(vol, rel=1e-9)
    assert b.mu() == pytest.approx(mu, rel=1e-9)


def test_box_is_left_translate():
    m, n = 2.0, 1.0
    c = SolPoint(0.3, -0.4, 0.7)
    b = SolBox(c, 1.0, m, n)
    o = SolBox(SolPoint(0, 0, 0), 1.0, m, n)
    rng = np.random.default_rng(0)
    for p in o.sample(rng, 50):
        assert b.contains(act(c, SolPoint(*p * 0.999), m, n))


def test_tiling_examples():
    b = SolBox(SolPoint(0, 0, 0), 4.0, 1.0, 1.0)
    one = sol_tile_box(b, 4.0)
    assert one.tile_count == 1 and one.exact and one.upsilon_mu == 0.0
    t = sol_tile_box(b, 1.0)
    assert t.upsilon_mu <= t.c_certified * (1 / 4) * b.mu()
    assert t.c_realized <= t.c_certified
    with pytest.raises(IndivisibleSize):
        sol_tile_box(b, 1.5)
    # e^m and e^n integers: every band count is an integer and the tiling is exact
    ex = sol_tile_box(SolBox(SolPoint(0, 0, 0), 4.0, math.log(3), math.log(2)), 2.0)
    assert ex.exact and ex.upsilon_mu == 0.0


def test_tiling_remainder_in_collar():
    b = SolBox(SolPoint(0.1, 0.0, 0.2), 4.0, 1.0, 1.0)
    t = sol_tile_box(b, 1.0)
    rng = np.random.default_rng(3)
    pts = b.sample(rng, 20000)
    seen = 0
    for p in pts:
        q = SolPoint(*p)
        loc = t.locate(q)
        if loc is None:
            seen += 1
            assert t.in_collar(q)
        else:
            assert t.tile(*loc).contains(q)
    frac = seen / len(pts)
    assert abs(frac - t.upsilon_mu / b.mu()) < 5 * math.sqrt(t.upsilon_mu / b.mu() / len(pts)) + 1e-3


def test_tiling_constant_stable():
    for mn in ((1.0, 1.0), (2.0, 1.0)):
        cs = [sol_tile_box(SolBox(SolPoint(0, 0, 0), L, *mn), 1.0).c_certified for L in (4.0, 8.0, 16.0)]
        assert max(cs) / min(cs) <= 1.1
