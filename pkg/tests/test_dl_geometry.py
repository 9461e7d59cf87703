import itertools
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dlsol.dl_geometry import (Box, DLVertex, InsufficientDepth, IndivisibleSize, MixedSpaces,
                               ball, ball_growth_ratio, box_at, boundary_collar_fraction,
                               dl_distance, dl_origin, embed_ids, geodesic, greedy_5a_cover_ids,
                               shadow, tile_box, vertical_geodesic, y_horocycle)
from dlsol.oracles import band_components, bfs_rows, box_graph, distance_oracle
from dlsol.trees import LadicAddress


def test_vertex_literal_roundtrip():
    v = DLVertex(LadicAddress(3, 1, (2, 0, 1)), LadicAddress(2, 8, (1, 1, 0, 1, 1, 1)))
    assert v.height == -2
    assert str(v) == "(x=3:1:201, y=2:8:110111, z=-2)"
    assert DLVertex.parse(str(v)) == v
    with pytest.raises(ValueError):
        DLVertex.parse("(x=3:1:201, y=2:8:110111, z=-1)")
    with pytest.raises(ValueError):
        DLVertex(LadicAddress(3, 0), LadicAddress(2, 1))


def test_neighbour_counts_and_mixed():
    o = dl_origin(3, 2)
    assert len(o.up()) == 2 and len(o.down()) == 3
    assert all(dl_distance(o, w) == 1 for w in o.neighbors())
    with pytest.raises(MixedSpaces):
        dl_distance(o, dl_origin(2, 2))


def test_distance_examples_size2_box():
    b = box_at(dl_origin(3, 2), 2)
    # bottom corners that are T1-siblings with equal t2
    u, v = b.vertex(0, 0, 0), b.vertex(0, 1, 0)
    assert u.t2 == v.t2 and u.t1.parent() == v.t1.parent()
    assert dl_distance(u, v) == 2
    # top corners that are T2-siblings with equal t1
    u, v = b.vertex(2, 0, 0), b.vertex(2, 0, 1)
    assert u.t1 == v.t1 and u.t2.parent() == v.t2.parent()
    assert dl_distance(u, v) == 2
    for i1 in range(9):
        for i2 in range(4):
            assert dl_distance(b.vertex(0, i1, 0), b.vertex(2, 0, i2)) == 2


def test_level_sizes_and_measure():
    b = box_at(dl_origin(3, 2), 2)
    assert [b.level_size(t) for t in range(3)] == [9, 6, 4]
    assert b.geodesic_count == 36
    b2 = box_at(dl_origin(2, 2), 2)
    assert [b2.level_size(t) for t in range(3)] == [4, 4, 4]
    for box in (b, b2, box_at(dl_origin(3, 2), 6)):
        masses = {box.mu(box.level_ids(t)) for t in range(box.L + 1)}
        assert masses == {box.geodesic_count}
        assert box.mu() == box.geodesic_count * (box.L + 1)


def test_vertical_geodesic():
    z = vertical_geodesic(LadicAddress(3, 0), LadicAddress(2, -3), 0, 3)
    pts = z.points()
    assert len(pts) == 4
    assert pts[0] == dl_origin(3, 2)
    for a, b in zip(pts, pts[1:]):
        assert b in a.up()
    assert all(dl_distance(pts[0], p) == k for k, p in enumerate(pts))
    with pytest.raises(InsufficientDepth):
        vertical_geodesic(LadicAddress(3, 1), LadicAddress(2, -3), 0, 3)


def test_box_geodesic_family_size4():
    b = box_at(dl_origin(3, 2), 4)
    j1, j2 = b.all_geodesics()
    g = b.geodesic_ids(j1, j2)
    assert len({tuple(r) for r in g}) == 1296 == 3 ** 4 * 2 ** 4
    # each geodesic is a vertical path
    t = b.coords[0]
    assert (t[g] == np.arange(5)).all()
    d = b.distance_ids(g[:, :-1], g[:, 1:])
    assert (d == 1).all()
    # spot check against the address-level construction
    for k in (0, 77, 1295):
        pts = b.geodesic(int(j1[k]), int(j2[k])).points()
        assert [b.locate(p) for p in pts] == [tuple(int(c[i]) for c in b.coords) for i in g[k]]


def test_edges_match_tree_neighbours():
    for m, n, L in ((3, 2, 2), (2, 2, 4), (3, 2, 4)):
        b = box_at(dl_origin(m, n), L)
        u, v = b.edges()
        got = set(zip(u.tolist(), v.tolist()))
        ref = set()
        verts = list(b.vertices())
        for i, x in enumerate(verts):
            assert b.locate(x) is not None
            for y in x.up():
                loc = b.locate(y)
                if loc is not None:
                    ref.add((i, int(b.id_of(*loc))))
        assert got == ref


def test_locate_roundtrip():
    b = box_at(DLVertex.parse("(x=3:2:12, y=2:0:, z=0)"), 4)
    for k, v in enumerate(b.vertices()):
        assert int(b.id_of(*b.locate(v))) == k
    far = dl_origin(3, 2)
    assert b.locate(far) is None or b.locate(far) is not None


def test_distance_oracle_small():
    res = distance_oracle(box_at(dl_origin(3, 2), 2), 2)
    assert res["mismatches"] == 0 and res["pairs"] > 0


def test_triangle_inequality_exhaustive():
    b = box_at(dl_origin(3, 2), 2)
    ids = np.arange(b.size)
    D = b.distance_ids(ids[:, None], ids[None, :])
    assert (D == D.T).all()
    assert ((D == 0) == np.eye(b.size, dtype=bool)).all()
    tri = D[:, :, None] + D[None, :, :] >= D[:, None, :]
    assert tri.all()
    t = b.coords[0]
    assert (np.abs(t[:, None] - t[None, :]) <= D).all()


def test_geodesics_diverge_downward():
    b = box_at(dl_origin(3, 2), 4)
    j1, j2 = b.all_geodesics()
    G = b.geodesic_ids(j1, j2)
    rng = np.random.default_rng(0)
    for _ in range(400):
        a, c = rng.integers(0, len(G), 2)
        shared = np.nonzero(G[a] == G[c])[0]
        if len(shared) == 0:
            continue
        t_split = shared.min()
        for t in range(t_split):
            assert b.distance_ids(G[a, t], G[c, t]) >= 2 * (t_split - t)


def test_tiling_examples():
    b = box_at(dl_origin(3, 2), 4)
    one = tile_box(b, 4)
    assert len(one.tiles) == 1
    assert set(one.tile_ids(0).tolist()) == set(range(b.size))
    til = tile_box(b, 2)
    for band in range(2):
        count = sum(1 for t in til.tiles if t.band == band)
        assert count == band_components(b, 2 * band, 2 * band + 2)
    owner = til.owner()
    assert (owner >= 0).all()
    assert sum(b.mu(til.owned_ids(k)) for k in range(len(til.tiles))) == b.mu()
    with pytest.raises(IndivisibleSize):
        tile_box(b, 3)


def test_tiles_are_boxes_in_parent():
    b = box_at(dl_origin(3, 2), 4)
    til = tile_box(b, 2)
    for k, tile in enumerate(til.tiles):
        assert sorted(embed_ids(tile.box, b).tolist()) == sorted(til.tile_ids(k).tolist())


def test_collar_fractions():
    b = box_at(dl_origin(2, 2), 10)
    f = boundary_collar_fraction(b, 0.2)
    assert f["mu_fraction"] == pytest.approx(f["volume_fraction"])
    assert f["mu_fraction"] <= 3 * 0.2
    b = box_at(dl_origin(3, 2), 10)
    f = boundary_collar_fraction(b, 0.2)
    # derived by direct summation of level sizes 3^(10-t) 2^t, t in {0,1,2,8,9,10}
    sizes = [3 ** (10 - t) * 2 ** t for t in range(11)]
    near = sum(sizes[t] for t in (0, 1, 2, 8, 9, 10))
    assert f["volume_fraction"] == pytest.approx(near / sum(sizes))
    assert f["mu_fraction"] == pytest.approx(6 / 11)


def test_ball_sizes():
    o = dl_origin(3, 2)
    assert len(ball(o, 0)[1]) == 1
    b, ids = ball(o, 1)
    assert len(ids) == 1 + 3 + 2
    # BFS oracle for radius 2
    b, ids = ball(o, 2)
    c = int(b.id_of(*b.locate(o)))
    for s, rows in bfs_rows(b, np.array([c]), np.arange(b.size)):
        assert set(np.nonzero(rows[0] <= 2)[0].tolist()) == set(ids.tolist())
    rng = random.Random(3)
    sizes = set()
    for _ in range(10):
        word = tuple(rng.randrange(3) for _ in range(4))
        h = rng.randrange(-3, 3)
        p = DLVertex(LadicAddress(3, h + 4, word), LadicAddress(2, -h))
        sizes.add(len(ball(p, 4)[1]))
    assert len(sizes) == 1
    g = ball_growth_ratio(3, 2, 1, 3)
    assert g["omega"] > 1 and g["log_rate"] > 0


def test_greedy_cover():
    b = box_at(dl_origin(3, 2), 6)
    rng = np.random.default_rng(1)
    pts = rng.choice(b.size, 200, replace=False)
    a = 2
    G = greedy_5a_cover_ids(b, pts, a)
    D = b.distance_ids(G[:, None], G[None, :])
    assert (D[~np.eye(len(G), dtype=bool)] > 2 * a).all()
    # every a-ball around an input point is covered by some 5a-ball around G
    dist = b.distance_ids(np.arange(b.size)[:, None], pts[None, :])
    union = np.nonzero((dist <= a).any(axis=1))[0]
    cover = (b.distance_ids(union[:, None], G[None, :]) <= 5 * a).any(axis=1)
    assert cover.all()
    assert len(greedy_5a_cover_ids(b, pts[:1], a)) == 1


def brute_shadow(b, H, direction="down"):
    verts = list(b.vertices())
    Hs = [verts[i] for i in H]
    out = set()
    for i, v in enumerate(verts):
        for w in Hs:
            if direction == "down":
                ok = v.height <= w.height and w.t1.is_ancestor_of(v.t1) and v.t2.is_ancestor_of(w.t2)
            else:
                ok = v.height >= w.height and v.t1.is_ancestor_of(w.t1) and w.t2.is_ancestor_of(v.t2)
            if ok:
                out.add(i)
                break
    return out


def test_shadow_examples():
    b = box_at(dl_origin(3, 2), 4)
    top = y_horocycle(b, 4, 0)
    assert len(shadow(top, 1, b).members) == b.size
    assert len(shadow(top, 0, b).members) == b.size
    H = y_horocycle(b, 3, 1)
    sh = shadow(H, 0, b)
    assert set(sh.members.tolist()) == brute_shadow(b, H)
    assert len(sh.members) == 65
    bot = y_horocycle(b, 0, 5)
    assert set(shadow(bot, 0, b).members.tolist()) == set(bot.tolist())
    up = shadow(bot, 0, b, "up")
    assert set(up.members.tolist()) == brute_shadow(b, bot, "up")


words3 = st.lists(st.integers(0, 2), max_size=6)
words2 = st.lists(st.integers(0, 1), max_size=6)


@st.composite
def dl_vertices(draw):
    w1 = tuple(draw(words3))
    a1 = draw(st.integers(-3, 3))
    t1 = LadicAddress(3, a1, w1)
    h = t1.height
    w2 = draw(words2)
    a2 = -h + len(w2)
    return DLVertex(t1, LadicAddress(2, a2, tuple(w2)))


@settings(max_examples=300, deadline=None)
@given(dl_vertices(), dl_vertices(), dl_vertices())
def test_random_vertices(u, v, w):
    g = geodesic(u, v)
    assert g[0] == u and g[-1] == v
    assert len(g) - 1 == dl_distance(u, v)
    for a, c in zip(g, g[1:]):
        assert c in a.neighbors()
    assert dl_distance(u, w) <= dl_distance(u, v) + dl_distance(v, w)
    assert abs(u.height - v.height) <= dl_distance(u, v)
