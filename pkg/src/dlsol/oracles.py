"""Independent reference computations used to certify the closed forms.

Everything here works on explicitly materialized finite graphs (BFS,
connected components, exhaustive search, Dijkstra) and never calls the
closed-form distance code it is meant to check.
"""
from __future__ import annotations

import itertools
import math

import numpy as np
from scipy.sparse import coo_matrix
from numba import njit
from scipy.sparse.csgraph import connected_components

from .dl_geometry import Box, embed_ids


def box_graph(box: Box):
    u, v = box.edges()
    data = np.ones(len(u), dtype=np.int8)
    g = coo_matrix((data, (u, v)), shape=(box.size, box.size)).tocsr()
    return g + g.T


@njit(cache=True)
def _bfs_many(indptr, indices, sources, targets):
    nv = len(indptr) - 1
    out = np.empty((len(sources), len(targets)), dtype=np.int64)
    dist = np.empty(nv, dtype=np.int64)
    queue = np.empty(nv, dtype=np.int64)
    for r in range(len(sources)):
        dist[:] = -1
        dist[sources[r]] = 0
        queue[0] = sources[r]
        head, tail = 0, 1
        while head < tail:
            a = queue[head]
            head += 1
            for e in range(indptr[a], indptr[a + 1]):
                b = indices[e]
                if dist[b] < 0:
                    dist[b] = dist[a] + 1
                    queue[tail] = b
                    tail += 1
        for c in range(len(targets)):
            out[r, c] = dist[targets[c]]
    return out


def bfs_rows(box: Box, sources: np.ndarray, targets: np.ndarray, chunk: int = 256):
    """Yield (sources_chunk, BFS distance rows restricted to targets) inside ``box``."""
    g = box_graph(box).tocsr()
    indptr = g.indptr.astype(np.int64)
    indices = g.indices.astype(np.int64)
    sources = np.asarray(sources, dtype=np.int64)
    targets = np.asarray(targets, dtype=np.int64)
    for k in range(0, len(sources), chunk):
        s = sources[k:k + chunk]
        yield s, _bfs_many(indptr, indices, s, targets)


def collar(box: Box, k: int) -> tuple[Box, np.ndarray, np.ndarray]:
    """(enlarged box, ids of box inside it, ids of box plus its k-collar)."""
    big = box.enlarge(k)
    emb = embed_ids(box, big)
    g = box_graph(big)
    reach = np.zeros(big.size, dtype=bool)
    reach[emb] = True
    for _ in range(k):
        reach[g[np.nonzero(reach)[0]].indices] = True
    return big, emb, np.nonzero(reach)[0]


def distance_oracle(box: Box, k: int = 2, chunk: int = 256) -> dict:
    """Compare the closed-form distance against BFS on every pair of box-or-collar vertices.

    The collar lies in the enlarged box of size L + 2k, and boxes are
    geodesically convex (a geodesic never passes above the T1 confluent or
    below the T2 confluent), so BFS inside that box is exact for these pairs.
    """
    big, emb, near = collar(box, k)
    src, tgt = near, near
    pairs = 0
    mismatches = 0
    worst = None
    for s, ref in bfs_rows(big, src, tgt, chunk):
        got = big.distance_ids(s[:, None], tgt[None, :])
        bad = ref != got
        pairs += ref.size
        if bad.any():
            mismatches += int(bad.sum())
            i, j = np.argwhere(bad)[0]
            worst = (int(s[i]), int(tgt[j]), float(ref[i, j]), int(got[i, j]))
    return {"pairs": pairs, "mismatches": mismatches, "box_vertices": box.size,
            "collar_vertices": int(len(near) - box.size), "example": worst}


def band_components(box: Box, lo: int, hi: int) -> int:
    """Number of connected components of the box restricted to levels [lo, hi]."""
    t = box.coords[0]
    keep = np.nonzero((t >= lo) & (t <= hi))[0]
    u, v = box.edges()
    sel = np.isin(u, keep) & np.isin(v, keep)
    remap = -np.ones(box.size, dtype=np.int64)
    remap[keep] = np.arange(len(keep))
    g = coo_matrix((np.ones(int(sel.sum())), (remap[u[sel]], remap[v[sel]])),
                   shape=(len(keep), len(keep)))
    return int(connected_components(g, directed=False)[0])


BIPARTITE_NAMES = ("p1", "p2", "q1", "q2")


def bipartite_case_by_enumeration(edges) -> str:
    """Literal three-case reading with simple directed paths, by enumerating vertex sequences."""
    edges = {tuple(e) for e in edges}
    k = sum(1 for a, _ in edges if a.startswith("p"))
    if k == 4:
        return "i"
    if k == 0:
        return "ii"
    for u, v in itertools.permutations(BIPARTITE_NAMES, 2):
        if not (u.startswith("p") or v.startswith("p")):
            continue
        count = 0
        for j in range(3):
            for mid in itertools.permutations([w for w in BIPARTITE_NAMES if w not in (u, v)], j):
                seq = (u,) + mid + (v,)
                count += all(e in edges for e in zip(seq, seq[1:]))
        if count >= 2:
            return "iii"
    return "none"


def all_bipartite_orientations():
    """The 16 orientations of K_{2,2} on p1, p2, q1, q2 as edge lists."""
    pairs = [(p, q) for p in ("p1", "p2") for q in ("q1", "q2")]
    for bits in itertools.product([0, 1], repeat=4):
        yield [(p, q) if b else (q, p) for (p, q), b in zip(pairs, bits)]


def minimal_blocking_size(U: list, k: int) -> int:
    """Smallest vertex set at least k levels below U meeting every downward ray from U.

    Exact via max-flow/min-cut (Menger) on the downward cone of U.  The cone
    is truncated at a depth D below which cones of distinct vertices are
    disjoint, so no blocking set can profit from going deeper.
    """
    from scipy.sparse import csr_matrix
    from scipy.sparse.csgraph import maximum_flow

    if not U:
        return 0
    h0 = U[0].height
    # depth at which the T2 coordinates of U below each t1 have merged
    merge = 0
    by_t1: dict = {}
    for u in U:
        by_t1.setdefault(u.t1, []).append(u.t2)
    for t2s in by_t1.values():
        top = max(t.height for t in t2s)
        while len({t.ancestor(top) for t in t2s}) > 1:
            top += 1
        merge = max(merge, top - t2s[0].height)
    D = max(k, merge) + 1
    levels = [sorted(set(U))]
    for _ in range(D):
        levels.append(sorted({w for v in levels[-1] for w in v.down()}))
    index = {}
    for j, lev in enumerate(levels):
        for v in lev:
            index[v] = len(index)
    nv = len(index)
    # node 2i: in, 2i+1: out; source 2nv, sink 2nv+1
    big = 10 ** 6
    rows, cols, caps = [], [], []
    for v, i in index.items():
        depth = h0 - v.height
        rows.append(2 * i)
        cols.append(2 * i + 1)
        caps.append(1 if depth >= k else big)
        if depth < D:
            for w in v.down():
                rows.append(2 * i + 1)
                cols.append(2 * index[w])
                caps.append(big)
        else:
            rows.append(2 * i + 1)
            cols.append(2 * nv + 1)
            caps.append(big)
    for u in set(U):
        rows.append(2 * nv)
        cols.append(2 * index[u])
        caps.append(big)
    g = csr_matrix((np.array(caps, dtype=np.int32), (rows, cols)), shape=(2 * nv + 2, 2 * nv + 2))
    return int(maximum_flow(g, 2 * nv, 2 * nv + 1).flow_value)


def xz_geodesic_length(p1, p2, m: float) -> float:
    """Integrate the length element along the hyperbolic geodesic of the xz-plane.

    With X = m x and w = e^{m z} the plane is (1/m) times the upper half
    plane, whose geodesics are vertical lines and semicircles centred on w = 0.
    """
    from scipy.integrate import quad

    X1, X2 = m * p1.x, m * p2.x
    w1, w2 = math.exp(m * p1.z), math.exp(m * p2.z)
    if X1 == X2:
        return abs(p1.z - p2.z)
    X0 = ((X2 ** 2 + w2 ** 2) - (X1 ** 2 + w1 ** 2)) / (2 * (X2 - X1))
    rad = math.hypot(X1 - X0, w1)
    a1 = math.atan2(w1, X1 - X0)
    a2 = math.atan2(w2, X2 - X0)

    def speed(a):
        # x = (X0 + rad cos a) / m,  z = log(rad sin a) / m
        dx = -rad * math.sin(a) / m
        dz = math.cos(a) / (m * math.sin(a))
        z = math.log(rad * math.sin(a)) / m
        return math.sqrt(dz * dz + math.exp(-2 * m * z) * dx * dx)

    val, _ = quad(speed, min(a1, a2), max(a1, a2), epsabs=1e-13, epsrel=1e-12, limit=200)
    return val


def yz_geodesic_length(p1, p2, n: float) -> float:
    """Same as ``xz_geodesic_length`` after the reflection z -> -z."""
    from .sol_geometry import SolPoint

    return xz_geodesic_length(SolPoint(p1.y, 0.0, -p1.z), SolPoint(p2.y, 0.0, -p2.z), n)


def _primitive_offsets(k: int) -> np.ndarray:
    rng = range(-k, k + 1)
    out = [(a, b, c) for a in rng for b in rng for c in rng
           if (a, b, c) != (0, 0, 0) and math.gcd(math.gcd(abs(a), abs(b)), abs(c)) == 1]
    return np.array(out, dtype=np.int64)


class SolGrid:
    """Dense grid graph on a coordinate box with edges weighted by true segment lengths.

    Every grid path is a genuine path in Sol, so grid distances are upper
    bounds for the true distance; the excess is the discretization error.
    """

    def __init__(self, m: float, n: float, extent: tuple[float, float, float], step: float, reach: int = 2):
        from scipy.sparse import csr_matrix

        from .sol_geometry import segment_length

        self.m, self.n, self.step = m, n, step
        self.shape = tuple(2 * int(round(e / step)) + 1 for e in extent)
        self.origin = np.array([-int(round(e / step)) * step for e in extent])
        nx, ny, nz = self.shape
        idx = np.arange(nx * ny * nz).reshape(self.shape)
        coords = np.stack(np.meshgrid(*[np.arange(s) for s in self.shape], indexing="ij"), axis=-1)
        rows, cols, wts = [], [], []
        for off in _primitive_offsets(reach):
            sl_a = tuple(slice(max(0, -o), s - max(0, o)) for o, s in zip(off, self.shape))
            sl_b = tuple(slice(max(0, o), s - max(0, -o)) for o, s in zip(off, self.shape))
            a = idx[sl_a].ravel()
            b = idx[sl_b].ravel()
            pa = self.origin + coords[sl_a].reshape(-1, 3) * step
            rows.append(a)
            cols.append(b)
            wts.append(segment_length(pa, pa + off * step, m, n))
        self.graph = csr_matrix((np.concatenate(wts), (np.concatenate(rows), np.concatenate(cols))),
                                shape=(idx.size, idx.size))
        self._idx = idx

    def node(self, ijk) -> int:
        return int(self._idx[tuple(ijk)])

    def point(self, ijk) -> np.ndarray:
        return self.origin + np.asarray(ijk) * self.step

    def distances(self, sources: list, targets: list) -> np.ndarray:
        from scipy.sparse.csgraph import dijkstra

        s = [self.node(v) for v in sources]
        t = [self.node(v) for v in targets]
        return dijkstra(self.graph, directed=True, indices=s)[:, t]


def sol_sandwich_check(m: float, n: float, pairs: int = 100, seed: int = 0, step: float = 0.1,
                       extent: float = 1.5, margin: int = 4) -> dict:
    """Grid Dijkstra against the (lower, upper) interval on random grid pairs.

    The discretization error is calibrated on pairs inside a coordinate
    plane, where the exact distance is known: it is the largest relative
    excess of the grid distance there.  A generic pair passes when
    lower <= grid and grid <= upper * (1 + error).
    """
    from .sol_geometry import SolPoint, plane_distance_xz, plane_distance_yz, sol_distance_bounds

    grid = SolGrid(m, n, (extent, extent, extent), step)
    rng = np.random.default_rng(seed)
    hi = grid.shape[0] - margin

    def rand():
        return tuple(int(v) for v in rng.integers(margin, hi, 3))

    calib = []
    for k in range(pairs):
        s, t = rand(), list(rand())
        if k % 2 == 0:
            t[1] = s[1]
        else:
            t[0] = s[0]
        if tuple(t) == s:
            continue
        got = grid.distances([s], [tuple(t)])[0, 0]
        p, q = SolPoint(*grid.point(s)), SolPoint(*grid.point(t))
        exact = plane_distance_xz(p, q, m) if k % 2 == 0 else plane_distance_yz(p, q, n)
        calib.append(got / exact - 1)
    err = max(calib)
    n_src = max(1, pairs // 5)
    rows = []
    for _ in range(n_src):
        s = rand()
        ts = [rand() for _ in range(5)]
        got = grid.distances([s], ts)[0]
        for t, d in zip(ts, got):
            if t == s:
                continue
            b = sol_distance_bounds(SolPoint(*grid.point(s)), SolPoint(*grid.point(t)), m, n)
            rows.append((b.lower, float(d), b.upper))
    arr = np.array(rows)
    ok = (arr[:, 0] <= arr[:, 1] * (1 + 1e-9)) & (arr[:, 1] <= arr[:, 2] * (1 + err))
    return {"m": m, "n": n, "pairs": len(rows), "passed": int(ok.sum()), "fraction": float(ok.mean()),
            "discretization_error": float(err), "step": step, "lower_violations": int((arr[:, 0] > arr[:, 1] * (1 + 1e-9)).sum()),
            "max_upper_ratio": float((arr[:, 2] / np.maximum(arr[:, 0], 1e-300)).max())}
