"""The embedded net graph G.

Stages: net vertices on the lattice (R/(n m))Z^d, geodesics between nearby
net vertices (G1), untangled so any two share at most one contiguous run (G2),
split at merge and crossing points (G3), and finally replaced by chains of
straight chords cut at metric arclength marks (G4).
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components, dijkstra
from scipy.spatial import cKDTree

from . import _kernels as K_
from .errors import ConfigError, ConstructionError, FormatError, InvariantViolation

KIND_NAMES = ("net", "merge", "subdivision")
NET, MERGE, SUBDIVISION = 0, 1, 2


# --------------------------------------------------------------------------
# grid partition


@dataclass
class GridPartition:
    R: float
    d: int
    n: int
    m: int
    h: float
    smalldiam: float = float("nan")
    smallwe: float = float("nan")
    nm_required: float = 0.0

    @property
    def nm(self):
        return self.n * self.m

    @property
    def spacing(self):
        return self.R / self.nm

    @property
    def step(self):
        """Lattice steps between neighbouring net vertices."""
        return int(round(self.spacing / self.h))

    @property
    def side(self):
        return 2 * self.nm + 1

    @property
    def vertex_shape(self):
        return (self.side,) * self.d

    def vertex_index(self):
        return np.array(np.unravel_index(np.arange(self.side ** self.d), self.vertex_shape)).T

    def vertex_points(self):
        return -self.R + self.spacing * self.vertex_index()

    def vertex_nodes(self, oracle):
        idx = self.vertex_index() * self.step
        return np.ravel_multi_index(tuple(idx.T), tuple(oracle.shape))

    def coarse_cubes(self):
        return list(np.ndindex(*([2 * self.n] * self.d)))

    def fine_cubes(self, i):
        """Fine cube multi-indices (in the global fine grid) tiling coarse cube i."""
        i = np.asarray(i)
        return [tuple(i * self.m + np.array(j)) for j in np.ndindex(*([self.m] * self.d))]

    def cube_bounds(self, i, fine=False):
        side = self.R / (self.nm if fine else self.n)
        lo = -self.R + side * np.asarray(i, dtype=float)
        return lo, lo + side


def _divisors(M):
    return [k for k in range(1, M + 1) if M % k == 0]


def _half_axes(oracle):
    M2 = oracle.shape[0] - 1
    if M2 % 2:
        raise ConfigError("the lattice needs an even number of steps per axis")
    return M2 // 2


def measure_smalldiam(oracle, n, cap=np.inf):
    """Upper bound on the metric diameter of every coarse cube inflated by R/(2n).

    Twice the largest distance from the cube's centre node to lattice nodes of
    the inflated cube. Returns inf as soon as a cube exceeds ``cap``.
    """
    R, h, d = oracle.R, oracle.h, oracle.d
    side = R / n
    infl = R / (2 * n)
    N1 = oracle.shape[0] - 1
    worst = 0.0
    for i in np.ndindex(*([2 * n] * d)):
        lo = -R + side * np.asarray(i, dtype=float)
        hi = lo + side
        c = oracle.node((lo + hi) / 2)
        ilo = np.maximum(0, np.floor((lo - infl + R) / h - 1e-9)).astype(int)
        ihi = np.minimum(N1, np.ceil((hi + infl + R) / h + 1e-9)).astype(int)
        axes = [np.arange(a, b + 1) for a, b in zip(ilo, ihi)]
        grid = np.stack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")], axis=1)
        pts = -R + h * grid
        gap = np.linalg.norm(np.maximum(0.0, np.maximum(lo - pts, pts - hi)), axis=1)
        tgt = np.ravel_multi_index(tuple(grid[gap <= infl * (1 + 1e-12)].T), tuple(oracle.shape))
        dd = oracle.dists(c, tgt, limit=cap / 2 * (1 + 1e-12))
        r = float(dd.max())
        if not np.isfinite(r):
            return np.inf
        worst = max(worst, 2 * r)
        if worst > cap:
            return np.inf
    return worst


def straight_neighbour_bound(oracle, k):
    """Max metric length of the straight axis lattice path between net neighbours k steps apart."""
    d = oracle.d
    shape = tuple(oracle.shape)
    worst = 0.0
    for a in range(d):
        e = np.zeros(d, np.int64)
        e[a] = 1
        ka = [i for i, o in enumerate(oracle.offsets) if np.array_equal(o, e)][0]
        Wa = oracle.W[oracle.half[ka]].reshape(shape)
        S = np.concatenate([np.zeros_like(np.take(Wa, [0], axis=a)),
                            np.cumsum(np.take(Wa, np.arange(shape[a] - 1), axis=a), axis=a)], axis=a)
        pos = np.arange(0, shape[a] - 1, k)
        sums = np.take(S, pos + k, axis=a) - np.take(S, pos, axis=a)
        for b in range(d):
            if b != a:
                sums = np.take(sums, np.arange(0, shape[b], k), axis=b)
        worst = max(worst, float(sums.max()))
    return worst


def choose_grid(oracle, mods, eps):
    """Smallest n meeting the coarse-cube diameter bound, then the smallest m
    meeting the modulus bound on n m and the nearest-neighbour weight bound."""
    if not eps > 0:
        raise ConfigError(f"epsilon must be positive, got {eps}")
    M = _half_axes(oracle)
    cap = eps / 64
    n = diam = None
    for k in _divisors(M):
        dk = measure_smalldiam(oracle, k, cap)
        if dk <= cap:
            n, diam = k, dk
            break
    if n is None:
        raise ConstructionError(
            f"no coarse subdivision of the {2 * M}-step lattice meets the cube diameter bound "
            f"{cap:.4g}; refine the oracle lattice")
    need = mods.sup_ratio(mods.psi(eps), 2 * oracle.R) / (32 * eps)
    for m in range(1, M // n + 1):
        if M % (n * m) or n * m < need:
            continue
        we = straight_neighbour_bound(oracle, M // (n * m))
        if we <= eps / 128:
            return GridPartition(oracle.R, oracle.d, n, m, oracle.h, diam, we, need)
    raise ConstructionError(
        f"no fine subdivision with n={n} meets the edge weight bound {eps / 128:.4g}; "
        "refine the oracle lattice")


# --------------------------------------------------------------------------
# G1 and untangling


@dataclass
class Geodesic:
    u: int
    v: int
    nodes: np.ndarray
    length: float


@dataclass
class GeodesicSet:
    paths: list
    vertex_nodes: np.ndarray
    c_pair: int
    passes: int = 0
    noncompliant: int = 0

    def index(self):
        """Map lattice node -> ids of paths through it."""
        on = {}
        for i, g in enumerate(self.paths):
            for n in g.nodes.tolist():
                on.setdefault(n, []).append(i)
        return on


def pair_offsets(d, c):
    offs = [np.array(o) - c for o in np.ndindex(*([2 * c + 1] * d))]
    return [o for o in offs if _lex_pos(o)]


def _lex_pos(o):
    for x in o:
        if x:
            return x > 0
    return False


def net_pairs(partition, c_pair):
    """Unordered net vertex pairs within Chebyshev distance c_pair, sorted by first vertex."""
    if c_pair < 1:
        raise ConfigError("c_pair must be at least 1")
    shape = partition.vertex_shape
    idx = partition.vertex_index()
    ids = np.arange(len(idx))
    us, vs, ks = [], [], []
    for k, o in enumerate(pair_offsets(partition.d, c_pair)):
        j = idx + o
        ok = np.all((j >= 0) & (j < partition.side), axis=1)
        us.append(ids[ok])
        vs.append(np.ravel_multi_index(tuple(j[ok].T), shape))
        ks.append(np.full(ok.sum(), k))
    us, vs, ks = map(np.concatenate, (us, vs, ks))
    order = np.lexsort((ks, us))
    return us[order], vs[order]


def build_G1(oracle, partition, c_pair=2):
    vnodes = partition.vertex_nodes(oracle)
    us, vs = net_pairs(partition, c_pair)
    paths = []
    starts = np.flatnonzero(np.r_[True, us[1:] != us[:-1]])
    ends = np.r_[starts[1:], len(us)]
    for a, b in zip(starts, ends):
        u = int(us[a])
        node_paths, lengths = oracle.paths(vnodes[u], vnodes[vs[a:b]])
        for v, p, L in zip(vs[a:b], node_paths, lengths):
            paths.append(Geodesic(u, int(v), p, float(L)))
    return GeodesicSet(paths, vnodes, c_pair)


def _segment_of(Q, posQ, x, y):
    qa, qb = posQ[x], posQ[y]
    return Q[qa:qb + 1] if qa <= qb else Q[qb:qa + 1][::-1]


def intersection_compliant(P, Q):
    """True when P meets Q in at most one node or in one shared contiguous run."""
    P, Q = list(P), list(Q)
    posQ = {n: i for i, n in enumerate(Q)}
    hits = [i for i, n in enumerate(P) if n in posQ]
    if len(hits) <= 1:
        return True
    a, b = hits[0], hits[-1]
    if b - a + 1 != len(hits):
        return False
    return P[a:b + 1] == _segment_of(Q, posQ, P[a], P[b])


def untangle(gs, oracle, max_passes=20):
    """Sweep paths in index order, splicing each against the already processed ones.

    For a processed path Q met by the current path P, the stretch of P between
    its first and last node on Q is replaced by the corresponding stretch of Q.
    Sub-paths of shortest paths are shortest, so lengths are unchanged.
    """
    on = {}
    out = []
    passes_used = 0
    noncompliant = 0
    for g in gs.paths:
        P = g.nodes.tolist()
        changed_any = False
        for it in range(max_passes):
            changed = False
            seen = sorted({q for n in P for q in on.get(n, ())})
            for q in seen:
                Q = out[q].nodes.tolist()
                posQ = out[q]._pos
                hits = [i for i, n in enumerate(P) if n in posQ]
                if len(hits) < 2:
                    continue
                a, b = hits[0], hits[-1]
                seg = _segment_of(Q, posQ, P[a], P[b])
                if P[a:b + 1] == seg:
                    continue
                P = P[:a] + seg + P[b + 1:]
                changed = changed_any = True
            passes_used = max(passes_used, it + 1)
            if not changed:
                break
        else:
            noncompliant += 1
        nodes = np.array(P, dtype=np.int64)
        length = g.length
        if changed_any:
            length = oracle.path_weight(nodes)
            if abs(length - g.length) > 1e-9 * g.length:
                raise InvariantViolation(
                    f"splicing changed the length of path {g.u}-{g.v}: {g.length} -> {length}")
        ng = Geodesic(g.u, g.v, nodes, length)
        ng._pos = {n: i for i, n in enumerate(P)}
        idx = len(out)
        out.append(ng)
        for n in P:
            on.setdefault(n, []).append(idx)
    for ng in out:
        del ng._pos
    return GeodesicSet(out, gs.vertex_nodes, gs.c_pair, passes_used, noncompliant)


def zeta_margin(gs, oracle):
    """Largest Euclidean distance of a geodesic from the bounding box of its endpoints."""
    worst = 0.0
    for g in gs.paths:
        pts = oracle.point(g.nodes)
        lo = np.minimum(pts[0], pts[-1])
        hi = np.maximum(pts[0], pts[-1])
        gap = np.linalg.norm(np.maximum(0.0, np.maximum(lo - pts, pts - hi)), axis=1)
        worst = max(worst, float(gap.max()))
    return worst


# --------------------------------------------------------------------------
# G3: merge and crossing vertices


@dataclass
class ChainGraph:
    R: float
    d: int
    n: int
    m: int
    coords: np.ndarray
    kinds: np.ndarray
    lattice_node: np.ndarray
    chains: list            # (u, v, points, cumulative metric arclength)
    n_crossings: int = 0

    @property
    def n_edges(self):
        return len(self.chains)


def candidate_pairs(A, B, pad=0.0):
    """Index pairs (i < j) of segments whose padded bounding boxes may touch."""
    lo = np.minimum(A, B) - pad
    hi = np.maximum(A, B) + pad
    n, d = A.shape
    if n < 2:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    size = float(max((hi - lo).max(), 1e-300))
    origin = lo.min(axis=0)
    c0 = np.floor((lo - origin) / size).astype(np.int64)
    c1 = np.floor((hi - origin) / size).astype(np.int64)
    dims = c1.max(axis=0) + 2
    cells, segs = [], []
    for bits in np.ndindex(*([2] * d)):
        c = c0 + np.array(bits)
        ok = np.all(c <= c1, axis=1)
        cells.append(np.ravel_multi_index(tuple(c[ok].T), tuple(dims)))
        segs.append(np.flatnonzero(ok))
    cells = np.concatenate(cells)
    segs = np.concatenate(segs)
    order = np.lexsort((segs, cells))
    cells, segs = cells[order], segs[order]
    I, J = [], []
    k = 1
    while k < len(cells):
        same = cells[k:] == cells[:-k]
        if not same.any():
            break
        I.append(segs[:-k][same])
        J.append(segs[k:][same])
        k += 1
    if not I:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    I = np.concatenate(I)
    J = np.concatenate(J)
    key = np.unique(np.minimum(I, J) * n + np.maximum(I, J))
    return key // n, key % n


def _cross3(a, b):
    if a.shape[1] == 2:
        a = np.column_stack([a, np.zeros(len(a), a.dtype)])
        b = np.column_stack([b, np.zeros(len(b), b.dtype)])
    return np.cross(a, b), a, b


def lattice_crossings(P, Q):
    """Proper interior crossings between integer segments P[:,0]-P[:,1] style pairs.

    ``P`` and ``Q`` are (k, 2, d) integer arrays. Returns mask and the crossing
    parameters (tn, un, den) with t = tn/den along P, u = un/den along Q.
    """
    p, r = P[:, 0], P[:, 1] - P[:, 0]
    q, s = Q[:, 0], Q[:, 1] - Q[:, 0]
    rxs, r3, s3 = _cross3(r, s)
    qp = q - p
    qp3 = np.column_stack([qp, np.zeros(len(qp), qp.dtype)]) if qp.shape[1] == 2 else qp
    den = np.einsum("ij,ij->i", rxs, rxs)
    coplanar = np.einsum("ij,ij->i", qp3, rxs) == 0
    tn = np.einsum("ij,ij->i", np.cross(qp3, s3), rxs)
    un = np.einsum("ij,ij->i", np.cross(qp3, r3), rxs)
    ok = (den > 0) & coplanar & (tn > 0) & (tn < den) & (un > 0) & (un < den)
    return ok, tn, un, den


def insert_merge_vertices(gs, oracle):
    """Stage G3: cut the union of geodesics at net vertices, merge points and crossings."""
    # union of lattice steps, each with its metric weight
    a_list, b_list, w_list = [], [], []
    for g in gs.paths:
        if len(g.nodes) < 2:
            continue
        a_list.append(g.nodes[:-1])
        b_list.append(g.nodes[1:])
        w_list.append(oracle.step_weights(g.nodes))
    a = np.concatenate(a_list)
    b = np.concatenate(b_list)
    w = np.concatenate(w_list)
    lo_, hi_ = np.minimum(a, b), np.maximum(a, b)
    key = lo_ * oracle.n_nodes + hi_
    key, first = np.unique(key, return_index=True)
    ea, eb, ew = lo_[first], hi_[first], w[first]
    shape = tuple(oracle.shape)
    ia = np.array(np.unravel_index(ea, shape)).T.astype(np.int64)
    ib = np.array(np.unravel_index(eb, shape)).T.astype(np.int64)

    # crossings of lattice steps that share no node
    I, J = candidate_pairs(ia.astype(float), ib.astype(float))
    share = (ea[I] == ea[J]) | (ea[I] == eb[J]) | (eb[I] == ea[J]) | (eb[I] == eb[J])
    I, J = I[~share], J[~share]
    ok, tn, un, den = lattice_crossings(np.stack([ia[I], ib[I]], axis=1),
                                        np.stack([ia[J], ib[J]], axis=1))
    cross_key = {}
    cuts = {}
    for i, j, t1, u1, dd in zip(I[ok], J[ok], tn[ok], un[ok], den[ok]):
        t = Fraction(int(t1), int(dd))
        u = Fraction(int(u1), int(dd))
        pt = tuple(Fraction(int(x)) + t * int(y - x) for x, y in zip(ia[i], ib[i]))
        cid = cross_key.setdefault(pt, len(cross_key))
        cuts.setdefault(int(i), {})[cid] = t
        cuts.setdefault(int(j), {})[cid] = u
    n_cross = len(cross_key)

    # planar graph: lattice nodes get ids 0..L-1 (sorted), crossings L..L+C-1
    used = np.unique(np.concatenate([ea, eb, gs.vertex_nodes]))
    pid_of = {int(x): i for i, x in enumerate(used)}
    L = len(used)
    cross_pts = sorted(cross_key, key=lambda k: cross_key[k])
    coords = np.vstack([oracle.point(used),
                        np.array([[-oracle.R + oracle.h * float(c) for c in pt] for pt in cross_pts])
                        if n_cross else np.zeros((0, oracle.d))])
    pu, pv, pw = [], [], []
    for e in range(len(ea)):
        u0, v0 = pid_of[int(ea[e])], pid_of[int(eb[e])]
        c = cuts.get(e)
        if not c:
            pu.append(u0); pv.append(v0); pw.append(float(ew[e]))
            continue
        seq = sorted(c.items(), key=lambda kv: kv[1])
        prev_id, prev_t = u0, Fraction(0)
        for cid, t in seq:
            pu.append(prev_id); pv.append(L + cid); pw.append(float(t - prev_t) * float(ew[e]))
            prev_id, prev_t = L + cid, t
        pu.append(prev_id); pv.append(v0); pw.append(float(1 - prev_t) * float(ew[e]))
    pu = np.array(pu, np.int64)
    pv = np.array(pv, np.int64)
    pw = np.array(pw)
    nv = len(coords)
    deg = np.bincount(np.concatenate([pu, pv]), minlength=nv)
    is_net = np.zeros(nv, bool)
    is_net[[pid_of[int(x)] for x in gs.vertex_nodes]] = True
    special = is_net | (deg != 2)

    # adjacency lists sorted by neighbour id then edge id
    adj = [[] for _ in range(nv)]
    for e, (x, y) in enumerate(zip(pu.tolist(), pv.tolist())):
        adj[x].append((y, e))
        adj[y].append((x, e))
    for lst in adj:
        lst.sort()
    used_edge = np.zeros(len(pu), bool)
    chains = []
    for s in np.flatnonzero(special):
        for nb, e in adj[s]:
            if used_edge[e]:
                continue
            seq = [int(s)]
            arc = [0.0]
            cur, nxt, ce = int(s), nb, e
            while True:
                used_edge[ce] = True
                seq.append(nxt)
                arc.append(arc[-1] + pw[ce])
                if special[nxt]:
                    break
                cur = nxt
                cand = [(y, f) for y, f in adj[cur] if not used_edge[f]]
                if not cand:
                    break
                nxt, ce = cand[0]
            chains.append((seq, np.array(arc)))

    # compact vertex ids to the special vertices
    sid = -np.ones(nv, np.int64)
    sp = np.flatnonzero(special)
    sid[sp] = np.arange(len(sp))
    lat = np.full(len(sp), -1, np.int64)
    lat[sp < L] = used[sp[sp < L]]
    kinds = np.where(is_net[sp], NET, MERGE).astype(np.int8)
    out_chains = [(int(sid[seq[0]]), int(sid[seq[-1]]), coords[seq], arc) for seq, arc in chains]
    return ChainGraph(oracle.R, oracle.d, 0, 0, coords[sp], kinds, lat, out_chains, n_cross)


# --------------------------------------------------------------------------
# G4 and weights


@dataclass
class WeightedGraph:
    d: int
    R: float
    n: int
    m: int
    tau: float
    K: int
    coords: np.ndarray
    kinds: np.ndarray
    eu: np.ndarray
    ev: np.ndarray
    w: np.ndarray
    ell0: np.ndarray
    chain: np.ndarray = None
    arc: np.ndarray = None
    info: dict = field(default_factory=dict)

    @property
    def n_vertices(self):
        return len(self.coords)

    @property
    def n_edges(self):
        return len(self.eu)

    def csr(self):
        if getattr(self, "_csr", None) is None:
            u = np.concatenate([self.eu, self.ev])
            v = np.concatenate([self.ev, self.eu])
            w = np.concatenate([self.w, self.w])
            keep = u != v
            u, v, w = u[keep], v[keep], w[keep]
            order = np.lexsort((w, v, u))
            u, v, w = u[order], v[order], w[order]
            first = np.r_[True, (u[1:] != u[:-1]) | (v[1:] != v[:-1])]
            self._csr = csr_matrix((w[first], (u[first], v[first])),
                                   shape=(self.n_vertices, self.n_vertices))
        return self._csr

    def is_connected(self):
        k, _ = connected_components(self.csr(), directed=False)
        return k == 1

    def segments(self):
        return self.coords[self.eu], self.coords[self.ev]

    def to_text(self, comments=()):
        lines = [f"# {c}" for c in comments]
        lines.append(f"GRAPH {self.d} {self.R!r} {self.n} {self.m} {float(self.tau)!r} {self.K}")
        for i, (x, k) in enumerate(zip(self.coords, self.kinds)):
            lines.append(f"V {i} " + " ".join(repr(float(c)) for c in x) + f" {KIND_NAMES[k]}")
        for i in range(self.n_edges):
            lines.append(f"E {i} {self.eu[i]} {self.ev[i]} {float(self.w[i])!r} {float(self.ell0[i])!r}")
        return "\n".join(lines) + "\n"

    def digest(self):
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    def export(self, path, comments=()):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_text(comments))

    @classmethod
    def from_text(cls, text, source="<graph>"):
        header = None
        comments = []
        V, E = [], []
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                comments.append(line[1:].strip())
                continue
            tok = line.split()
            try:
                if tok[0] == "GRAPH":
                    header = (int(tok[1]), float(tok[2]), int(tok[3]), int(tok[4]),
                              float(tok[5]), int(tok[6]))
                elif header is None:
                    raise ValueError(f"{tok[0]} record before the GRAPH header")
                elif tok[0] == "V":
                    d = header[0]
                    if len(tok) != d + 3 or int(tok[1]) != len(V):
                        raise ValueError("bad vertex line")
                    V.append(([float(x) for x in tok[2:2 + d]], KIND_NAMES.index(tok[2 + d])))
                elif tok[0] == "E":
                    if len(tok) != 6 or int(tok[1]) != len(E):
                        raise ValueError("bad edge line")
                    E.append((int(tok[2]), int(tok[3]), float(tok[4]), float(tok[5])))
                else:
                    raise ValueError(f"unknown record {tok[0]!r}")
            except (ValueError, IndexError, TypeError) as exc:
                raise FormatError(f"{source}:{lineno}: {exc}") from None
        if header is None:
            raise FormatError(f"{source}: missing GRAPH header")
        d, R, n, m, tau, K = header
        coords = np.array([v[0] for v in V], dtype=float).reshape(-1, d)
        kinds = np.array([v[1] for v in V], dtype=np.int8)
        e = np.array(E, dtype=float).reshape(-1, 4)
        g = cls(d, R, n, m, tau, K, coords, kinds, e[:, 0].astype(np.int64),
                e[:, 1].astype(np.int64), e[:, 2].copy(), e[:, 3].copy())
        g.comments = comments
        if len(e) and (e[:, :2].max() >= len(V) or e[:, :2].min() < 0):
            raise FormatError(f"{source}: edge refers to a missing vertex")
        return g

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read(), str(path))

    def lattice_vertices(self, oracle, kinds=(NET, MERGE)):
        """Vertices lying exactly on lattice nodes, with those nodes."""
        sel = np.flatnonzero(np.isin(self.kinds, kinds))
        x = self.coords[sel]
        idx = (x + oracle.R) / oracle.h
        on = np.all(np.abs(idx - np.rint(idx)) <= 1e-9, axis=1)
        sel = sel[on]
        return sel, oracle.node(self.coords[sel]) if len(sel) else np.zeros(0, np.int64)


def piecewise_linearize(g3, tau, K):
    """Stage G4: cut each chain at arclength marks tau, tau + (L - 2 tau)/K, ..., L - tau."""
    if not tau > 0 or K < 1:
        raise ConfigError("need tau > 0 and K >= 1")
    coords = [g3.coords]
    kinds = [g3.kinds]
    nv = len(g3.coords)
    eu, ev, chain, arc = [], [], [], []
    for c, (u, v, pts, cum) in enumerate(g3.chains):
        L = float(cum[-1])
        if L <= 2 * tau:
            raise ConstructionError(f"chain {c} has length {L:.3g} <= 2 tau")
        marks = np.concatenate([[0.0, tau], tau + (L - 2 * tau) * np.arange(1, K) / K, [L - tau, L]])
        inner = marks[1:-1]
        bp = np.column_stack([np.interp(inner, cum, pts[:, a]) for a in range(g3.d)])
        ids = np.concatenate([[u], nv + np.arange(len(inner)), [v]])
        nv += len(inner)
        coords.append(bp)
        kinds.append(np.full(len(inner), SUBDIVISION, np.int8))
        eu.append(ids[:-1])
        ev.append(ids[1:])
        chain.append(np.full(len(ids) - 1, c))
        arc.append(np.diff(marks))
    coords = np.vstack(coords)
    eu, ev = np.concatenate(eu), np.concatenate(ev)
    g = WeightedGraph(g3.d, g3.R, g3.n, g3.m, tau, K, coords, np.concatenate(kinds), eu, ev,
                      np.full(len(eu), np.nan), np.linalg.norm(coords[ev] - coords[eu], axis=1),
                      np.concatenate(chain), np.concatenate(arc))
    return g


def assign_weights(g4, oracle=None):
    """w_e = metric arclength of the geodesic piece between the chord's endpoints."""
    if g4.arc is None:
        raise ConfigError("graph carries no arclength marks")
    if np.any(~(g4.arc > 0)) or np.any(~(g4.ell0 > 0)):
        raise ConstructionError("degenerate edge with non-positive weight or length")
    g4.w = g4.arc.copy()
    spec = getattr(oracle, "spec", None)
    if spec is not None and spec.kind == "euclidean":
        # D-bar is D_0 in closed form; avoids lattice rounding in the ratio w/l
        g4.w = g4.ell0.copy()
    g4.info["n_edges"] = g4.n_edges
    g4._csr = None
    if not g4.is_connected():
        raise ConstructionError("graph is disconnected")
    return g4


def chord_conflicts(g, guard=1e-12):
    """Pairs of straight edges whose interiors meet (first few), float predicate."""
    A, B = g.segments()
    scale = guard * 2 * g.R
    I, J = candidate_pairs(A, B, pad=scale)
    if len(I) == 0:
        return []
    dist = K_.segment_pair_dists(A, B, A, B, I, J)
    su = np.stack([g.eu[I], g.ev[I]], axis=1)
    sv = np.stack([g.eu[J], g.ev[J]], axis=1)
    nshare = (su[:, :1] == sv).sum(axis=1) + (su[:, 1:] == sv).sum(axis=1)
    bad = (nshare == 0) & (dist <= scale)
    one = np.flatnonzero(nshare == 1)
    if len(one):
        i, j = I[one], J[one]
        common = np.where((g.eu[i] == g.eu[j]) | (g.eu[i] == g.ev[j]), g.eu[i], g.ev[i])
        oi = np.where(g.eu[i] == common, g.ev[i], g.eu[i])
        oj = np.where(g.eu[j] == common, g.ev[j], g.eu[j])
        di = g.coords[oi] - g.coords[common]
        dj = g.coords[oj] - g.coords[common]
        ni = np.linalg.norm(di, axis=1)
        nj = np.linalg.norm(dj, axis=1)
        cos = np.einsum("ij,ij->i", di, dj) / (ni * nj)
        bad[one] = cos >= 1 - 1e-12
    bad |= nshare == 2
    k = np.flatnonzero(bad)
    return list(zip(I[k].tolist(), J[k].tolist()))


def lattice_density_min(oracle):
    lens = np.linalg.norm(oracle.half_offsets, axis=1) * oracle.h
    W = oracle.W / lens[:, None]
    return float(W[np.isfinite(W)].min())


def chain_separation(g3, probe):
    """Min Euclidean distance between chains sharing no vertex (capped at ``probe``)."""
    A, B, owner = [], [], []
    for c, (u, v, pts, _) in enumerate(g3.chains):
        A.append(pts[:-1])
        B.append(pts[1:])
        owner.append(np.full(len(pts) - 1, c))
    A, B, owner = np.vstack(A), np.vstack(B), np.concatenate(owner)
    I, J = candidate_pairs(A, B, pad=probe / 2)
    ends = np.array([(u, v) for u, v, _, _ in g3.chains], dtype=np.int64)
    ci, cj = owner[I], owner[J]
    eu, ev = ends[ci], ends[cj]
    adjacent = (ci == cj) | np.any(eu[:, :, None] == ev[:, None, :], axis=(1, 2))
    I, J = I[~adjacent], J[~adjacent]
    if len(I) == 0:
        return float(probe)
    return float(min(probe, K_.segment_pair_dists(A, B, A, B, I, J).min()))


def vertex_separation(g3):
    if len(g3.coords) < 2:
        return float("inf")
    dd, _ = cKDTree(g3.coords).query(g3.coords, k=2)
    return float(dd[:, 1].min())


def default_tau_K(g3, oracle, eps, spacing):
    """tau = 1/20 of the vertex separation; K the smallest power of two giving
    middle pieces shorter than the non-adjacent edge separation and eps/128.

    Separations are metric lower bounds: min lattice density times D_0 gaps.
    """
    rho = lattice_density_min(oracle)
    vsep = rho * vertex_separation(g3)
    esep = rho * chain_separation(g3, spacing)
    tau = vsep / 20
    Lmax = max(float(c[3][-1]) for c in g3.chains)
    K = 1
    while (Lmax - 2 * tau) / K >= esep or (Lmax - 2 * tau) / K > eps / 128:
        K *= 2
    return tau, K, {"vertex_sep": vsep, "edge_sep": esep, "edge_sep_d0": esep / rho}


def build_graph(oracle, partition, eps, c_pair=2, tau=None, K=None, max_retries=6):
    """Run G1..G4 and assign weights; returns (graph, stage info)."""
    g1 = build_G1(oracle, partition, c_pair)
    g2 = untangle(g1, oracle)
    g3 = insert_merge_vertices(g2, oracle)
    g3.n, g3.m = partition.n, partition.m
    tau0, K0, seps = default_tau_K(g3, oracle, eps, partition.spacing)
    tau = tau0 if tau is None else tau
    K = K0 if K is None else K
    for attempt in range(max_retries + 1):
        g4 = piecewise_linearize(g3, tau, K)
        bad = chord_conflicts(g4)
        if not bad:
            break
        if attempt == max_retries:
            i, j = bad[0]
            raise ConstructionError(
                f"straight edges {i} and {j} still intersect after {max_retries} refinements")
        tau, K = tau / 2, K * 2
    g = assign_weights(g4, oracle)
    g.info.update({
        "g1_paths": len(g1.paths), "untangle_passes": g2.passes,
        "untangle_noncompliant": g2.noncompliant, "g3_vertices": len(g3.coords),
        "g3_edges": g3.n_edges, "crossings": g3.n_crossings, "retries": attempt,
        "zeta": zeta_margin(g2, oracle), **seps,
    })
    g.g3 = g3
    return g


def graph_dists(g, sources):
    """d_G from each source vertex to every vertex (rows follow ``sources``)."""
    D = dijkstra(g.csr(), directed=False, indices=np.asarray(sources, dtype=np.int64))
    return np.atleast_2d(D)


def graph_dist(g, u, v):
    if u == v:
        return 0.0
    d = float(graph_dists(g, [u])[0, v])
    if not np.isfinite(d):
        raise ConstructionError(f"vertices {u} and {v} are disconnected")
    return d
