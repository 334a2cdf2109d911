"""Numerical checks of every quantitative claim on a constructed instance.

Each check compares per-sample excesses against explicit budgets
(eps term + lattice anisotropy term + snapping term) and passes iff every
excess stays within its budget (or, for trapping, the required fraction does).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import _kernels as K_
from .conformal_synth import ConformalField
from .distance_eval import EdgeIndex, check_trapped, conformal_oracle
from .geodesic_graph import (MERGE, NET, chord_conflicts, graph_dists,
                             measure_smalldiam)
from .metric_core import MetricSpec, Path, lattice_build

MIN_SAMPLES = 1


@dataclass
class CheckRecord:
    name: str
    claim: str
    samples: int
    excess: float            # measured deviation at the worst sample
    eps_term: float
    tol_term: float
    snap_term: float
    passed: bool
    margin: float            # min over samples of budget - excess
    informational: bool = False
    extra: dict = field(default_factory=dict)

    @property
    def budget(self):
        return self.eps_term + self.tol_term + self.snap_term


def _record(name, claim, excess, eps_t, tol_t, snap_t, informational=False, **extra):
    excess = np.asarray(excess, dtype=float).ravel()
    eps_t, tol_t, snap_t = (np.broadcast_to(np.asarray(x, dtype=float), excess.shape)
                            for x in (eps_t, tol_t, snap_t))
    n = excess.size
    if n < MIN_SAMPLES:
        return CheckRecord(name, claim, 0, math.nan, math.nan, math.nan, math.nan, False,
                           math.nan, informational, extra)
    margin = (eps_t + tol_t + snap_t) - excess
    margin = np.where(np.isnan(margin), -np.inf, margin)
    i = int(np.argmin(margin))
    return CheckRecord(name, claim, n, float(excess[i]), float(eps_t[i]), float(tol_t[i]),
                       float(snap_t[i]), bool(margin[i] >= 0), float(margin[i]),
                       informational, extra)


@dataclass
class VerificationReport:
    records: list
    params: dict
    seed: int

    @property
    def passed(self):
        return all(r.passed for r in self.records if not r.informational)

    def worst(self):
        bad = [r for r in self.records if not r.passed and not r.informational]
        pool = bad or [r for r in self.records if not r.informational]
        return min(pool, key=lambda r: r.margin if np.isfinite(r.margin) else -np.inf)

    def summary(self):
        hard = [r for r in self.records if not r.informational]
        ok = sum(r.passed for r in hard)
        w = self.worst()
        return (f"{'PASS' if self.passed else 'FAIL'} {ok}/{len(hard)} checks; "
                f"worst={w.name} margin={w.margin!r}")

    def to_text(self, comments=()):
        lines = [f"# {c}" for c in comments]
        lines.append(f"seed = {self.seed}")
        for k, v in self.params.items():
            lines.append(f"param.{k} = {v!r}" if isinstance(v, float) else f"param.{k} = {v}")
        for r in self.records:
            p = f"check.{r.name}"
            lines += [f"{p}.claim = {r.claim}",
                      f"{p}.samples = {r.samples}",
                      f"{p}.excess = {r.excess!r}",
                      f"{p}.eps_term = {r.eps_term!r}",
                      f"{p}.tol_term = {r.tol_term!r}",
                      f"{p}.snap_term = {r.snap_term!r}",
                      f"{p}.budget = {r.budget!r}",
                      f"{p}.margin = {r.margin!r}",
                      f"{p}.informational = {str(r.informational).lower()}",
                      f"{p}.pass = {str(r.passed).lower()}"]
            for k, v in r.extra.items():
                lines.append(f"{p}.{k} = {v!r}" if isinstance(v, float) else f"{p}.{k} = {v}")
        lines.append(f"summary = {self.summary()}")
        return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# helpers


def _choice(rng, n, k):
    return np.sort(rng.choice(n, size=min(k, n), replace=False))


def stratified_points(rng, R, d, per_axis):
    """One jittered point per cell of a per_axis^d grid over the box."""
    cells = np.array(np.unravel_index(np.arange(per_axis ** d), (per_axis,) * d)).T
    u = rng.random(cells.shape)
    return -R + 2 * R * (cells + u) / per_axis


def _snap_len(oracle, density_max):
    return oracle.h * math.sqrt(oracle.d) / 2 * density_max


# --------------------------------------------------------------------------
# checks


def verify_params(params, G):
    excess, names = [], []
    for name, lhs, rhs in params.constraints():
        excess.append(lhs - rhs)
        names.append(name)
    excess = np.concatenate([excess, G.w - params.eps / 128 * (1 + 1e-12)])
    # the inequalities are strict, so a zero excess counts as a failure
    strict = np.where(excess < 0, excess, np.maximum(excess, 1e-300))
    failing = ",".join(n for n, e in zip(names, excess) if not e < 0) or "none"
    return _record("params", "C0>C1, etasmol, param1, etabar bounds, w_e<=eps/128",
                   strict, 0.0, 0.0, 0.0, failing=failing)


def verify_graph_stage(G, metric, eps, rng, n_src=32, n_tgt=32):
    verts, nodes = G.lattice_vertices(metric)
    src = _choice(rng, len(verts), n_src)
    dG_rows = graph_dists(G, verts[src])
    two, one, one_tol, two_tol = [], [], [], []
    for row, s in zip(dG_rows, src):
        tg = _choice(rng, len(verts), n_tgt)
        dbar = metric.dists(nodes[s], nodes[tg])
        dg = row[verts[tg]]
        two.append(np.abs(dg - dbar))
        one.append(dbar - dg)
        two_tol.append(metric.tol_lat * dbar)
    two, one, tol = map(np.concatenate, (two, one, two_tol))
    r1 = _record("graph_stage", "|dG - Dbar| <= eps/4 on vertex pairs", two, eps / 4, tol, 0.0)
    r2 = _record("graph_lower", "dG >= Dbar on vertex pairs", one, 0.0, tol, 0.0)
    return r1, r2


def _csr_arrays(G):
    A = G.csr()
    return A.indptr.astype(np.int64), A.indices.astype(np.int64), A.data.astype(np.float64)


def graph_pair_dists(G, us, vs, limits):
    indptr, indices, data = _csr_arrays(G)
    n = G.n_vertices
    dist = np.full(n, np.inf)
    pred = np.full(n, -1, np.int64)
    touched = np.empty(n, np.int64)
    tflag = np.zeros(n, np.uint8)
    return K_.csr_pair_dists(indptr, indices, data, np.asarray(us, np.int64),
                             np.asarray(vs, np.int64), np.asarray(limits, np.float64),
                             dist, pred, touched, tflag)


def verify_adjacent_bounds(G, conf, params):
    if np.any(~(G.w > 0)):
        raise ValueError("degenerate edge with non-positive weight")
    a = conf.node(G.coords[G.eu])
    b = conf.node(G.coords[G.ev])
    tol = conf.tol_lat * G.w + 2 * conf.h * math.exp(params.C0)
    efd = conf.pair_dists(a, b, limits=(G.w + tol) * (1 + 1e-9))
    dG = graph_pair_dists(G, G.eu, G.ev, G.w * (1 + 1e-12))
    eps_low = params.eps / (10 * G.n_edges)
    up = _record("adjacent_upper", "ef(v1,v2) <= w_e on edges", efd - G.w, 0.0, tol, 0.0)
    lo = _record("adjacent_lower", "ef(v1,v2) >= dG(v1,v2) - eps/(10|G|) on edges",
                 dG - efd, eps_low, tol, 0.0)
    return up, lo


def verify_edge_bounds(G, conf, metric, params, rng, n_src=32, n_tgt=32):
    verts, nodes = G.lattice_vertices(metric)
    cnodes = conf.node(G.coords[verts])
    src = _choice(rng, len(verts), n_src)
    rows = graph_dists(G, verts[src])
    up, lo, tol_u, tol_l = [], [], [], []
    slack = 2 * conf.h * math.exp(params.C0)
    for row, s in zip(rows, src):
        tg = _choice(rng, len(verts), n_tgt)
        efd = conf.dists(cnodes[s], cnodes[tg])
        dbar = metric.dists(nodes[s], nodes[tg])
        dg = row[verts[tg]]
        up.append(efd - dg)
        lo.append(dbar - efd)
        tol_u.append(conf.tol_lat * dg + slack)
        tol_l.append(metric.tol_lat * dbar + slack)
    up, lo, tol_u, tol_l = map(np.concatenate, (up, lo, tol_u, tol_l))
    r1 = _record("edge_upper", "ef(x,y) <= dG(x,y) on vertex pairs", up, 0.0, tol_u, 0.0)
    r2 = _record("edge_lower", "ef(x,y) >= Dbar(x,y) - eps/4 on vertex pairs", lo,
                 params.eps / 4, tol_l, 0.0)
    return r1, r2


def _edge_distance_all(conf, index):
    pts = conf.point(np.arange(conf.n_nodes))
    r, _ = index.distances(pts)
    return r


def verify_trapped(G, conf, params, rng, n_src=25, n_tgt=20, index=None, r_nodes=None):
    eta, etabar = params.eta, params.etabar
    if index is None:
        index = EdgeIndex(G, eta + etabar + 2 * conf.h * math.sqrt(G.d))
    if r_nodes is None:
        r_nodes = _edge_distance_all(conf, index)
    pool = np.flatnonzero(r_nodes <= eta)
    srcs = pool[_choice(rng, len(pool), n_src)]
    inside = []
    failures = []
    worst = 0.0
    band = eta + etabar / 2 + conf.h * math.sqrt(G.d)
    for s in srcs:
        tg = pool[_choice(rng, len(pool), n_tgt + 1)]
        tg = tg[tg != s][:n_tgt]
        paths, _ = conf.paths(int(s), tg)
        for t, p in zip(tg, paths):
            res = check_trapped(Path(conf.point(p)), index, eta, etabar, conf.h)
            inside.append(res["inside"])
            worst = max(worst, res["max_excursion"])
            if not res["inside"]:
                failures.append((int(s), int(t), res["max_excursion"]))
    inside = np.array(inside, bool)
    frac = float(inside.mean()) if inside.size else 0.0
    rec = CheckRecord("trapped", "ef geodesics with ends in E_eta stay in E_(eta+etabar/2)",
                      int(inside.size), worst, 0.0, band, 0.0,
                      bool(inside.size and frac >= 0.95), frac - 0.95,
                      extra={"fraction_inside": frac, "failures": len(failures)})
    for i, (s, t, e) in enumerate(failures):
        rec.extra[f"failure.{i}"] = f"{s} {t} {e!r}"
    return rec


def sample_points(G, conf, params, rng, n_strat=1024, index=None, r_nodes=None):
    """Stratified jittered points plus adversarial ones at band boundaries,
    the far plateau and coarse cell centres."""
    d = G.d
    per_axis = int(math.ceil(n_strat ** (1.0 / d)))
    pts = [stratified_points(rng, G.R, d, per_axis)]
    if r_nodes is not None:
        for target in (params.eta, params.eta + params.etabar, params.eta - params.etabar):
            near = np.argsort(np.abs(r_nodes - target), kind="stable")[:16]
            pts.append(conf.point(near))
        far = np.argsort(-r_nodes, kind="stable")[:16]
        pts.append(conf.point(far))
    side = G.R / G.n
    cells = np.array(np.unravel_index(np.arange((2 * G.n) ** d), (2 * G.n,) * d)).T
    pick = _choice(rng, len(cells), 16)
    pts.append(-G.R + side * (cells[pick] + 0.5))
    return np.vstack(pts)


def verify_highway(G, conf, metric, params, points, density_max):
    bound = params.eps / 16
    cv = conf.node(G.coords)
    mv = metric.node(G.coords)
    xc = conf.node(points)
    xm = metric.node(points)
    ef_near, ef_root = conf.nearest_sources(np.unique(cv))
    db_near, db_root = metric.nearest_sources(np.unique(mv))
    lim = (bound * (1 + metric.tol_lat) + 4 * max(_snap_len(metric, density_max),
                                                   _snap_len(conf, math.exp(conf.f_max))))
    # witness A: nearest vertex for ef; witness B: nearest vertex for Dbar
    wa_c = ef_root[xc]
    wa_m = metric.node(conf.point(wa_c))
    wb_m = db_root[xm]
    wb_c = conf.node(metric.point(wb_m))
    a_db = metric.pair_dists(xm, wa_m, np.full(len(xm), lim))
    b_ef = conf.pair_dists(xc, wb_c, np.full(len(xc), lim))
    cost = np.minimum(np.maximum(ef_near[xc], a_db), np.maximum(db_near[xm], b_ef))
    snap = 2 * max(_snap_len(metric, density_max), _snap_len(conf, math.exp(conf.f_max)))
    tol = max(metric.tol_lat, conf.tol_lat) * bound
    return _record("highway", "some vertex within eps/16 in Dbar and ef", cost, bound, tol, snap)


def verify_theorem(G, conf, metric, params, points, rng, density_max, n_src=32, n_tgt=32):
    src = _choice(rng, len(points), n_src)
    exc, tol = [], []
    xm = metric.node(points)
    xc = conf.node(metric.point(xm))
    for s in src:
        tg = _choice(rng, len(points), n_tgt)
        dbar = metric.dists(xm[s], xm[tg])
        efd = conf.dists(xc[s], xc[tg])
        exc.append(np.abs(dbar - efd))
        tol.append(metric.tol_lat * dbar)
    exc, tol = np.concatenate(exc), np.concatenate(tol)
    snap = 2 * max(_snap_len(metric, density_max), _snap_len(conf, math.exp(conf.f_max)))
    main = _record("theorem", "|Dbar - ef| <= eps on point pairs", exc, params.eps, tol, snap)
    inter = _record("closemetrics", "|Dbar - ef| <= eps/2 on point pairs", exc,
                    params.eps / 2, tol, snap, informational=True)
    return main, inter


def _axioms(oracle, rng, name, n_nodes=12, n_triples=1000):
    S = _choice(rng, oracle.n_nodes, n_nodes)
    D = np.array([oracle.dists(s, S) for s in S])
    trip = np.array(np.unravel_index(np.arange(len(S) ** 3), (len(S),) * 3)).T
    trip = trip[_choice(rng, len(trip), n_triples)]
    x, y, z = trip.T
    viol = np.concatenate([
        np.abs(np.diag(D)),
        np.abs(D[x, y] - D[y, x]),
        np.maximum(0.0, D[x, z] - (D[x, y] + D[y, z])),
    ])
    return _record(name, "d(x,x)=0, symmetry and triangle inequality, exact", viol, 0.0, 0.0, 0.0,
                   triples=len(trip))


def verify_zero_reduction(metric, rng):
    euc = lattice_build(MetricSpec("euclidean", metric.R, metric.d), metric.h, metric.order)
    zero = ConformalField(np.zeros(tuple(euc.shape)), euc.h, euc.lo.copy(), None)
    conf0 = conformal_oracle(zero, 1, metric.order)
    S = _choice(rng, euc.n_nodes, 4)
    T = _choice(rng, euc.n_nodes, 32)
    diff = [float(np.max(np.abs(euc.W[np.isfinite(euc.W)] - conf0.W[np.isfinite(conf0.W)])))]
    diff.append(float(np.any(np.isfinite(euc.W) != np.isfinite(conf0.W))))
    for s in S:
        diff.append(float(np.max(np.abs(euc.dists(s, T) - conf0.dists(s, T)))))
    return _record("zero_reduction", "f=0 gives the euclidean lattice distances exactly",
                   np.array(diff), 0.0, 0.0, 0.0)


def verify_graph_invariants(G, metric, params, density_max):
    eps = params.eps
    diam = measure_smalldiam(metric, G.n)
    delta = G.R / (G.n * G.m) * math.sqrt(G.d)
    pts = metric.point(np.arange(metric.n_nodes))
    d0, _ = cKDTree(G.coords).query(pts)
    dbar, _ = metric.nearest_sources(np.unique(metric.node(G.coords)))
    conflicts = chord_conflicts(G)
    excess = np.array([diam - eps / 64, float(d0.max()) - delta, float(dbar.max()) - delta,
                       float(len(conflicts)), 0.0 if G.is_connected() else 1.0])
    return _record("graph_invariants",
                   "cube diameter <= eps/64, delta-net, disjoint straight edges, connected",
                   excess, 0.0, 0.0, 0.0, smalldiam=float(diam), net_d0=float(d0.max()),
                   net_dbar=float(dbar.max()), delta=delta, crossings=len(conflicts))


def run_checks(G, field, metric, params, seed=0, density_max=None, samples=None):
    """All checks in a fixed order with one seeded generator; returns the report."""
    samples = samples or {}
    rng = np.random.default_rng(seed)
    if density_max is None:
        density_max = _lattice_density_max(metric)
    conf = conformal_oracle(field, samples.get("he_refine", 1), samples.get("order_e"),
                            samples.get("budget", 3e9))
    index = EdgeIndex(G, params.eta + params.etabar + 2 * conf.h * math.sqrt(G.d))
    r_nodes = _edge_distance_all(conf, index)
    recs = [verify_params(params, G), verify_graph_invariants(G, metric, params, density_max)]
    recs += verify_graph_stage(G, metric, params.eps, rng, samples.get("graph_sources", 32),
                               samples.get("graph_targets", 32))
    recs += verify_adjacent_bounds(G, conf, params)
    recs += verify_edge_bounds(G, conf, metric, params, rng)
    recs.append(verify_trapped(G, conf, params, rng, samples.get("trapped_sources", 25),
                               samples.get("trapped_targets", 20), index, r_nodes))
    pts = sample_points(G, conf, params, rng, samples.get("highway_samples", 1024), index, r_nodes)
    recs.append(verify_highway(G, conf, metric, params, pts, density_max))
    recs += verify_theorem(G, conf, metric, params, pts, rng, density_max,
                           samples.get("theorem_sources", 32), samples.get("theorem_targets", 32))
    recs.append(_axioms(metric, rng, "axioms_metric"))
    recs.append(_axioms(conf, rng, "axioms_conformal"))
    recs.append(verify_zero_reduction(metric, rng))
    echo = {"eps": params.eps, "n": params.n, "m": params.m, "K": params.K, "tau": params.tau,
            "eta": params.eta, "etabar": params.etabar, "C0": params.C0, "C1": params.C1,
            "edges": G.n_edges, "tol_lat": metric.tol_lat, "tol_lat_e": conf.tol_lat,
            "h": metric.h, "h_e": conf.h}
    return VerificationReport(recs, echo, seed)


def _lattice_density_max(oracle):
    lens = np.linalg.norm(oracle.half_offsets, axis=1) * oracle.h
    W = oracle.W / lens[:, None]
    return float(W[np.isfinite(W)].max())
