"""d = 3 code paths on lattices small enough for brute-force oracles."""
import math

import numpy as np
import pytest
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

from conformal_approx.conformal_synth import (ConformalField, edge_distance_field,
                                              f_ext_profile, synthesize)
from conformal_approx.distance_eval import conformal_oracle, ef_dist
from conformal_approx.errors import ResourceBudgetError
from conformal_approx.geodesic_graph import WeightedGraph, graph_dist
from conformal_approx.metric_core import lattice_build, make_spec, stencil
from conformal_approx.pipeline import RunConfig, preflight


def _brute_tensor(R, h, M, offsets):
    n = int(round(2 * R / h)) + 1
    shape = (n,) * 3
    idx = np.array(np.unravel_index(np.arange(n ** 3), shape)).T
    rows, cols, vals = [], [], []
    for o in offsets:
        o = np.asarray(o)
        ok = np.all((idx + o >= 0) & (idx + o < n), axis=1)
        a = np.flatnonzero(ok)
        rows.append(a)
        cols.append(np.ravel_multi_index(tuple((idx[a] + o).T), shape))
        vals.append(np.full(a.size, h * math.sqrt(o @ M @ o)))
    A = coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                   shape=(n ** 3, n ** 3)).tocsr()
    return A, shape


def test_riemannian_diag_matches_scipy():
    spec = make_spec("riemannian", 1.0, 3, tensor="diag(1,1,4)")
    h = 0.25
    o = lattice_build(spec, h, 2)
    A, shape = _brute_tensor(1.0, h, np.diag([1.0, 1.0, 4.0]), stencil(2, 3))
    ref = dijkstra(A, indices=[0, 40, 200])
    for row, s in zip(ref, (0, 40, 200)):
        assert np.allclose(o.distance_map(s), row, rtol=1e-12, atol=1e-12)


def test_riemannian_axis_stretch():
    o = lattice_build(make_spec("riemannian", 1.0, 3, tensor="diag(1,1,4)"), 0.25, 2)
    # density sqrt(4) = 2 along the third axis, 1 along the first
    assert o.dist([0, 0, -1], [0, 0, 1]) == pytest.approx(4.0, rel=1e-12)
    assert o.dist([-1, 0, 0], [1, 0, 0]) == pytest.approx(2.0, rel=1e-12)


def test_edf_three_d():
    coords = np.array([[-0.5, 0.0, 0.0], [0.5, 0.0, 0.0]])
    G = WeightedGraph(3, 1.0, 1, 1, 0.01, 1, coords, np.zeros(2, np.int8), np.array([0]),
                      np.array([1]), np.array([1.0]), np.array([1.0]))
    edf = edge_distance_field(G, 20, cutoff=5.0)
    pts = np.array(np.unravel_index(np.arange(edf.r.size), edf.shape)).T * edf.h + edf.lo
    t = np.clip(pts[:, 0], -0.5, 0.5)
    ref = np.linalg.norm(pts - np.column_stack([t, 0 * t, 0 * t]), axis=1)
    assert np.allclose(edf.r, ref, atol=1e-14)


def test_synthesize_three_d_exterior():
    from conformal_approx.conformal_synth import SynthParams
    coords = np.array([[-0.5, 0.0, 0.0], [0.5, 0.0, 0.0]])
    G = WeightedGraph(3, 1.0, 1, 1, 0.01, 1, coords, np.zeros(2, np.int8), np.array([0]),
                      np.array([1]), np.array([1.0]), np.array([1.0]))
    p = SynthParams(eps=64.0, R=1.0, d=3, n=1, m=1, K=1, tau=0.01, eta=0.3, etabar=0.2,
                    C0=2.0, C1=1.0, n_edges=1)
    F = synthesize(G, p, 40)
    assert F.values.shape == (41, 41, 41)
    # ratio 1 gives no bump, so f is the exterior profile of the edge distance
    assert np.array_equal(F.values.ravel(), f_ext_profile(F.edf.r, p.eta, p.etabar, p.C0, p.C1))
    c = conformal_oracle(F)
    # along the edge f = 0, so the cost is the Euclidean length (up to weight quantization)
    assert ef_dist(c, [-0.5, 0, 0], [0.5, 0, 0]) == pytest.approx(1.0, rel=1e-9)
    # leaving the tube costs at least e^{C1} per unit outside the wall band
    assert ef_dist(c, [0, 0, 0], [0, 0, 0.9]) >= math.exp(p.C1) * (0.9 - p.eta - p.etabar)


def test_conformal_zero_field_three_d():
    zero = ConformalField(np.zeros((9, 9, 9)), 0.25, np.full(3, -1.0), None)
    c = conformal_oracle(zero, order=2)
    e = lattice_build(make_spec("euclidean", 1.0, 3), 0.25, 2)
    assert np.array_equal(c.W, e.W)


def test_graph_dist_three_d():
    coords = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [1, 1, 1.0]]) - 0.5
    G = WeightedGraph(3, 1.0, 1, 1, 0.01, 1, coords, np.zeros(4, np.int8), np.array([0, 1, 2, 0]),
                      np.array([1, 2, 3, 3]), np.array([1.0, 1.0, 1.0, 5.0]), np.ones(4))
    assert graph_dist(G, 0, 3) == 3.0


def test_stated_d3_smoke_is_refused():
    cfg = RunConfig(metric="riemannian", tensor="diag(1,1,4)", d=3, eps=0.5, order=2)
    with pytest.raises(ResourceBudgetError, match="GB > budget"):
        preflight(cfg)
