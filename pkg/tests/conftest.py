import math

import numpy as np
import pytest
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

from conformal_approx.metric_core import make_spec


def brute_lattice(R, h, d, density, offsets):
    """Independent lattice graph: midpoint-rule weights, scipy csgraph."""
    n = int(round(2 * R / h)) + 1
    shape = (n,) * d
    N = n ** d
    idx = np.array(np.unravel_index(np.arange(N), shape)).T
    pts = -R + h * idx
    rows, cols, vals = [], [], []
    for o in offsets:
        o = np.asarray(o)
        ok = np.all((idx + o >= 0) & (idx + o < n), axis=1)
        a = np.flatnonzero(ok)
        b = np.ravel_multi_index(tuple((idx[a] + o).T), shape)
        mid = pts[a] + 0.5 * h * o
        rows.append(a)
        cols.append(b)
        vals.append(np.linalg.norm(o) * h * density(mid))
    A = coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                   shape=(N, N)).tocsr()
    return A, pts, shape


def brute_dist(A, shape, R, h, x, y):
    i = np.ravel_multi_index(tuple(np.rint((np.asarray(x) + R) / h).astype(int)), shape)
    j = np.ravel_multi_index(tuple(np.rint((np.asarray(y) + R) / h).astype(int)), shape)
    return float(dijkstra(A, indices=i)[j])


@pytest.fixture(scope="session")
def euclid_spec():
    return make_spec("euclidean", 1.0, 2)


@pytest.fixture(scope="session")
def sin_spec():
    return make_spec("conformal", 1.0, 2, density="sin_bump(0.5)")


def sin_density(p):
    return np.exp(0.5 * np.sin(math.pi * p[:, 0]) * np.sin(math.pi * p[:, 1]))


@pytest.fixture(scope="session")
def small_pipeline():
    """sin_bump metric, 2x2 coarse net, eps = 64: a fast but complete instance."""
    from conformal_approx.conformal_synth import choose_params, field_steps, synthesize
    from conformal_approx.geodesic_graph import GridPartition, build_graph
    from conformal_approx.metric_core import lattice_build, moduli
    spec = make_spec("conformal", 1.0, 2, density="sin_bump(0.5)")
    o = lattice_build(spec, 1 / 20)
    mods = moduli(o).scaled(1.1)
    part = GridPartition(1.0, 2, 2, 1, o.h)
    eps = 64.0
    G = build_graph(o, part, eps, c_pair=1)
    p = choose_params(G, mods, eps, G.info["edge_sep_d0"])
    F = synthesize(G, p, field_steps(p, 4, 40), G.digest())
    return o, G, p, F
