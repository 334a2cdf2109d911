import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conformal_approx.errors import ConfigError, OracleError, OutOfBoxError, ResourceBudgetError
from conformal_approx.metric_core import (Path, lattice_build, lattice_tolerance, load_spec,
                                          make_spec, moduli, path_length, stencil)

from conftest import brute_dist, brute_lattice, sin_density


# -- lattice_build -----------------------------------------------------------

def test_euclid_5x5_diagonal_weight(euclid_spec):
    o = lattice_build(euclid_spec, 0.5, order=2)
    assert tuple(o.shape) == (5, 5)
    a, b = o.node([0, 0]), o.node([0.5, 0.5])
    assert o.step_weight(a, b) == pytest.approx(0.5 * math.sqrt(2), rel=1e-14)


def test_conformal_log2_axis_weight():
    spec = make_spec("conformal", 1.0, 2, density=f"constant({math.log(2)!r})")
    o = lattice_build(spec, 0.5, order=2)
    assert o.step_weight(o.node([0, 0]), o.node([0.5, 0])) == pytest.approx(1.0, rel=1e-14)


def test_riemannian_diag_axis_weight():
    spec = make_spec("riemannian", 1.0, 2, tensor="diag(4,1)")
    o = lattice_build(spec, 0.5, order=2)
    assert o.step_weight(o.node([0, 0]), o.node([0.5, 0])) == pytest.approx(1.0, rel=1e-14)
    assert o.step_weight(o.node([0, 0]), o.node([0, 0.5])) == pytest.approx(0.5, rel=1e-14)


def test_build_errors(euclid_spec):
    with pytest.raises(ConfigError):
        lattice_build(euclid_spec, 0.0)
    with pytest.raises(ConfigError):
        lattice_build(euclid_spec, 0.3)       # does not divide 2R
    with pytest.raises(ResourceBudgetError):
        lattice_build(euclid_spec, 1e-4, budget=1e6)
    with pytest.raises(OracleError, match=r"\[") :
        make_spec("riemannian", 1.0, 2, tensor="diag(1,-1)")


def test_weights_positive_and_symmetric(sin_spec):
    o = lattice_build(sin_spec, 0.1)
    W = o.W[np.isfinite(o.W)]
    assert np.all(W > 0)
    rng = np.random.default_rng(1)
    for _ in range(50):
        a = int(rng.integers(o.n_nodes))
        ia = np.array(np.unravel_index(a, tuple(o.shape)))
        for off in o.offsets:
            ib = ia + off
            if np.all((ib >= 0) & (ib < o.shape)):
                b = int(np.ravel_multi_index(tuple(ib), tuple(o.shape)))
                assert o.step_weight(a, b) == o.step_weight(b, a)


# -- dist / geodesic ---------------------------------------------------------

def test_dist_euclid_axis(euclid_spec):
    o = lattice_build(euclid_spec, 0.1)
    assert o.dist([0, 0], [1, 0]) == pytest.approx(1.0, rel=o.tol_lat)


def test_dist_constant_density_doubles():
    spec = make_spec("conformal", 1.0, 2, density=f"constant({math.log(2)!r})")
    o = lattice_build(spec, 0.1)
    assert o.dist([0, 0], [1, 0]) == pytest.approx(2.0, rel=o.tol_lat)


def test_out_of_box(euclid_spec):
    o = lattice_build(euclid_spec, 0.5)
    with pytest.raises(OutOfBoxError):
        o.dist([0, 0], [1.5, 0])


@pytest.mark.parametrize("order", [1, 2, 3])
def test_dist_matches_scipy_same_lattice(sin_spec, order):
    """Package Dijkstra against scipy csgraph on an independently built lattice."""
    h = 0.1
    o = lattice_build(sin_spec, h, order=order)
    A, _, shape = brute_lattice(1.0, h, 2, sin_density, stencil(order, 2))
    for x, y in [((-0.5, -0.5), (0.5, 0.5)), ((-1, -1), (1, 1)), ((0.3, -0.9), (-0.7, 0.2))]:
        assert o.dist(x, y) == pytest.approx(brute_dist(A, shape, 1.0, h, x, y), rel=1e-12)


def test_dist_sin_bump_against_refined_oracle(sin_spec):
    """Coarse value agrees with a 4x finer brute-force lattice within the stencil bound."""
    o = lattice_build(sin_spec, 0.1)
    fine_h = 0.025
    A, _, shape = brute_lattice(1.0, fine_h, 2, sin_density, stencil(3, 2))
    x, y = (-0.5, -0.5), (0.5, 0.5)
    ref = brute_dist(A, shape, 1.0, fine_h, x, y)
    coarse = o.dist(x, y)
    assert abs(coarse - ref) <= 2 * o.tol_lat * ref


def test_geodesic_straight_axis(euclid_spec):
    o = lattice_build(euclid_spec, 0.1, order=2)
    p = o.geodesic([0, 0], [1, 0])
    assert np.allclose(p.points[:, 1], 0.0)
    assert p.metric_length == pytest.approx(1.0, rel=1e-12)
    q = o.geodesic([0, 0], [1, 0])
    assert np.array_equal(p.nodes, q.nodes)


def test_geodesic_length_equals_dist(sin_spec):
    o = lattice_build(sin_spec, 0.1)
    for x, y in [((-0.9, 0.1), (0.6, 0.8)), ((1, 1), (-1, -0.3))]:
        p = o.geodesic(x, y)
        assert p.metric_length == o.dist(x, y)
        assert o.path_weight(p.nodes) == p.metric_length


def test_geodesic_detours_around_bump():
    spec = make_spec("conformal", 1.0, 2, density="gaussian_bump(1.5,0.3)")
    o = lattice_build(spec, 0.05)
    p = o.geodesic([-1, 0], [1, 0])
    straight = path_length(spec, Path([[-1, 0], [1, 0]]))
    assert p.metric_length < straight
    assert np.abs(p.points[:, 1]).max() > 0.2


# -- tolerance ----------------------------------------------------------------

def test_tol_lat_order3_matches_half_angle():
    alpha = math.atan(0.5)
    assert lattice_tolerance(3, 2) == pytest.approx(1 / math.cos(alpha / 2) - 1, abs=1e-6)
    assert lattice_tolerance(1, 2) == pytest.approx(math.sqrt(2) - 1, abs=1e-6)
    assert lattice_tolerance(2, 2) == pytest.approx(1 / math.cos(math.pi / 8) - 1, abs=1e-6)


def test_euclid_ratio_within_tol(euclid_spec):
    o = lattice_build(euclid_spec, 0.1)
    rng = np.random.default_rng(2)
    pts = o.point(rng.integers(0, o.n_nodes, size=(200, 2)).ravel()).reshape(200, 2, 2)
    for x, y in pts:
        e = np.linalg.norm(x - y)
        if e == 0:
            continue
        r = o.dist(x, y) / e
        assert 1 - 1e-12 <= r <= 1 + o.tol_lat + 1e-12


def test_refinement_monotone(euclid_spec):
    coarse = lattice_build(euclid_spec, 0.2)
    fine = lattice_build(euclid_spec, 0.1)
    rng = np.random.default_rng(3)
    nodes = rng.integers(0, coarse.n_nodes, size=(100, 2))
    for a, b in nodes:
        x, y = coarse.point(a), coarse.point(b)
        assert fine.dist(x, y) <= coarse.dist(x, y) + 1e-12


# -- metric axioms -------------------------------------------------------------

@pytest.fixture(scope="module")
def sin_oracle(sin_spec):
    return lattice_build(sin_spec, 0.1)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 21 * 21 - 1), min_size=3, max_size=3))
def test_axioms_property(sin_oracle, triple):
    o = sin_oracle
    x, y, z = (o.point(t) for t in triple)
    dxy, dyx = o.dist(x, y), o.dist(y, x)
    assert o.dist(x, x) == 0.0
    assert dxy == dyx
    assert o.dist(x, z) <= dxy + o.dist(y, z)


def test_axioms_1000_triples(sin_oracle):
    o = sin_oracle
    rng = np.random.default_rng(4)
    nodes = rng.integers(0, o.n_nodes, size=(1000, 3))
    maps = {}

    def d(a, b):
        s, t = min(a, b), max(a, b)
        if s not in maps:
            maps[s] = o.distance_map(s).copy()
        return maps[s][t]
    for a, b, c in nodes:
        assert d(a, b) == d(b, a)
        assert d(a, c) <= d(a, b) + d(b, c)


# -- path_length ----------------------------------------------------------------

def test_path_length_examples(euclid_spec):
    p = Path([[0, 0], [1, 0], [1, 1]])
    assert path_length(euclid_spec, p, "d0") == 2.0
    zero = make_spec("conformal", 1.0, 2, density="constant(0)")
    assert path_length(zero, p) == pytest.approx(2.0, rel=1e-12)
    three = make_spec("conformal", 1.0, 2, density=f"constant({math.log(3)!r})")
    seg = Path([[-0.3, 0.1], [0.8, -0.6]])
    assert path_length(three, seg) == pytest.approx(3 * seg.d0_length, rel=1e-9)


def test_path_length_field_object():
    class F:
        def interp(self, pts):
            return np.full(len(pts), math.log(3))
    p = Path([[0, 0], [0.5, 0.5], [1, 0]])
    assert path_length(None, p, F()) == pytest.approx(3 * p.d0_length, rel=1e-9)


def test_path_rejects_bad_input(euclid_spec):
    with pytest.raises(ValueError):
        Path([[0, 0], [0, 0]])
    with pytest.raises(ValueError):
        path_length(euclid_spec, Path([[0, 0], [1, 0]]), "bogus")


@settings(max_examples=30, deadline=None)
@given(st.floats(-2, 2), st.lists(st.floats(-1, 1), min_size=4, max_size=4))
def test_constant_field_scales_length(c, xy):
    spec = make_spec("conformal", 1.0, 2, density=f"constant({c!r})")
    a, b = np.array(xy[:2]), np.array(xy[2:])
    if np.linalg.norm(a - b) < 1e-6:
        return
    p = Path([a, b])
    assert path_length(spec, p) == pytest.approx(math.exp(c) * p.d0_length, rel=1e-9)


# -- moduli -------------------------------------------------------------------

def test_moduli_euclid(euclid_spec):
    o = lattice_build(euclid_spec, 0.25)
    m = moduli(o)
    assert np.all(np.diff(m.phi_values) >= 0)
    pts = o.point(np.arange(o.n_nodes))
    E = np.linalg.norm(pts[:, None] - pts[None], axis=2)
    realised = np.array([E[E <= s * (1 + 1e-12)].max() for s in m.scales])
    assert np.all(m.phi_values >= realised - 1e-12)
    assert np.all(m.phi_values <= realised * (1 + o.tol_lat) + 1e-12)
    for th in (0.3, 0.7, 1.9):
        assert m.psi(th) <= th + 1e-12
        assert m.psi(th) >= th / (1 + o.tol_lat) - o.h


def test_moduli_density_bound():
    spec = make_spec("conformal", 1.0, 2, density="gaussian_bump(0.6931,0.5)")
    o = lattice_build(spec, 0.25)
    m = moduli(o)
    assert np.all(m.phi_values <= 2 * m.scales * (1 + o.tol_lat))


def test_moduli_sin_exhaustive(sin_spec):
    """Tabulated phi equals an exhaustive pair scan on a coarse lattice."""
    o = lattice_build(sin_spec, 0.25)
    m = moduli(o, max_sources=o.n_nodes)
    pts = o.point(np.arange(o.n_nodes))
    D = np.array([o.distance_map(s) for s in range(o.n_nodes)])
    E = np.linalg.norm(pts[:, None] - pts[None], axis=2)
    for ell, phi in zip(m.scales, m.phi_values):
        assert phi == pytest.approx(D[E <= ell * (1 + 1e-12)].max(), rel=1e-12)


def test_moduli_consistency_and_inverse(sin_spec):
    o = lattice_build(sin_spec, 0.2)
    m = moduli(o)
    rng = np.random.default_rng(5)
    for th in (0.2, 0.5, 1.0):
        r = m.psi(th)
        for _ in range(30):
            a = int(rng.integers(o.n_nodes))
            pa = o.point(a)
            dm = o.distance_map(a)
            close = np.linalg.norm(o.point(np.arange(o.n_nodes)) - pa, axis=1) <= r
            assert dm[close].max() <= th + 1e-12
    step = np.max(np.diff(m.scales))
    for ell, phi in zip(m.scales, m.phi_values):
        assert m.psi(phi) >= ell - step


def test_moduli_errors(euclid_spec):
    o = lattice_build(euclid_spec, 0.5)
    with pytest.raises(ValueError):
        moduli(o, scales=[])
    with pytest.raises(ValueError):
        moduli(o, scales=[0.5, 0.2])


# -- spec files ----------------------------------------------------------------

def test_load_spec_with_grid(tmp_path):
    from conformal_approx.formats import write_grid
    vals = np.full((5, 5), math.log(2))
    write_grid(tmp_path / "g.grid", vals, 0.5, [-1, -1])
    (tmp_path / "m.cfg").write_text("metric = conformal\nR = 1\nd = 2\ndensity = grid:g.grid\n")
    spec = load_spec(tmp_path / "m.cfg")
    o = lattice_build(spec, 0.5, order=2)
    assert o.step_weight(o.node([0, 0]), o.node([0.5, 0])) == pytest.approx(1.0, rel=1e-12)


def test_load_spec_errors(tmp_path):
    (tmp_path / "a.cfg").write_text("metric = conformal\nR = 1\nd = 2\ndensity = grid:missing.grid\n")
    with pytest.raises(ConfigError):
        load_spec(tmp_path / "a.cfg")
    (tmp_path / "b.cfg").write_text("metric = conformal\nR = 1\nd = 2\ndensity = nosuch(1)\n")
    with pytest.raises(ConfigError):
        load_spec(tmp_path / "b.cfg")
