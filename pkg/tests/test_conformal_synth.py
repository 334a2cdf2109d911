import math

import numpy as np
import pytest

from conformal_approx.conformal_synth import (ConformalField, SynthParams, bump_profile,
                                              choose_params, edge_distance_field,
                                              edge_log_ratios, f_ext_profile, field_steps,
                                              plateau_height, shrink_etabar, synthesize,
                                              wall_height)
from conformal_approx.errors import ConfigError, ConstructionError, FormatError
from conformal_approx.geodesic_graph import GridPartition, WeightedGraph, build_graph
from conformal_approx.metric_core import lattice_build, make_spec, moduli


def smooth(t):
    t = np.clip(t, 0, 1)
    return 3 * t ** 2 - 2 * t ** 3


def seg_dist(p, a, b):
    ab = b - a
    t = np.clip(((p - a) @ ab) / (ab @ ab), 0, 1)
    return np.linalg.norm(p - (a + t[:, None] * ab) if p.ndim == 2 else p - (a + t * ab), axis=-1)


# -- parameter arithmetic ----------------------------------------------------------

def test_c1_example():
    assert plateau_height(0.2, 640) == pytest.approx(math.log(2), abs=1e-15)


def test_c0_example_and_shrink():
    assert wall_height(0.2, 1 / 1280) == pytest.approx(math.log(2), abs=1e-15)
    # equal heights violate C_0 > C_1; halving etabar gives log 4
    assert not wall_height(0.2, 1 / 1280) > plateau_height(0.2, 640)
    assert wall_height(0.2, 1 / 2560) == pytest.approx(math.log(4), abs=1e-15)
    assert wall_height(0.2, 1 / 2560) > plateau_height(0.2, 640)
    # the shrink rule: half of the smallest candidate
    assert shrink_etabar(1.0, 1.0, 640) == pytest.approx(1 / 5120)


def test_c0_exceeds_c1_iff_etabar_small():
    for nm in (3, 17, 640):
        for etabar in (0.1 / nm, 0.49 / nm, 0.51 / nm):
            assert (wall_height(1.0, etabar) > plateau_height(1.0, nm)) == (etabar < 1 / (2 * nm))


def _toy_graph(ratio=1.0):
    coords = np.array([[-0.5, 0.0], [0.5, 0.0], [0.0, 0.5]])
    eu, ev = np.array([0, 1]), np.array([1, 2])
    ell = np.linalg.norm(coords[ev] - coords[eu], axis=1)
    return WeightedGraph(2, 1.0, 2, 2, 0.01, 1, coords, np.zeros(3, np.int8), eu, ev,
                         ell * ratio, ell)


class _Mods:
    def psi(self, eps):
        return eps

    def sup_ratio(self, lo, hi, shift=0.0):
        return 1.0


def test_choose_params_euclid_eta():
    G = _toy_graph(1.0)
    eps = 200.0
    p = choose_params(G, _Mods(), eps, edge_sep=10.0)
    assert p.etasmol_bound == pytest.approx(eps / 512)
    assert p.eta == pytest.approx(eps / 1024)
    assert p.violations() == []


def test_choose_params_errors():
    G = _toy_graph(1.0)
    with pytest.raises(ConfigError):
        choose_params(G, _Mods(), 0.0, 1.0)
    with pytest.raises(ConstructionError, match="smallwe"):
        choose_params(G, _Mods(), 1.0, 10.0)


def test_params_round_trip():
    p = choose_params(_toy_graph(1.0), _Mods(), 200.0, 10.0)
    text = p.to_kv(["config=x"])
    assert "slack.C0C1" in text
    q = SynthParams.from_kv(text)
    assert q == p
    with pytest.raises(FormatError):
        SynthParams.from_kv("eps = 1\n")


def test_field_steps_nest():
    p = choose_params(_toy_graph(1.0), _Mods(), 200.0, 10.0)
    s = field_steps(p, 4, 120)
    assert s % 120 == 0
    assert 2 * p.R / s <= p.etabar / 4


# -- profiles -----------------------------------------------------------------------

def test_f_ext_bands():
    eta, etabar, C0, C1 = 0.1, 0.02, 3.0, 1.0
    f = lambda r: float(f_ext_profile(np.array([r]), eta, etabar, C0, C1)[0])
    assert f(eta) == C0
    assert f(2 * eta) == C1
    assert f(0.0) == 0.0
    assert f(eta - etabar) == 0.0
    assert f(eta + etabar / 2) == C0 and f(eta - etabar / 2) == C0
    assert f(eta + etabar) == C1
    r = np.linspace(0, eta, 400)
    assert np.all(np.diff(f_ext_profile(r, eta, etabar, C0, C1)) >= 0)
    r = np.linspace(eta, 2 * eta, 400)
    vals = f_ext_profile(r, eta, etabar, C0, C1)
    assert np.all(np.diff(vals) <= 0) and vals.min() >= C1 and vals.max() <= C0


def test_bump_profile():
    eta = 0.08
    assert bump_profile(eta / 2, eta) == 1.0
    assert bump_profile(0.0, eta) == 1.0
    assert bump_profile(eta, eta) == 0.0
    mid = float(bump_profile(0.75 * eta, eta))
    assert 0 < mid < 1
    assert mid == pytest.approx(1 - smooth(0.5))


def test_edge_log_ratios():
    G = _toy_graph(2.0)
    assert np.allclose(edge_log_ratios(G), math.log(2))
    G.w[0] = 0.0
    with pytest.raises(ConstructionError):
        edge_log_ratios(G)


# -- edge distance field ----------------------------------------------------------

def test_edf_examples():
    coords = np.array([[-0.5, 0.0], [0.5, 0.0]])
    G = WeightedGraph(2, 1.0, 1, 1, 0.01, 1, coords, np.zeros(2, np.int8), np.array([0]),
                      np.array([1]), np.array([1.0]), np.array([1.0]))
    edf = edge_distance_field(G, 40, cutoff=5.0)
    grid = (np.array(np.unravel_index(np.arange(41 * 41), edf.shape)).T * edf.h - 1.0)
    above = np.flatnonzero(np.all(np.isclose(grid, [0.0, 0.3]), axis=1))[0]
    assert edf.r[above] == pytest.approx(0.3, abs=1e-15)
    beyond = np.flatnonzero(np.all(np.isclose(grid, [0.9, 0.3]), axis=1))[0]
    assert edf.r[beyond] == pytest.approx(math.hypot(0.4, 0.3), abs=1e-15)
    assert edf.nearest[beyond] == 0


@pytest.fixture(scope="module")
def synth_case(small_pipeline):
    _, G, p, F = small_pipeline
    return G, p, F


def test_edf_against_dense_sampling(synth_case):
    G, p, F = synth_case
    edf = F.edf
    rng = np.random.default_rng(0)
    A, B = G.segments()
    t = np.linspace(0, 1, 41)
    dense = (A[:, None] + t[None, :, None] * (B - A)[:, None]).reshape(-1, 2)
    pitch = np.max(np.linalg.norm(B - A, axis=1)) / 40
    pts_all = np.array(np.unravel_index(np.arange(edf.r.size), edf.shape)).T * edf.h + edf.lo
    for n in rng.choice(edf.r.size, 300, replace=False):
        ref = np.linalg.norm(dense - pts_all[n], axis=1).min()
        if edf.r[n] < edf.cutoff:
            assert edf.r[n] <= ref + 1e-12
            assert ref - edf.r[n] <= 2 * pitch
        else:
            assert ref >= edf.cutoff - 1e-12


def test_edf_lipschitz(synth_case):
    _, _, F = synth_case
    r = F.edf.r.reshape(F.edf.shape)
    for a in range(2):
        assert np.abs(np.diff(r, axis=a)).max() <= F.h * (1 + 1e-9)


def test_region_classification(synth_case):
    """f at every sampled node equals the band formula recomputed by brute force."""
    G, p, F = synth_case
    A, B = G.segments()
    vals = edge_log_ratios(G)
    rng = np.random.default_rng(1)
    pts_all = np.array(np.unravel_index(np.arange(F.values.size), F.shape)).T * F.h + F.lo
    near = np.flatnonzero(F.edf.r < p.eta)
    pick = np.concatenate([rng.choice(F.values.size, 400, replace=False),
                           rng.choice(near, 400, replace=False)])
    fv = F.values.ravel()
    for n in pick:
        x = pts_all[n]
        de = np.array([seg_dist(x, a, b) for a, b in zip(A, B)])
        r = de.min()
        ext = f_ext_profile(np.array([r]), p.eta, p.etabar, p.C0, p.C1)[0]
        bump = 0.0
        if r < p.eta:
            om = 1 - smooth((de - r) / (p.eta / 2))
            bump = (1 - smooth((r - p.eta / 2) / (p.eta / 2))) * (om @ vals) / om.sum()
        assert fv[n] == pytest.approx(ext + bump, abs=1e-12)


def test_far_field_plateau_and_bounds(synth_case):
    G, p, F = synth_case
    far = F.edf.r.reshape(F.shape) >= p.eta + p.etabar
    assert np.all(F.values[far] == p.C1)
    vals = edge_log_ratios(G)
    assert np.abs(F.values).max() <= p.C0 + np.abs(vals).max() + 1e-12
    assert F.values.max() <= p.C0 + max(vals.max(), 0) + 1e-12


def test_field_max_matches_band_maximum(synth_case):
    """Grid maximum against the analytic maximum of wall plus largest bump core."""
    G, p, F = synth_case
    vmax = max(0.0, edge_log_ratios(G).max())
    r = np.linspace(0, 2 * p.eta, 200001)
    band = f_ext_profile(r, p.eta, p.etabar, p.C0, p.C1) + bump_profile(r, p.eta) * vmax
    top = band.max()
    assert F.values.max() <= top + 1e-12
    assert F.values.max() >= p.C0


def test_field_continuity(synth_case):
    _, p, F = synth_case
    v = F.values
    # smoothstep slope is 3/2 per unit of the normalised band
    lip_ext = 1.5 * max(p.C0, abs(p.C0 - p.C1)) / (p.etabar / 2)
    for a in range(2):
        assert np.abs(np.diff(v, axis=a)).max() <= lip_ext * F.h * 1.01 + 1e-12


def test_euclid_field_is_exterior_only():
    o = lattice_build(make_spec("euclidean", 1.0, 2), 1 / 20)
    G = build_graph(o, GridPartition(1.0, 2, 2, 1, o.h), 64.0, c_pair=1)

    class M:
        def psi(self, eps):
            return 2.0

        def sup_ratio(self, lo, hi, shift=0.0):
            return 1.1
    p = choose_params(G, M(), 64.0, G.info["edge_sep_d0"])
    F = synthesize(G, p, field_steps(p, 4, 40))
    assert np.array_equal(F.values.ravel(),
                          f_ext_profile(F.edf.r, p.eta, p.etabar, p.C0, p.C1))
    assert F.values.min() == 0.0


def test_synthesize_rejects_coarse_grid(synth_case):
    G, p, _ = synth_case
    with pytest.raises(ConfigError):
        synthesize(G, p, 40)


def test_field_export_round_trip(synth_case, tmp_path):
    _, p, F = synth_case
    for binary in (True, False):
        path = tmp_path / f"f{binary}.grid"
        F.export(path, comments=["config=z"], binary=binary)
        G2 = ConformalField.load(path, p)
        assert np.array_equal(G2.values, F.values)
        assert G2.h == F.h and G2.comments == ["config=z"]
