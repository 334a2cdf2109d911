import math

import numpy as np
import pytest

from conformal_approx.verify import (CheckRecord, VerificationReport, _record, run_checks,
                                     stratified_points, verify_zero_reduction)

SMALL = dict(graph_sources=8, graph_targets=8, theorem_sources=8, theorem_targets=8,
             trapped_sources=5, trapped_targets=4, highway_samples=64)


@pytest.fixture(scope="module")
def report(small_pipeline):
    o, G, p, F = small_pipeline
    return run_checks(G, F, o, p, seed=0, samples=SMALL)


def test_record_budget_decomposition():
    r = _record("x", "claim", [0.1, 0.5, 0.2], 0.3, [0.1, 0.2, 0.0], 0.05)
    assert r.samples == 3
    # worst margin is at the second sample: 0.3 + 0.2 + 0.05 - 0.5
    assert r.excess == 0.5 and r.tol_term == 0.2
    assert r.budget == pytest.approx(0.55)
    assert r.margin == pytest.approx(0.05) and r.passed


def test_record_nan_and_empty_fail():
    assert not _record("x", "c", [0.0, math.nan], 1.0, 0.0, 0.0).passed
    empty = _record("x", "c", [], 1.0, 0.0, 0.0)
    assert empty.samples == 0 and not empty.passed


def test_record_zero_budget_exact():
    assert _record("x", "c", [0.0, 0.0], 0.0, 0.0, 0.0).passed
    assert not _record("x", "c", [1e-300], 0.0, 0.0, 0.0).passed


def test_stratified_points_cover_cells():
    rng = np.random.default_rng(0)
    pts = stratified_points(rng, 1.0, 2, 8)
    cells = np.floor((pts + 1) / 0.25).astype(int)
    assert len({tuple(c) for c in cells}) == 64
    assert np.all(np.abs(pts) <= 1)


def test_report_same_seed_identical(small_pipeline, report):
    o, G, p, F = small_pipeline
    again = run_checks(G, F, o, p, seed=0, samples=SMALL)
    assert again.to_text(["a"]) == report.to_text(["a"])


def test_report_has_every_check_and_no_empty(report):
    names = [r.name for r in report.records]
    for want in ("params", "graph_invariants", "graph_stage", "graph_lower", "adjacent_upper",
                 "adjacent_lower", "trapped", "highway", "axioms_metric", "axioms_conformal",
                 "zero_reduction"):
        assert want in names
    assert all(r.samples > 0 for r in report.records)


def test_coarse_partition_is_caught(report):
    """The fixture's 2x2 partition is far too coarse for the eps/64 cube diameter."""
    rec = next(r for r in report.records if r.name == "graph_invariants")
    assert not rec.passed
    assert rec.extra["smalldiam"] > 64.0 / 64
    assert not report.passed and report.worst().name == "graph_invariants"
    assert report.summary().startswith("FAIL")


def test_remaining_checks_pass(report):
    bad = [r.name for r in report.records
           if not r.passed and not r.informational and r.name != "graph_invariants"]
    assert bad == []


def test_summary_and_worst_on_passing_report():
    recs = [CheckRecord("a", "", 1, 0.0, 1.0, 0.0, 0.0, True, 1.0),
            CheckRecord("b", "", 1, 0.0, 0.5, 0.0, 0.0, True, 0.5),
            CheckRecord("c", "", 1, 9.0, 0.0, 0.0, 0.0, False, -9.0, informational=True)]
    rep = VerificationReport(recs, {}, 7)
    assert rep.passed and rep.worst().name == "b"
    assert rep.summary() == "PASS 2/2 checks; worst=b margin=0.5"
    assert "seed = 7" in rep.to_text()


def test_zero_reduction_exact(small_pipeline):
    o, *_ = small_pipeline
    rec = verify_zero_reduction(o, np.random.default_rng(0))
    assert rec.passed and rec.excess == 0.0
