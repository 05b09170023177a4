import dataclasses
import itertools
import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bymisim.bymi import (
    DetectionReport,
    Identity,
    NodeDetection,
    PcaProjection,
    build_omega,
    detect_node,
    false_discovery_proportion,
    prune_decisions,
    read_report_csv,
    score,
    threshold,
    write_report_csv,
)
from bymisim.config import RunConfig
from bymisim.pipeline import run_pipeline
from bymisim.problem import LinearTask, ParamAttack, generate_network_data
from bymisim.robust import CoordinateMedian
from bymisim.topology import UndirectedGraph

# ---------------------------------------------------------------- scoring metric


def test_identity_omega():
    np.testing.assert_array_equal(build_omega(Identity(), np.ones((3, 4))), np.eye(4))


def test_pca_on_two_dimensional_data_gives_rank_two_projector():
    rng = np.random.default_rng(0)
    d = 8
    basis = np.linalg.qr(rng.normal(size=(d, 2)))[0].T
    grads = rng.normal(size=(30, 2)) @ basis
    p = build_omega(PcaProjection(0.95), grads)
    # oracle: eigenvectors of the sample covariance with non-zero eigenvalue
    vals, vecs = np.linalg.eigh(np.cov(grads.T))
    top = vecs[:, vals > 1e-10 * vals.max()]
    assert top.shape[1] == 2
    np.testing.assert_allclose(p, top @ top.T, atol=1e-10)
    np.testing.assert_allclose(p @ p, p, atol=1e-10)
    assert round(np.trace(p)) == 2


@pytest.mark.parametrize("count,d", [(5, 10), (20, 6), (11, 10)])
def test_pca_full_fraction_rank(count, d):
    grads = np.random.default_rng(count).normal(size=(count, d))
    p = build_omega(PcaProjection(1.0), grads)
    assert np.linalg.matrix_rank(p, tol=1e-8) == min(d, count - 1)
    np.testing.assert_allclose(p, p.T, atol=1e-12)


def test_pca_degenerate_falls_back_to_identity(caplog):
    with caplog.at_level(logging.WARNING):
        p = build_omega(PcaProjection(0.95), np.tile([1.0, 2.0, 3.0], (5, 1)))
    np.testing.assert_array_equal(p, np.eye(3))
    assert "degenerate" in caplog.text


def test_pca_needs_two_gradients():
    with pytest.raises(ValueError):
        build_omega(PcaProjection(), np.ones((1, 3)))
    with pytest.raises(ValueError):
        PcaProjection(0.0)


# ---------------------------------------------------------------- score


def test_score_zero_at_center():
    v = np.array([0.3, -2.0])
    assert score(v, v, v, np.eye(2)) == 0.0


def test_score_identity_dot_product():
    assert score(np.array([1.0, 0.0]), np.array([2.0, 0.0]), np.zeros(2), np.eye(2)) == 2.0


def test_score_weighted_bilinear_form():
    g_hat = np.array([0.5, 0.5])
    out = score(g_hat + [1, 1], g_hat + [1, -1], g_hat, np.diag([2.0, 1.0]))
    assert out == pytest.approx(1.0, abs=1e-15)


# ---------------------------------------------------------------- threshold


def test_threshold_example():
    r, hits = threshold([-3, -1, 0.5, 2, 4], 0.5)
    assert r == 2.0
    assert hits.tolist() == [3, 4]


def test_threshold_all_negative():
    r, hits = threshold([-1.0, -2.0, -0.5], 0.2)
    assert r == math.inf and hits.size == 0


def test_threshold_empty_and_bad_alpha():
    assert threshold([], 0.2)[0] == math.inf
    for a in (0.0, 1.0, -0.1):
        with pytest.raises(ValueError):
            threshold([1.0], a)


def test_threshold_ties_are_detected():
    r, hits = threshold([3.0, 3.0, -1.0], 0.5)
    assert r == 1.0 or r == 3.0
    assert {0, 1} <= set(hits.tolist())


def brute_force_threshold(s, alpha):
    """Exhaustive candidate search written directly from the definition."""
    cands = sorted({abs(v) for v in s if v != 0}) + [max((abs(v) for v in s), default=0.0) + 1.0]
    for r in cands:
        neg = sum(1 for v in s if v <= -r)
        pos = sum(1 for v in s if v >= r)
        if neg / max(pos, 1) <= alpha:
            hits = [j for j, v in enumerate(s) if v >= r]
            return (r, hits) if hits else (math.inf, [])
    return math.inf, []


# subnormals excluded: scaling them can underflow to zero, which is not a positive rescaling
score_lists = st.lists(
    st.one_of(st.integers(-5, 5).map(float), st.floats(-10, 10, allow_nan=False, allow_subnormal=False)),
    min_size=1,
    max_size=8,
)
alphas = st.floats(0.01, 0.99)


@settings(max_examples=1000, deadline=None)
@given(s=score_lists, alpha=alphas)
def test_threshold_matches_brute_force(s, alpha):
    r, hits = threshold(s, alpha)
    r_ref, hits_ref = brute_force_threshold(s, alpha)
    assert hits.tolist() == hits_ref
    assert r == r_ref


@settings(max_examples=300, deadline=None)
@given(s=score_lists, alpha=alphas, c=st.floats(1e-3, 1e3))
def test_threshold_scale_invariance(s, alpha, c):
    assert threshold(s, alpha)[1].tolist() == threshold([c * v for v in s], alpha)[1].tolist()


@settings(max_examples=300, deadline=None)
@given(s=score_lists, a=alphas, b=alphas)
def test_threshold_monotone_in_alpha(s, a, b):
    lo, hi = min(a, b), max(a, b)
    assert set(threshold(s, lo)[1].tolist()) <= set(threshold(s, hi)[1].tolist())


# ---------------------------------------------------------------- FDP / Pa


def test_fdp_matches_set_counts_on_all_subsets():
    nodes = range(6)
    subsets = [set(c) for k in range(7) for c in itertools.combinations(nodes, k)]
    for det in subsets:
        for byz in subsets:
            false = sum(1 for j in det if j not in byz)
            expected = false / len(det) if det else 0.0
            assert false_discovery_proportion(det, byz) == expected


def node_detection(i, nb, detected, byz):
    return NodeDetection(i, np.array(nb), np.zeros(len(nb)), math.inf, frozenset(detected), frozenset(byz))


def test_empty_detection_everywhere():
    report = DetectionReport({0: node_detection(0, [1], [], []), 2: node_detection(2, [1], [], [])})
    assert report.avg_fdp == 0.0 and report.avg_pa == 1.0
    report.nodes[3] = node_detection(3, [4], [], [4])
    assert report.avg_fdp == 0.0
    assert report.avg_pa == pytest.approx(2 / 3)


def test_detect_node_flags_far_neighbor():
    rng = np.random.default_rng(0)
    g1 = rng.normal(scale=0.1, size=(12, 3))
    g2 = rng.normal(scale=0.1, size=(12, 3))
    g1[5] += 10
    g2[5] += 10
    nd = detect_node(0, range(1, 12), g1, g2, CoordinateMedian(), Identity(), 0.2, frozenset({5}))
    assert 5 in nd.detected and nd.pa == 1
    assert nd.neighbors.tolist() == list(range(1, 12))


def test_detect_node_without_neighbors():
    nd = detect_node(0, [], np.zeros((1, 2)), np.zeros((1, 2)), CoordinateMedian(), Identity(), 0.2)
    assert nd.detected == frozenset() and nd.threshold == math.inf


# ---------------------------------------------------------------- null behavior


def test_null_scores_are_symmetric_with_true_center():
    d, half = 10, 25
    scores = []
    for seed in range(20):
        data = generate_network_data(LinearTask(d), 500, 2 * half, set(), None, seed)
        theta = LinearTask(d).theta_star
        for ds in data:
            # at theta_star the population gradient is zero
            g1 = ds.x[:half].T @ (ds.x[:half] @ theta - ds.y[:half]) / half
            g2 = ds.x[half:].T @ (ds.x[half:] @ theta - ds.y[half:]) / half
            scores.append(score(g1, g2, np.zeros(d), np.eye(d)))
    s = np.asarray(scores)
    assert s.size >= 10_000
    for q in (0.5, 0.8, 0.9):
        t = np.quantile(np.abs(s), q)
        assert abs(np.mean(s > t) - np.mean(s < -t)) <= 0.05


def null_config(seed, d=30, alpha=0.2):
    cfg = RunConfig(seed=seed)
    cfg.byzantine = dataclasses.replace(cfg.byzantine, rho=0.0)
    cfg.detection = dataclasses.replace(cfg.detection, alpha=alpha)
    if d != 30:
        cfg.task = dataclasses.replace(cfg.task, d=d, N=200)
    return cfg


def test_null_network_fdp_at_target_level():
    fdps = [run_pipeline(null_config(seed), stop_after="detection").report.avg_fdp for seed in range(20)]
    assert np.mean(fdps) <= 0.3, f"averaged FDP {np.mean(fdps):.3f}"


def test_null_fdp_insensitive_to_dimension():
    lo = np.mean([run_pipeline(null_config(s, 30), stop_after="detection").report.avg_fdp for s in range(10)])
    hi = np.mean([run_pipeline(null_config(s, 80), stop_after="detection").report.avg_fdp for s in range(10)])
    assert abs(lo - hi) < 0.15


def test_strong_attack_is_found():
    good = 0
    for seed in range(5):
        cfg = RunConfig(seed=seed)
        cfg.byzantine = dataclasses.replace(cfg.byzantine, attack=ParamAttack(5.0, 0.5))
        rep = run_pipeline(cfg, stop_after="detection").report
        good += rep.avg_pa == 1.0 and rep.avg_fdp <= 0.4
    assert good >= 4


# ---------------------------------------------------------------- pruning decisions


def star_graph():
    return UndirectedGraph(4, frozenset({(0, 1), (0, 2), (0, 3), (1, 2)}))


def test_exact_detection_removes_true_byzantine_neighbors():
    g, byz = star_graph(), frozenset({2})
    nodes = {i: node_detection(i, g.neighbors(i), set(g.neighbors(i)) & byz, set(g.neighbors(i)) & byz)
             for i in range(4) if i not in byz}
    out = prune_decisions(DetectionReport(nodes, byz), g)
    assert out == [{2}, {2}, set(), set()]


def test_empty_report_removes_nothing():
    assert prune_decisions(DetectionReport(), star_graph()) == [set()] * 4


def test_drop_all_policy():
    g, byz = star_graph(), frozenset({2})
    nodes = {0: node_detection(0, [1, 2, 3], {3}, {2})}
    out = prune_decisions(DetectionReport(nodes, byz), g, "drop-all")
    assert out[2] == {0, 1}
    assert out[0] == {3}
    with pytest.raises(ValueError):
        prune_decisions(DetectionReport(nodes, byz), g, "some")


# ---------------------------------------------------------------- CSV


def test_report_csv_roundtrip(tmp_path):
    nodes = {
        0: NodeDetection(0, np.array([1, 2]), np.array([0.25, 3.5]), 3.5, frozenset({2}), frozenset({2})),
        1: NodeDetection(1, np.array([0]), np.array([-1.0]), math.inf, frozenset(), frozenset()),
    }
    report = DetectionReport(nodes, frozenset({2}))
    write_report_csv(tmp_path / "d.csv", report)
    rows, summary = read_report_csv(tmp_path / "d.csv")
    assert len(rows) == 3
    assert float(rows[1]["score"]) == 3.5 and rows[1]["detected"] == "1" and rows[1]["byzantine"] == "1"
    assert float(rows[2]["threshold"]) == math.inf
    assert float(summary["fdp"]) == report.avg_fdp and float(summary["pa"]) == report.avg_pa
