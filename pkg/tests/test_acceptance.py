"""Acceptance suite: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -s`` or ``python tests/test_acceptance.py``.
A criterion that does not hold is reported as a failing test, never skipped.
"""

import math
import sys
import time
from functools import lru_cache

import numpy as np
import pytest

from conftest import record_acceptance
from oracles import brute_force_metric, golden_section, union_find_clusters
from sqems.bench import (
    BenchConfig,
    SyntheticSpec,
    baseline_radial_lsq,
    error_metric,
    make_compound,
    make_instance,
    random_superquadric,
)
from sqems.ems import candidates_axis_mismatch, candidates_duality, ems_fit
from sqems.geometry import (
    Pose,
    Superquadric,
    implicit_gradient,
    implicit_value,
    radial_distance,
    radial_project,
    sample_surface_equidistant,
)
from sqems.gum import Correspondences, GumConfig, GumState, negative_log_likelihood, sigma2_update
from sqems.hier import euclidean_cluster, recover_hierarchy, segment_points

INSTANCES = 50
SUCCESS = 0.02

# (kind, level, baseline starts)
SUITES = {
    1: ("partial", 1.0, 3),
    2: ("partial", 0.4, 1),
    3: ("outlier", 0.4, 3),
    4: ("noise", 0.01, 3),
}


@lru_cache(maxsize=None)
def run_suite(number):
    kind, level, inits = SUITES[number]
    cfg = BenchConfig()
    ems_err, base_err, traces = [], [], []
    start = time.perf_counter()
    for i in range(INSTANCES):
        _, cloud, score, _ = make_instance(kind, level, i, cfg)
        res = ems_fit(cloud, cfg.fit)
        base = baseline_radial_lsq(cloud, cfg.fit, n_inits=inits)
        ems_err.append(error_metric(score, res.superquadric, cfg.metric_spacing))
        base_err.append(error_metric(score, base.superquadric, cfg.metric_spacing))
        traces.append(res.phases())
    elapsed = time.perf_counter() - start
    return np.array(ems_err), np.array(base_err), traces, elapsed


@pytest.mark.slow
def test_criterion_01_clean_recovery():
    ems, _, _, elapsed = run_suite(1)
    rate = np.mean(ems < SUCCESS)
    ok = rate >= 0.95 and elapsed < 120.0
    record_acceptance(1, ok, f"clean success {rate:.0%} (need >= 95%), suite {elapsed:.0f}s (need < 120s)")
    assert ok


@pytest.mark.slow
def test_criterion_02_partial_data():
    ems, base, _, _ = run_suite(2)
    a, b = np.mean(ems < SUCCESS), np.mean(base < SUCCESS)
    ok = a - b >= 0.20
    record_acceptance(2, ok, f"partial 0.4 success EMS {a:.0%} vs single-start LSQ {b:.0%} (need gap >= 20 pts)")
    assert ok


@pytest.mark.slow
def test_criterion_03_outliers():
    ems, base, _, _ = run_suite(3)
    a, b = ems.mean(), base.mean()
    ok = a < 0.05 and b >= 2.0 * a
    record_acceptance(3, ok, f"outlier 0.4 mean error EMS {a:.4f} (need < 0.05), LSQ {b:.4f} (need >= 2x EMS)")
    assert ok


@pytest.mark.slow
def test_criterion_04_noise():
    ems, base, _, _ = run_suite(4)
    a, b = ems.mean(), base.mean()
    wins = int(np.sum(ems < base))
    ok = a < 0.15 and a < b
    record_acceptance(
        4, ok,
        f"noise 0.01 mean error EMS {a:.5f} vs LSQ {b:.5f} (need < 0.15 and strictly below); "
        f"EMS lower on {wins}/{INSTANCES}",
    )
    assert ok


@pytest.mark.slow
def test_criterion_05_em_descent():
    worst, steps = -math.inf, 0
    for number in SUITES:
        for phases in run_suite(number)[2]:
            for trace in phases:
                if len(trace) > 1:
                    worst = max(worst, float(np.max(np.diff(trace))))
                    steps += len(trace) - 1
    ok = worst <= 1e-9
    record_acceptance(5, ok, f"largest within-phase NLL increase {worst:.3g} over {steps} steps (need <= 1e-9)")
    assert ok


def _gap(a, b, spacing=0.02):
    """Largest radial distance between the two sampled surfaces, both ways."""
    ab = np.max(radial_distance(b, sample_surface_equidistant(a, spacing).points))
    ba = np.max(radial_distance(a, sample_surface_equidistant(b, spacing).points))
    return float(max(ab, ba))


def test_criterion_06_exact_similarity():
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(5):
        e = float(rng.uniform(0.1, 1.9))
        scales = rng.uniform(0.5, 2.0, size=3)
        pose = Pose.from_rotvec(rng.normal(size=3), rng.uniform(-1, 1, size=3))
        sq = Superquadric(e, e, *scales, pose=pose)
        for cand in candidates_axis_mismatch(sq):
            worst = max(worst, _gap(cand.superquadric, sq) / scales.max())
        for eps2 in (0.0, 2.0):
            a = float(rng.uniform(0.5, 2.0))
            sq = Superquadric(float(rng.uniform(0.1, 1.9)), eps2, a, a, float(rng.uniform(0.5, 2.0)), pose=pose)
            cand = candidates_duality(sq)[0].superquadric
            worst = max(worst, _gap(cand, sq) / max(sq.scales.max(), cand.scales.max()))
    ok = worst <= 1e-6
    record_acceptance(6, ok, f"largest candidate surface deviation {worst:.2e} x scale (need <= 1e-6)")
    assert ok


def test_criterion_07_sigma2_stationarity():
    rng = np.random.default_rng(7)
    sq = Superquadric(1, 1, 1, 1, 1)
    cfg = GumConfig(0.1, 8.0)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(5, 200))
        z = rng.uniform(0.0, 1.0, size=n)
        r2 = rng.exponential(rng.uniform(1e-4, 1.0), size=n)
        corr = Correspondences(None, z, r2)
        s2 = sigma2_update(corr)
        f = lambda log_s2: negative_log_likelihood(sq, np.zeros((n, 3)), cfg, GumState(math.exp(log_s2)), corr)
        lo, hi = math.log(r2.min() / 3.0) - 1.0, math.log(r2.max() / 3.0) + 1.0
        ref = math.exp(golden_section(f, lo, hi))
        worst = max(worst, abs(s2 - ref) / ref)
    ok = worst <= 1e-6
    record_acceptance(7, ok, f"largest relative gap to 1-D minimiser {worst:.2e} over 100 sets (need <= 1e-6)")
    assert ok


def test_criterion_08_metric_oracle():
    rng = np.random.default_rng(8)
    worst, worst_rigid = 0.0, 0.0
    for _ in range(20):
        sq = random_superquadric(SyntheticSpec(), rng)
        cloud = sq.translation + rng.normal(scale=1.5, size=(50, 3))
        spacing = 0.15
        samples = sample_surface_equidistant(sq, spacing).points
        worst = max(worst, abs(error_metric(cloud, sq, spacing) - brute_force_metric(cloud, samples)))
        g = Pose.from_rotvec(rng.normal(size=3), rng.uniform(-3, 3, size=3))
        moved = error_metric(g.to_world(cloud), sq.transformed(g), spacing)
        worst_rigid = max(worst_rigid, abs(moved - error_metric(cloud, sq, spacing)))
    ok = worst <= 1e-12 and worst_rigid <= 1e-9
    record_acceptance(8, ok, f"brute-force gap {worst:.1e} (need <= 1e-12), rigid gap {worst_rigid:.1e} (need <= 1e-9)")
    assert ok


def test_criterion_09_hierarchy():
    cloud, labels, _ = make_compound(200)
    graph = recover_hierarchy(cloud)
    acc = float(np.mean(segment_points(graph, cloud) == labels)) if len(graph) else 0.0
    small, _, _ = make_compound(30)
    small_nodes = len(recover_hierarchy(small))
    ok = len(graph) == 2 and len(graph.edges) == 1 and acc >= 0.95 and small_nodes == 1
    record_acceptance(
        9, ok,
        f"200-point cap: {len(graph)} nodes, {len(graph.edges)} edges, segmentation {acc:.1%} (need 2, 1, >= 95%); "
        f"30-point cap: {small_nodes} nodes (need 1)",
    )
    assert ok


def test_criterion_10_clustering_oracle():
    rng = np.random.default_rng(10)
    mismatches = 0
    for _ in range(50):
        n = int(rng.integers(1, 501))
        pts = rng.uniform(-1, 1, size=(n, 3))
        radius = float(rng.uniform(0.05, 0.3))
        got = [sorted(int(i) for i in c) for c in euclidean_cluster(pts, radius)]
        mismatches += got != union_find_clusters(pts, radius)
    ok = mismatches == 0
    record_acceptance(10, ok, f"{mismatches}/50 instances differ from brute-force components (need 0)")
    assert ok


def _geometry_failures():
    sphere, octa = Superquadric(1, 1, 1, 1, 1), Superquadric(2, 2, 1, 1, 1)
    rng = np.random.default_rng(11)
    failures = []

    def check(name, cond):
        if not cond:
            failures.append(name)

    check("sphere identity", abs(implicit_value(sphere, np.array([0.0, 3, 4])) - 25.0) <= 1e-12)
    check("sphere surface", abs(implicit_value(sphere, np.array([0.6, 0, 0.8])) - 1.0) <= 1e-14)
    check("octahedron identity", abs(implicit_value(octa, np.array([0.5, 0.25, 0.25])) - 1.0) <= 1e-14)
    check("octahedron scaling", abs(implicit_value(octa, np.array([1.0, 0.5, 0.5])) - 2.0) <= 1e-12)

    sq = Superquadric(0.4, 1.6, 1.0, 2.0, 0.7, pose=Pose.from_rotvec([0.3, -0.2, 1.0], [0.5, 0, -1]))
    pts = sq.translation + rng.normal(size=(200, 3)) * 2
    mu = radial_project(sq, pts)
    check("projection on surface", np.max(np.abs(implicit_value(sq, sq.pose.to_local(mu)) - 1.0)) <= 1e-9)
    check("projection idempotent", np.max(np.abs(radial_project(sq, mu) - mu)) <= 1e-9)
    check("projection fixes surface points", np.max(radial_distance(sq, mu)) <= 1e-9)

    for shape in [(0.5, 0.5, 1, 1, 1), (1.3, 0.4, 0.8, 1.7, 1.1), (1.9, 1.9, 2, 1, 0.6)]:
        g_sq = Superquadric(*shape)
        p = rng.uniform(0.2, 1.5, size=(50, 3)) * rng.choice([-1, 1], size=(50, 3))
        g = implicit_gradient(g_sq, p)
        tol = np.maximum(1e-5, 1e-3 * np.linalg.norm(g, axis=1))
        for k in range(3):
            d = np.zeros(3)
            d[k] = 1e-6
            fd = (implicit_value(g_sq, p + d) - implicit_value(g_sq, p - d)) / 2e-6
            check(f"gradient {shape} axis {k}", np.all(np.abs(g[:, k] - fd) <= tol))

    from scipy.spatial import cKDTree

    for shape in [(1, 1, 1, 1, 1), (0.1, 0.1, 1, 2, 0.5), (1.8, 0.3, 2, 1, 1.5), (0.5, 1.9, 0.6, 2.5, 1)]:
        s_sq = Superquadric(*shape, pose=Pose.from_rotvec([0.4, 0.1, -0.7], [1, 2, 3]))
        samples = sample_surface_equidistant(s_sq, 0.05).points
        local = s_sq.pose.to_local(samples)
        check(f"samples on surface {shape}", np.max(np.abs(implicit_value(s_sq, local) - 1.0)) <= 1e-6)
        d, _ = cKDTree(samples).query(samples, k=2)
        check(f"sample density {shape}", np.quantile(d[:, 1], 0.99) <= 0.1)
    return failures


def test_criterion_11_geometry_unit_suite():
    failures = _geometry_failures()
    ok = not failures
    record_acceptance(11, ok, "implicit identities, projection, gradient and sampler checks" +
                      ("" if ok else f"; failed: {', '.join(failures)}"))
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-s", *sys.argv[1:]]))
