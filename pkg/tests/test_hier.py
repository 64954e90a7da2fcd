import numpy as np
import pytest

from sqems.bench import make_compound
from sqems.ems import FitConfig, ems_fit
from sqems.geometry import Superquadric, sample_surface_equidistant
from sqems.hier import (
    HierarchyError,
    HierConfig,
    auto_radius,
    classify_outliers,
    euclidean_cluster,
    membership_labels,
    recover_hierarchy,
    recover_hierarchy_multi,
    recover_layer,
    segment_points,
)

from oracles import union_find_clusters

SPHERE = Superquadric(1, 1, 1, 1, 1)


@pytest.fixture(scope="module")
def compound():
    cloud, labels, _ = make_compound(200)
    return cloud, labels, recover_hierarchy(cloud)


def _as_lists(clusters):
    return [sorted(int(i) for i in c) for c in clusters]


def _check_partition(graph, n):
    parts = [n_.indices for n_ in graph.nodes] + [graph.unassigned]
    flat = np.concatenate(parts)
    assert len(flat) == n
    np.testing.assert_array_equal(np.sort(flat), np.arange(n))


def test_config_validation():
    for bad in (dict(max_layers=0), dict(prune_min_points=0), dict(z_threshold=1.0),
                dict(z_threshold=-0.1), dict(cluster_radius=0.0)):
        with pytest.raises(ValueError):
            HierConfig(**bad)
    assert HierConfig(z_threshold=0.0).z_threshold == 0.0


def test_classify_clean_surface_has_no_outliers():
    cloud = sample_surface_equidistant(SPHERE, 0.2).points
    res = ems_fit(cloud)
    inl, out = classify_outliers(res, cloud)
    assert len(out) == 0 and len(inl) == len(cloud)


def test_classify_flags_a_distant_blob(rng):
    surface = sample_surface_equidistant(SPHERE, 0.2).points
    blob = rng.normal(scale=0.05, size=(40, 3)) + [4.0, 0, 0]
    cloud = np.vstack([surface, blob])
    res = ems_fit(cloud)
    _, out = classify_outliers(res, cloud)
    assert set(range(len(surface), len(cloud))) <= set(out.tolist())
    _, none = classify_outliers(res, cloud, HierConfig(z_threshold=0.0))
    assert len(none) == 0


def test_classify_rejects_mismatched_cloud():
    cloud = sample_surface_equidistant(SPHERE, 0.3).points
    res = ems_fit(cloud)
    with pytest.raises(ValueError):
        classify_outliers(res, cloud[:-1])


def test_euclidean_cluster_examples():
    a = np.zeros((3, 3)) + [[0, 0, 0], [0.1, 0, 0], [0.2, 0, 0]]
    b = a + [5, 0, 0]
    got = euclidean_cluster(np.vstack([b[:2], a, b[2:]]), 0.15)
    assert _as_lists(got) == [[0, 1, 5], [2, 3, 4]]
    chain = np.column_stack([np.arange(10) * 0.1, np.zeros(10), np.zeros(10)])
    assert _as_lists(euclidean_cluster(chain, 0.11)) == [list(range(10))]
    assert len(euclidean_cluster(chain, 0.09)) == 10
    assert euclidean_cluster(np.zeros((0, 3)), 1.0) == []
    with pytest.raises(ValueError):
        euclidean_cluster(chain, 0.0)


def test_euclidean_cluster_matches_union_find(rng):
    for _ in range(10):
        n = int(rng.integers(1, 120))
        pts = rng.uniform(-1, 1, size=(n, 3))
        r = float(rng.uniform(0.05, 0.4))
        assert _as_lists(euclidean_cluster(pts, r)) == union_find_clusters(pts, r)


def test_auto_radius_scales_with_spacing():
    dense = sample_surface_equidistant(SPHERE, 0.05).points
    sparse = sample_surface_equidistant(SPHERE, 0.1).points
    assert auto_radius(sparse) == pytest.approx(2 * auto_radius(dense), rel=0.15)


def test_recover_layer_splits_outliers(rng):
    surface = sample_surface_equidistant(SPHERE, 0.1).points
    blob = rng.normal(scale=0.05, size=(80, 3)) + [3.0, 0, 0]
    speck = rng.normal(scale=0.01, size=(5, 3)) + [0, 3.0, 0]
    cloud = np.vstack([surface, blob, speck])
    out = recover_layer(cloud, [np.arange(len(cloud))], cfg=HierConfig(prune_min_points=20))
    assert len(out.fits) == 1 and out.failures == []
    assert len(out.children) == 1
    pos, child = out.children[0]
    assert pos == 0
    assert set(range(len(surface), len(surface) + 80)) == set(child.tolist())
    assert set(range(len(surface) + 80, len(cloud))) <= set(out.pruned.tolist())


def test_recover_layer_records_failures():
    cloud = sample_surface_equidistant(SPHERE, 0.3).points
    out = recover_layer(cloud, [np.arange(5)])
    assert out.fits == [None] and len(out.failures) == 1
    np.testing.assert_array_equal(out.pruned, np.arange(5))


def test_single_superquadric_gives_one_node():
    cloud = sample_surface_equidistant(Superquadric(0.5, 1.2, 1.0, 1.5, 0.8), 0.1).points
    graph = recover_hierarchy(cloud)
    assert len(graph) == 1 and graph.edges == ()
    _check_partition(graph, len(cloud))
    np.testing.assert_array_equal(segment_points(graph, cloud), 0)


def test_compound_gives_parent_and_child(compound):
    cloud, labels, graph = compound
    assert len(graph) == 2
    assert graph.edges == ((0, 1),)
    assert graph.nodes[1].layer == 2 and graph.parent(1) == 0 and graph.children(0) == [1]
    _check_partition(graph, len(cloud))
    seg = segment_points(graph, cloud)
    assert np.mean(seg == labels) >= 0.95
    member = membership_labels(graph, len(cloud))
    assert set(np.unique(member)) <= {-1, 0, 1}


def test_compound_invariants(compound):
    cloud, _, graph = compound
    cfg = HierConfig()
    assert len(graph) <= len(cloud) // cfg.prune_min_points
    assert graph.depth <= cfg.max_layers
    for node in graph.nodes:
        assert len(node.indices) > 0


def test_depth_limit_and_small_cap():
    cloud, _, _ = make_compound(200)
    graph = recover_hierarchy(cloud, cfg=HierConfig(max_layers=1))
    assert len(graph) == 1
    _check_partition(graph, len(cloud))
    small, _, _ = make_compound(30)
    g2 = recover_hierarchy(small)
    assert len(g2) == 1
    _check_partition(g2, len(small))


def test_root_too_small_raises():
    cloud = sample_surface_equidistant(SPHERE, 0.5).points
    with pytest.raises(HierarchyError):
        recover_hierarchy(cloud, cfg=HierConfig(prune_min_points=len(cloud) + 1))


def test_multi_entry_offsets_indices():
    a = sample_surface_equidistant(SPHERE, 0.15).points
    b = sample_surface_equidistant(SPHERE, 0.15).points + [5, 0, 0]
    graph = recover_hierarchy_multi([a, b], FitConfig())
    assert len(graph) == 2 and graph.edges == ()
    assert graph.nodes[1].indices.min() >= len(a)
    _check_partition(graph, len(a) + len(b))
    with pytest.raises(ValueError):
        recover_hierarchy_multi([])
