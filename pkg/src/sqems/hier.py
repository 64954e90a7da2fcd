"""Hierarchical multi-superquadric recovery.

Each layer fits one superquadric per point cluster, marks the points it does
not explain as outliers, splits those into Euclidean clusters and passes the
large enough ones to the next layer. The fits form a forest whose edges point
from the fit that rejected a cluster to the fit of that cluster.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .ems import FitConfig, FitResult, InsufficientPointsError, ems_fit
from .geometry import Superquadric, as_cloud, radial_distance
from .gum import AllOutliersError


class HierarchyError(RuntimeError):
    """The root layer could not be fitted."""


@dataclass(frozen=True)
class HierConfig:
    max_layers: int = 3
    prune_min_points: int = 60
    z_threshold: float = 0.5
    cluster_radius: float | str = "auto"

    def __post_init__(self):
        if self.max_layers < 1:
            raise ValueError("max_layers must be >= 1")
        if self.prune_min_points < 1:
            raise ValueError("prune_min_points must be >= 1")
        if not 0.0 <= self.z_threshold < 1.0:
            raise ValueError("z_threshold must lie in [0, 1)")
        if self.cluster_radius != "auto" and not float(self.cluster_radius) > 0.0:
            raise ValueError("cluster_radius must be positive or 'auto'")


@dataclass(frozen=True, eq=False)
class Node:
    superquadric: Superquadric
    layer: int  # 1-based
    cluster: int  # position of the source cluster within its layer
    indices: np.ndarray  # inlier points, indices into the full cloud
    fit: FitResult | None = None


@dataclass(frozen=True, eq=False)
class StructureGraph:
    nodes: tuple
    edges: tuple  # (parent, child) node positions
    unassigned: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    failures: tuple = ()  # (layer, cluster position, message)

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def depth(self) -> int:
        return max((n.layer for n in self.nodes), default=0)

    def parent(self, i: int):
        for p, c in self.edges:
            if c == i:
                return p
        return None

    def children(self, i: int) -> list:
        return [c for p, c in self.edges if p == i]


# ---------------------------------------------------------------------------
# outlier classification and clustering
# ---------------------------------------------------------------------------


def classify_outliers(result: FitResult, cloud, cfg: HierConfig | None = None):
    """Split point indices by the posterior inlier probability.

    A point is an outlier iff its probability is below ``cfg.z_threshold``.
    """
    cfg = cfg or HierConfig()
    z = np.asarray(result.z_hat)
    if len(z) != len(as_cloud(cloud)):
        raise ValueError("fit result and cloud have different point counts")
    outlier = z < cfg.z_threshold
    return np.flatnonzero(~outlier), np.flatnonzero(outlier)


def auto_radius(points, factor: float = 2.5) -> float:
    """``factor`` times the median nearest-neighbour distance."""
    points = as_cloud(points)
    if len(points) < 2:
        return 1.0
    d, _ = cKDTree(points).query(points, k=2)
    med = float(np.median(d[:, 1]))
    if med <= 0.0:
        positive = d[:, 1][d[:, 1] > 0.0]
        med = float(positive.min()) if len(positive) else 1.0
    return factor * med


def euclidean_cluster(points, radius: float) -> list:
    """Connected components of the graph linking points closer than ``radius``.

    Returns sorted index arrays, largest cluster first; equal sizes are
    ordered by their smallest index.
    """
    if not radius > 0.0:
        raise ValueError("radius must be positive")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    if n == 0:
        return []
    pairs = cKDTree(pts).query_pairs(radius, output_type="ndarray")
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    _, labels = connected_components(graph, directed=False)
    clusters = [np.flatnonzero(labels == k) for k in range(labels.max() + 1)]
    clusters.sort(key=lambda c: (-len(c), int(c[0])))
    return clusters


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LayerOutput:
    fits: list  # FitResult or None per input cluster
    inliers: list  # inlier indices per input cluster (empty on failure)
    children: list  # (input cluster position, indices) for surviving child clusters
    pruned: np.ndarray
    failures: list  # (input cluster position, message)


def recover_layer(cloud, clusters, fit_cfg: FitConfig | None = None, cfg: HierConfig | None = None,
                  radius: float | None = None) -> LayerOutput:
    """Fit every cluster, then cluster and prune each fit's outliers.

    ``clusters`` are index arrays into ``cloud``. A failed fit is recorded and
    its points are reported as pruned.
    """
    cloud = as_cloud(cloud)
    fit_cfg = fit_cfg or FitConfig()
    cfg = cfg or HierConfig()
    if radius is None:
        radius = auto_radius(cloud) if cfg.cluster_radius == "auto" else float(cfg.cluster_radius)

    fits, inliers, children, pruned, failures = [], [], [], [], []
    for pos, idx in enumerate(clusters):
        idx = np.asarray(idx, dtype=np.int64)
        try:
            res = ems_fit(cloud[idx], fit_cfg)
        except (InsufficientPointsError, AllOutliersError, ValueError, np.linalg.LinAlgError) as exc:
            fits.append(None)
            inliers.append(np.zeros(0, dtype=np.int64))
            pruned.append(idx)
            failures.append((pos, str(exc)))
            continue
        inl, out = classify_outliers(res, cloud[idx], cfg)
        fits.append(res)
        inliers.append(idx[inl])
        for sub in euclidean_cluster(cloud[idx[out]], radius):
            members = idx[out[sub]]
            if len(members) >= cfg.prune_min_points:
                children.append((pos, np.sort(members)))
            else:
                pruned.append(members)
    pruned = np.sort(np.concatenate(pruned)) if pruned else np.zeros(0, dtype=np.int64)
    return LayerOutput(fits, inliers, children, pruned, failures)


def recover_hierarchy_multi(clouds, fit_cfg: FitConfig | None = None, cfg: HierConfig | None = None) -> StructureGraph:
    """Layered recovery starting from several clouds, one root cluster each.

    Node indices refer to the concatenation of ``clouds`` in the given order.
    """
    fit_cfg = fit_cfg or FitConfig()
    cfg = cfg or HierConfig()
    parts = [as_cloud(c) for c in clouds]
    if not parts:
        raise ValueError("no input clouds")
    cloud = np.concatenate(parts)
    offsets = np.cumsum([0] + [len(p) for p in parts])
    radius = auto_radius(cloud) if cfg.cluster_radius == "auto" else float(cfg.cluster_radius)

    nodes, edges, unassigned, failures = [], [], [], []
    # (parent node or None, indices) awaiting a fit in the current layer
    pending = [(None, np.arange(offsets[k], offsets[k + 1])) for k in range(len(parts))]
    for layer in range(1, cfg.max_layers + 1):
        if not pending:
            break
        small = [idx for _, idx in pending if len(idx) < cfg.prune_min_points]
        if layer == 1 and len(small) == len(pending):
            raise HierarchyError(
                f"root cluster has {len(small[0])} points, fewer than prune_min_points={cfg.prune_min_points}"
            )
        unassigned.extend(small)
        pending = [(p, idx) for p, idx in pending if len(idx) >= cfg.prune_min_points]
        out = recover_layer(cloud, [idx for _, idx in pending], fit_cfg, cfg, radius)
        node_of = {}
        for pos, ((parent, _), res) in enumerate(zip(pending, out.fits)):
            if res is None:
                continue
            node_of[pos] = len(nodes)
            nodes.append(Node(res.superquadric, layer, pos, out.inliers[pos], res))
            if parent is not None:
                edges.append((parent, node_of[pos]))
        failures.extend((layer, pos, msg) for pos, msg in out.failures)
        if layer == 1 and not nodes:
            raise HierarchyError("root fit failed: " + "; ".join(msg for _, msg in out.failures))
        unassigned.append(out.pruned)
        pending = [(node_of[pos], idx) for pos, idx in out.children]
    unassigned.extend(idx for _, idx in pending)  # depth limit reached

    rest = np.sort(np.concatenate(unassigned)) if unassigned else np.zeros(0, dtype=np.int64)
    return StructureGraph(tuple(nodes), tuple(edges), rest.astype(np.int64), tuple(failures))


def recover_hierarchy(cloud, fit_cfg: FitConfig | None = None, cfg: HierConfig | None = None) -> StructureGraph:
    """Layered recovery of a single cloud; see :func:`recover_hierarchy_multi`."""
    return recover_hierarchy_multi([cloud], fit_cfg, cfg)


def segment_points(graph: StructureGraph, cloud) -> np.ndarray:
    """Label each point with the node whose surface is radially nearest.

    Ties go to the lower node index.
    """
    if not graph.nodes:
        raise ValueError("graph has no nodes")
    cloud = as_cloud(cloud)
    dist = np.stack([radial_distance(n.superquadric, cloud) for n in graph.nodes], axis=1)
    return np.argmin(dist, axis=1)


def membership_labels(graph: StructureGraph, n_points: int) -> np.ndarray:
    """Owning node of every point as an inlier, -1 for unassigned points."""
    labels = np.full(n_points, -1, dtype=np.int64)
    for i, node in enumerate(graph.nodes):
        labels[node.indices] = i
    return labels
