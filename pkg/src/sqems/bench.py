"""Synthetic benchmark: random superquadrics, corruptions, error metric, baseline and runner."""

from __future__ import annotations

import csv
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .ems import (
    FitConfig,
    FitResult,
    InsufficientPointsError,
    _minimize,
    _Objective,
    _PERM_X,
    _PERM_Y,
    _Problem,
    _relabel,
    ems_fit,
    pack_params,
    initial_guess,
    unpack_params,
)
from . import kernels
from .geometry import Pose, Superquadric, as_cloud, sample_surface_equidistant

KINDS = ("partial", "outlier", "noise")
METHODS = ("ems", "radial_lsq")
ROW_FIELDS = ("kind", "level", "instance", "method", "error", "success", "runtime_ms", "iterations", "switches", "seed")


@dataclass(frozen=True)
class SyntheticSpec:
    count: int = 1
    eps_range: tuple = (0.0, 2.0)  # open at the low end
    scale_range: tuple = (0.5, 3.0)
    translation_range: tuple = (-1.0, 1.0)
    spacing: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if not self.spacing > 0:
            raise ValueError("spacing must be positive")


@dataclass(frozen=True)
class CorruptionSpec:
    partial_ratio: float = 1.0
    outlier_ratio: float = 0.0
    noise_sigma2: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.partial_ratio <= 1.0:
            raise ValueError("partial_ratio must lie in (0, 1]")
        if self.outlier_ratio < 0.0 or self.noise_sigma2 < 0.0:
            raise ValueError("outlier_ratio and noise_sigma2 must be non-negative")


# ---------------------------------------------------------------------------
# generation and corruption
# ---------------------------------------------------------------------------


def random_superquadric(spec: SyntheticSpec, rng: np.random.Generator) -> Superquadric:
    lo, hi = spec.eps_range
    eps = hi - rng.uniform(0.0, hi - lo, size=2)  # (lo, hi]
    scales = rng.uniform(*spec.scale_range, size=3)
    t = rng.uniform(*spec.translation_range, size=3)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, 2.0 * math.pi)
    return Superquadric(*eps, *scales, pose=Pose.from_rotvec(axis * angle, t))


def _count(ratio: float, n: int) -> int:
    return int(math.ceil(ratio * n - 1e-9))


def make_partial(cloud, ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Keep the ``ceil(ratio N)`` points nearest a randomly chosen cloud point (input order kept)."""
    cloud = as_cloud(cloud)
    if not 0.0 < ratio <= 1.0:
        raise ValueError("ratio must lie in (0, 1]")
    seed_point = cloud[rng.integers(len(cloud))]
    d = np.linalg.norm(cloud - seed_point, axis=1)
    keep = np.argsort(d, kind="stable")[: _count(ratio, len(cloud))]
    return cloud[np.sort(keep)]


def add_outliers(cloud, ratio: float, rng: np.random.Generator, spread: float = 0.6) -> np.ndarray:
    """Append ``ceil(ratio N)`` Gaussian points around the centroid.

    The standard deviation is ``spread`` times the bounding-box diagonal.
    """
    cloud = as_cloud(cloud)
    if ratio < 0.0:
        raise ValueError("ratio must be non-negative")
    m = _count(ratio, len(cloud))
    if m == 0:
        return cloud.copy()
    std = spread * float(np.linalg.norm(cloud.max(axis=0) - cloud.min(axis=0)))
    outliers = cloud.mean(axis=0) + std * rng.normal(size=(m, 3))
    return np.concatenate((cloud, outliers))


def add_noise(cloud, sigma2: float, rng: np.random.Generator) -> np.ndarray:
    cloud = as_cloud(cloud)
    if sigma2 < 0.0:
        raise ValueError("sigma2 must be non-negative")
    if sigma2 == 0.0:
        return cloud.copy()
    return cloud + math.sqrt(sigma2) * rng.normal(size=cloud.shape)


def corrupt(cloud, spec: CorruptionSpec, rng: np.random.Generator) -> np.ndarray:
    """Partial view, then noise, then outliers."""
    out = make_partial(cloud, spec.partial_ratio, rng) if spec.partial_ratio < 1.0 else as_cloud(cloud)
    out = add_noise(out, spec.noise_sigma2, rng)
    return add_outliers(out, spec.outlier_ratio, rng)


# ---------------------------------------------------------------------------
# metric and baseline
# ---------------------------------------------------------------------------


def fibonacci_sphere(n: int, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> np.ndarray:
    """``n`` nearly uniform points on a sphere (golden-angle spiral)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    k = np.arange(n) + 0.5
    z = 1.0 - 2.0 * k / n
    rho = np.sqrt(1.0 - z * z)
    phi = math.pi * (3.0 - math.sqrt(5.0)) * k
    unit = np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=1)
    return radius * unit + np.asarray(center, dtype=np.float64)


def make_compound(cap_points: int = 200, spacing: float = 0.05, gap: float = 0.3, cap_radius: float = 0.35):
    """Bottle-like two-part cloud: a rounded cylinder with a spherical cap above it.

    Returns ``(cloud, labels, body)`` where ``labels`` is 0 for body points and
    1 for cap points and ``body`` is the generating superquadric.
    """
    body = Superquadric(0.2, 1.0, 0.8, 0.8, 1.5)
    body_pts = sample_surface_equidistant(body, spacing).points
    cap = fibonacci_sphere(cap_points, cap_radius, (0.0, 0.0, body.az + gap + cap_radius))
    labels = np.concatenate([np.zeros(len(body_pts), dtype=np.int64), np.ones(cap_points, dtype=np.int64)])
    return np.concatenate([body_pts, cap]), labels, body


def error_metric(cloud, sq: Superquadric, spacing: float = 0.02) -> float:
    """Mean distance from each point to its nearest dense surface sample (exact k-d tree)."""
    cloud = as_cloud(cloud)
    samples = sample_surface_equidistant(sq, spacing).points
    dist, _ = cKDTree(samples).query(cloud, k=1)
    return float(np.mean(dist))


def baseline_radial_lsq(cloud, cfg: FitConfig | None = None, n_inits: int = 3, max_nfev: int = 200) -> FitResult:
    """Plain least squares on radial residuals from PCA starts.

    Start ``k`` places the ``k``-th principal axis of the same start as
    :func:`ems_fit` on local z. There is no
    outlier model, no area term and no switching; ``final_nll`` holds half the
    sum of squared residuals of the best start.
    """
    cfg = cfg or FitConfig()
    if not 1 <= n_inits <= 3:
        raise ValueError("n_inits must be 1, 2 or 3")
    start = time.perf_counter()
    problem = _Problem.build(cloud, cfg)
    base = initial_guess(problem.cloud, cfg.init_trim)
    inits = [base, _relabel(base, _PERM_X), _relabel(base, _PERM_Y)][:n_inits]
    weights = np.ones(len(problem.cloud))
    best, best_cost = None, math.inf
    for init in inits:
        init = init.replace(eps1=1.0, eps2=1.0)
        x0, reference = pack_params(init)
        x, cost, _ = _minimize(_Objective(problem, reference, weights, False), x0, max_nfev)
        if cost < best_cost:
            best, best_cost = unpack_params(x, reference), cost
    r = kernels.radial_residual(best.pose.to_local(problem.cloud), best.shape)
    return FitResult(
        superquadric=best,
        sigma2=max(float(np.mean(r * r)) / 3.0, problem.sigma2_min),
        final_nll=best_cost,
        nll_trace=np.array([best_cost]),
        phase_starts=(0,),
        z_hat=np.ones(len(problem.cloud)),
        iterations=0,
        wall_time=time.perf_counter() - start,
    )


# ---------------------------------------------------------------------------
# experiment runner
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BenchConfig:
    seed: int = 0
    spacing: float = 0.2
    metric_spacing: float = 0.02
    success_threshold: float = 0.02
    outlier_spread: float = 0.6
    baseline_inits: int = 3
    methods: tuple = METHODS
    fit: FitConfig = field(default_factory=FitConfig)
    workers: int = 1
    timing: bool = True


@dataclass(frozen=True, eq=False)
class BenchReport:
    rows: list
    summary: dict

    def table(self, kind=None, level=None, method=None) -> list:
        return [
            r
            for r in self.rows
            if (kind is None or r["kind"] == kind)
            and (level is None or r["level"] == level)
            and (method is None or r["method"] == method)
        ]


def _instance_seed(seed: int, instance: int) -> int:
    return int(np.random.SeedSequence([seed, instance]).generate_state(1)[0])


def make_instance(kind: str, level: float, instance: int, cfg: BenchConfig):
    """Ground truth, corrupted cloud and the cloud used for scoring.

    The ground-truth solid depends only on ``(seed, instance)`` so every level
    sees the same shapes.
    """
    seed = _instance_seed(cfg.seed, instance)
    rng = np.random.default_rng(seed)
    gt = random_superquadric(SyntheticSpec(spacing=cfg.spacing), rng)
    clean = sample_surface_equidistant(gt, cfg.spacing).points
    crng = np.random.default_rng([seed, KINDS.index(kind), int(round(level * 1e6))])
    if kind == "partial":
        cloud = make_partial(clean, level, crng)
        return gt, cloud, cloud, seed
    if kind == "outlier":
        return gt, add_outliers(clean, level, crng, cfg.outlier_spread), clean, seed
    if kind == "noise":
        return gt, add_noise(clean, level, crng), clean, seed
    raise ValueError(f"unknown experiment kind {kind!r}")


def _fit(method: str, cloud, cfg: BenchConfig) -> FitResult:
    if method == "ems":
        return ems_fit(cloud, cfg.fit)
    if method == "radial_lsq":
        return baseline_radial_lsq(cloud, cfg.fit, n_inits=cfg.baseline_inits)
    raise ValueError(f"unknown method {method!r}")


def _run_one(task):
    kind, level, instance, cfg = task
    _, cloud, score_cloud, seed = make_instance(kind, level, instance, cfg)
    rows = []
    for method in cfg.methods:
        row = dict(kind=kind, level=level, instance=instance, method=method, seed=seed)
        start = time.perf_counter()
        try:
            res = _fit(method, cloud, cfg)
            err = error_metric(score_cloud, res.superquadric, cfg.metric_spacing)
            row.update(error=err, success=bool(err < cfg.success_threshold),
                       iterations=res.iterations, switches=res.switches)
        except (InsufficientPointsError, RuntimeError, ValueError, FloatingPointError):
            row.update(error=math.nan, success=False, iterations=0, switches=0)
        row["runtime_ms"] = 1e3 * (time.perf_counter() - start) if cfg.timing else None
        rows.append({k: row[k] for k in ROW_FIELDS})
    return rows


def summarize(rows: list, cfg: BenchConfig) -> dict:
    groups = {}
    for r in rows:
        groups.setdefault((r["kind"], r["level"], r["method"]), []).append(r)
    out = []
    for (kind, level, method), rs in groups.items():
        errs = np.array([r["error"] for r in rs], dtype=float)
        ok = errs[np.isfinite(errs)]
        entry = dict(
            kind=kind,
            level=level,
            method=method,
            instances=len(rs),
            failures=int(len(rs) - len(ok)),
            mean_error=float(ok.mean()) if len(ok) else None,
            median_error=float(np.median(ok)) if len(ok) else None,
            success_rate=float(np.mean([r["success"] for r in rs])),
        )
        if cfg.timing:
            entry["mean_runtime_ms"] = float(np.mean([r["runtime_ms"] for r in rs]))
        out.append(entry)
    settings = dict(
        seed=cfg.seed,
        spacing=cfg.spacing,
        metric_spacing=cfg.metric_spacing,
        success_threshold=cfg.success_threshold,
        outlier_std=f"{cfg.outlier_spread} x bounding diagonal, centred at the centroid",
        baseline_inits=cfg.baseline_inits,
        fit=asdict(cfg.fit),
    )
    return dict(settings=settings, groups=out)


def _workers(requested: int) -> int:
    cap = os.environ.get("SQ_THREADS")
    if cap:
        try:
            return max(1, min(requested, int(cap)))
        except ValueError:
            pass
    return max(1, requested)


def run_experiment(kind: str, levels, instances: int, cfg: BenchConfig | None = None) -> BenchReport:
    """Fit every ``level x instance`` with each method and score it.

    Outlier and noise runs are scored on the uncorrupted cloud, partial runs on
    the partial cloud that was fitted. Results do not depend on ``workers``.
    """
    cfg = cfg or BenchConfig()
    if kind not in KINDS:
        raise ValueError(f"unknown experiment kind {kind!r}")
    if instances < 1:
        raise ValueError("instances must be >= 1")
    tasks = [(kind, float(level), i, cfg) for level in levels for i in range(instances)]
    workers = _workers(cfg.workers)
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            chunks = list(pool.map(_run_one, tasks))
    else:
        chunks = [_run_one(t) for t in tasks]
    rows = [row for chunk in chunks for row in chunk]
    return BenchReport(rows=rows, summary=summarize(rows, cfg))


def write_report(report: BenchReport, out_dir, stem: str = "report") -> tuple:
    """Write ``<stem>.csv`` (one row per fit) and ``<stem>.json`` (aggregates)."""
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, f"{stem}.csv")
    json_path = os.path.join(out_dir, f"{stem}.json")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=ROW_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in report.rows:
            writer.writerow({k: ("" if row[k] is None else repr(row[k]) if isinstance(row[k], float) else row[k])
                             for k in ROW_FIELDS})
    with open(json_path, "w") as fh:
        json.dump(report.summary, fh, indent=2, sort_keys=True, allow_nan=False, default=_json_default)
        fh.write("\n")
    return csv_path, json_path


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    raise TypeError(f"cannot serialise {type(obj).__name__}")


__all__ = [
    "KINDS",
    "METHODS",
    "BenchConfig",
    "BenchReport",
    "CorruptionSpec",
    "SyntheticSpec",
    "add_noise",
    "add_outliers",
    "baseline_radial_lsq",
    "corrupt",
    "error_metric",
    "fibonacci_sphere",
    "make_compound",
    "make_instance",
    "make_partial",
    "random_superquadric",
    "run_experiment",
    "summarize",
    "write_report",
]
