"""EMS solver: PCA start, EM iterations with a bounded M-step, and switching.

The fit alternates an E-step (radial correspondences and inlier posteriors), an
M-step (bounded trust-region least squares on the expected NLL with the
posteriors frozen) and a closed-form variance update. When an EM phase stalls,
a small set of geometrically similar re-encodings of the current solid is
refined briefly and the fit jumps to the best one if it lowers the NLL.
"""

from __future__ import annotations

import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares
from scipy.spatial import cKDTree

from . import kernels
from .geometry import (
    Pose,
    Superquadric,
    as_cloud,
    surface_area,
    surface_area_fast,
    surface_area_fast_gradient,
)
from .gum import (
    AllOutliersError,
    Correspondences,
    GumConfig,
    GumState,
    e_step,
    observed_nll,
    sigma2_update,
    workspace_volume,
)

N_PARAMS = 11
MIN_POINTS = 10
TAGS = ("axis-x", "axis-y", "duality", "axis-x+duality", "axis-y+duality")

# Right-handed cyclic relabelings of the local axes. Column k is the old axis
# that becomes new axis k.
_PERM_X = np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])  # new z = old x
_PERM_Y = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])  # new z = old y
_ROT_Z45 = np.array(
    [[math.sqrt(0.5), -math.sqrt(0.5), 0.0], [math.sqrt(0.5), math.sqrt(0.5), 0.0], [0.0, 0.0, 1.0]]
)


class InsufficientPointsError(ValueError):
    """Fewer points than a fit needs."""


@dataclass(frozen=True)
class FitConfig:
    max_em_iters: int = 100
    rel_tol_nll: float = 1e-6
    param_tol: float = 1e-4
    max_switches: int = 4
    candidate_refine_iters: int = 5
    max_inner_iters: int = 50
    w_o: float = 0.1
    margin: float = 0.1
    area_mode: str = "fast"
    switching: bool = True
    seed: int = 0
    sigma2_rel_floor: float = 1e-4
    init_trim: float = 2.0
    scale_noise_ratio: float = 2.0
    warmup_iters: int = 5

    def __post_init__(self):
        for name in ("max_em_iters", "max_inner_iters"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("max_switches", "candidate_refine_iters", "warmup_iters"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("rel_tol_nll", "param_tol", "sigma2_rel_floor"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in (0, 1)")
        if self.init_trim < 0.0 or self.scale_noise_ratio < 0.0:
            raise ValueError("init_trim and scale_noise_ratio must be non-negative")
        if self.margin < 0.0:
            raise ValueError("margin must be non-negative")
        if self.area_mode not in ("fast", "quadrature"):
            raise ValueError(f"unknown area mode {self.area_mode!r}")
        GumConfig(w_o=self.w_o)


@dataclass(frozen=True)
class SwitchRecord:
    tag: str
    nll_before: float
    nll_after: float
    accepted: bool


@dataclass(frozen=True, eq=False)
class FitResult:
    superquadric: Superquadric
    sigma2: float
    final_nll: float
    nll_trace: np.ndarray
    phase_starts: tuple
    z_hat: np.ndarray
    switch_log: tuple = ()
    warmup_phase: bool = False  # first phase ran without the area term
    iterations: int = 0
    wall_time: float = 0.0

    @property
    def switches(self) -> int:
        return sum(1 for rec in self.switch_log if rec.accepted)

    def phases(self) -> list:
        """The NLL trace split into EM phases."""
        bounds = list(self.phase_starts) + [len(self.nll_trace)]
        return [self.nll_trace[a:b] for a, b in zip(bounds[:-1], bounds[1:])]


@dataclass(frozen=True, eq=False)
class Candidate:
    tag: str
    superquadric: Superquadric


# ---------------------------------------------------------------------------
# problem setup and parameter vector
# ---------------------------------------------------------------------------


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("SQ_THREADS", "1")))
    except ValueError:
        return 1


@dataclass(frozen=True, eq=False)
class _Problem:
    cloud: np.ndarray
    gum: GumConfig
    lower: np.ndarray
    upper: np.ndarray
    sigma2_min: float
    log_area_floor: float
    area_mode: str
    diag: float

    @classmethod
    def build(cls, cloud, cfg: FitConfig) -> "_Problem":
        cloud = as_cloud(cloud)
        if len(cloud) < MIN_POINTS:
            raise InsufficientPointsError(f"insufficient points: {len(cloud)} < {MIN_POINTS}")
        diag = float(np.linalg.norm(cloud.max(axis=0) - cloud.min(axis=0)))
        if diag <= 0.0:
            raise InsufficientPointsError("insufficient points: all points coincide")
        a_min, a_max = 1e-3 * diag, 2.0 * diag
        lower = np.full(N_PARAMS, -np.inf)
        upper = np.full(N_PARAMS, np.inf)
        lower[:2], upper[:2] = kernels.EPS_MIN, 2.0
        lower[2:5], upper[2:5] = a_min, a_max
        # smallest admissible area is the octahedron at a_min; keeps the area
        # residual's radicand >= 1
        log_area_floor = math.log(4.0 * math.sqrt(3.0) * a_min * a_min) - 1.0
        return cls(
            cloud=cloud,
            gum=GumConfig(w_o=cfg.w_o, volume=workspace_volume(cloud, cfg.margin)),
            lower=lower,
            upper=upper,
            sigma2_min=(cfg.sigma2_rel_floor * diag) ** 2,
            log_area_floor=log_area_floor,
            area_mode=cfg.area_mode,
            diag=diag,
        )

    def clip(self, x):
        return np.clip(x, self.lower, self.upper)

    def nll(self, sq, st, residual_sq=None, with_area=True):
        return observed_nll(sq, self.cloud, self.gum, st, self.area_mode, residual_sq, with_area)


def _euler_zyx(r):
    """``Rz(r0) Ry(r1) Rx(r2)`` and its derivatives w.r.t. each angle."""
    cz, sz = math.cos(r[0]), math.sin(r[0])
    cy, sy = math.cos(r[1]), math.sin(r[1])
    cx, sx = math.cos(r[2]), math.sin(r[2])
    rz = np.array([[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]])
    ry = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]])
    drz = np.array([[-sz, -cz, 0.0], [cz, -sz, 0.0], [0.0, 0.0, 0.0]])
    dry = np.array([[-sy, 0.0, cy], [0.0, 0.0, 0.0], [-cy, 0.0, -sy]])
    drx = np.array([[0.0, 0.0, 0.0], [0.0, -sx, -cx], [0.0, cx, -sx]])
    return rz @ ry @ rx, (drz @ ry @ rx, rz @ dry @ rx, rz @ ry @ drx)


def pack_params(sq: Superquadric) -> tuple[np.ndarray, np.ndarray]:
    """Parameter vector (zero Euler correction) and the reference rotation."""
    x = np.zeros(N_PARAMS)
    x[:5] = sq.shape
    x[8:] = sq.translation
    return x, sq.rotation


def unpack_params(x, reference: np.ndarray) -> Superquadric:
    rc, _ = _euler_zyx(x[5:8])
    return Superquadric(*x[:5], pose=Pose.from_matrix(reference @ rc, x[8:]))


class _Objective:
    """Weighted radial residuals plus an optional area row, with analytic Jacobian."""

    def __init__(self, problem: _Problem, reference, weights, with_area: bool):
        self.problem = problem
        self.reference = reference
        self.weights = weights
        self.with_area = with_area
        self._cache_x = None
        self._cache = None

    def _eval(self, x):
        if self._cache_x is not None and np.array_equal(x, self._cache_x):
            return self._cache
        rc, drc = _euler_zyx(x[5:8])
        rot = self.reference @ rc
        q = (self.problem.cloud - x[8:]) @ self.reference
        r, jshape, jp = kernels.radial_jacobian(q @ rc, x[:5])
        jac = np.empty((len(r), N_PARAMS))
        jac[:, :5] = jshape
        for k in range(3):
            jac[:, 5 + k] = np.einsum("ij,ij->i", jp, q @ drc[k])
        jac[:, 8:] = -(jp @ rot.T)
        self._cache_x = np.array(x, copy=True)
        self._cache = (r, jac)
        return self._cache

    def _area_row(self, x, want_jac):
        sq = Superquadric(*x[:5])
        n = len(self.problem.cloud)
        if self.problem.area_mode == "fast":
            area = surface_area_fast(sq)
            grad = surface_area_fast_gradient(sq) / area if want_jac else None
        else:
            area = surface_area(sq, "quadrature")
            grad = None
            if want_jac:
                grad = np.empty(5)
                for i in range(5):
                    h = 1e-6 * max(abs(x[i]), 1e-3)
                    up, dn = np.array(x[:5]), np.array(x[:5])
                    up[i] = min(up[i] + h, self.problem.upper[i])
                    dn[i] = max(dn[i] - h, self.problem.lower[i])
                    grad[i] = (
                        math.log(surface_area(Superquadric(*up), "quadrature"))
                        - math.log(surface_area(Superquadric(*dn), "quadrature"))
                    ) / (up[i] - dn[i])
        value = math.sqrt(n * max(math.log(area) - self.problem.log_area_floor, 0.0))
        if not want_jac:
            return value, None
        row = np.zeros(N_PARAMS)
        if value > 0.0:
            row[:5] = n * grad / (2.0 * value)
        return value, row

    def residuals(self, x):
        r, _ = self._eval(x)
        res = self.weights * r
        if self.with_area:
            res = np.append(res, self._area_row(x, False)[0])
        return res

    def jacobian(self, x):
        _, jac = self._eval(x)
        jac = self.weights[:, None] * jac
        if self.with_area:
            jac = np.vstack((jac, self._area_row(x, True)[1]))
        return jac

    def cost(self, x):
        res = self.residuals(x)
        return 0.5 * float(res @ res)


def _minimize(objective: _Objective, x0, max_nfev, lower=None):
    """Bounded trust-region-reflective solve; returns ``(x, cost, ok)``.

    ``lower`` optionally tightens the problem's lower bounds. The start point
    is returned whenever the solver fails or does not improve.
    """
    problem = objective.problem
    lower = problem.lower if lower is None else lower
    x0 = np.clip(np.asarray(x0, dtype=np.float64), lower, problem.upper)
    cost0 = objective.cost(x0)
    try:
        sol = least_squares(
            objective.residuals,
            x0,
            jac=objective.jacobian,
            bounds=(lower, problem.upper),
            method="trf",
            x_scale="jac",
            max_nfev=max_nfev,
        )
    except (ValueError, np.linalg.LinAlgError, FloatingPointError):
        return x0, cost0, False
    x = np.clip(sol.x, lower, problem.upper)
    cost = objective.cost(x)
    if not np.isfinite(cost) or cost > cost0:
        return x0, cost0, False
    return x, cost, True


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------


def pca_init(cloud) -> Superquadric:
    """Ellipsoid start aligned with the principal axes; largest spread on local z."""
    cloud = as_cloud(cloud)
    if len(cloud) < MIN_POINTS:
        raise InsufficientPointsError(f"insufficient points: {len(cloud)} < {MIN_POINTS}")
    center = cloud.mean(axis=0)
    centered = cloud - center
    _, vecs = np.linalg.eigh(centered.T @ centered / len(cloud))
    if np.linalg.det(vecs) < 0.0:
        vecs[:, 0] = -vecs[:, 0]
    local = centered @ vecs
    half = 0.5 * (local.max(axis=0) - local.min(axis=0))
    diag = float(np.linalg.norm(cloud.max(axis=0) - cloud.min(axis=0)))
    scales = np.maximum(1.2 * half, 1e-3 * max(diag, np.finfo(float).tiny))
    return Superquadric(1.0, 1.0, *scales, pose=Pose.from_matrix(vecs, center))


def dense_point_mask(cloud, k: int = 8, factor: float = 2.0) -> np.ndarray:
    """Points whose mean distance to their ``k`` nearest neighbours is at most
    ``factor`` times the median of that statistic over the cloud."""
    cloud = as_cloud(cloud)
    k = min(k, len(cloud) - 1)
    if k < 1:
        return np.ones(len(cloud), dtype=bool)
    d, _ = cKDTree(cloud).query(cloud, k=k + 1)
    spread = d[:, 1:].mean(axis=1)
    return spread <= factor * np.median(spread)


def initial_guess(cloud, trim: float = 2.0) -> Superquadric:
    """:func:`pca_init` on the cloud with isolated points removed.

    Scattered outliers inflate the principal extents; dropping points that
    sit in much sparser neighbourhoods than the median keeps the start close
    to the dense surface. ``trim=0`` uses every point.
    """
    cloud = as_cloud(cloud)
    if trim > 0.0:
        kept = cloud[dense_point_mask(cloud, factor=trim)]
        if len(kept) >= MIN_POINTS:
            return pca_init(kept)
    return pca_init(cloud)


def _initial_state(problem: _Problem, sq: Superquadric) -> GumState:
    # median rather than mean: outliers would otherwise start the variance
    # far above the surface noise
    r = kernels.radial_residual(sq.pose.to_local(problem.cloud), sq.shape)
    return GumState(max(float(np.median(r * r)) / 3.0, problem.sigma2_min))


# ---------------------------------------------------------------------------
# EM
# ---------------------------------------------------------------------------


def _m_step(problem: _Problem, sq, corr: Correspondences, st: GumState, max_inner, noise_ratio,
            with_area=True):
    x0, reference = pack_params(sq)
    weights = np.sqrt(corr.z_hat / (2.0 * st.sigma2))
    # The surface-Gaussian likelihood only makes sense for a solid that is
    # large next to the noise; below that the area term rewards shrinking to
    # a point. Scales already under the bound may stay where they are.
    lower = problem.lower.copy()
    floor = noise_ratio * math.sqrt(st.sigma2)
    lower[2:5] = np.maximum(lower[2:5], np.minimum(x0[2:5], floor))
    x, _, ok = _minimize(_Objective(problem, reference, weights, with_area), x0, max_inner, lower)
    new_sq = unpack_params(x, reference) if ok else sq
    r = kernels.radial_residual(new_sq.pose.to_local(problem.cloud), new_sq.shape)
    refreshed = Correspondences(mu_hat=corr.mu_hat, z_hat=corr.z_hat, residual_sq=r * r)
    return new_sq, GumState(sigma2_update(refreshed, problem.sigma2_min)), ok


def m_step(sq: Superquadric, cloud, corr: Correspondences, cfg: FitConfig, st: GumState):
    """One M-step with the inlier posteriors frozen, then the variance update.

    Returns ``(superquadric, state, ok)``; on solver failure the input
    parameters come back with ``ok=False`` and only the variance is refreshed.
    """
    problem = _Problem.build(cloud, cfg)
    return _m_step(problem, sq, corr, st, cfg.max_inner_iters, cfg.scale_noise_ratio)


def _param_change(problem: _Problem, old: Superquadric, new: Superquadric) -> float:
    d_shape = np.abs(new.shape[:2] - old.shape[:2]).max()
    d_scale = np.abs(new.scales - old.scales).max() / problem.diag
    d_trans = np.abs(new.translation - old.translation).max() / problem.diag
    rel = old.rotation.T @ new.rotation
    d_rot = math.acos(min(1.0, max(-1.0, 0.5 * (np.trace(rel) - 1.0))))
    return float(max(d_shape, d_scale, d_trans, d_rot))


@dataclass
class _Phase:
    sq: Superquadric
    st: GumState
    nll: float
    trace: list = field(default_factory=list)
    iterations: int = 0


def _em_phase(problem: _Problem, sq, st, cfg: FitConfig, budget: int, nll=None, with_area=True) -> _Phase:
    """Run EM until the NLL or parameters stall, or ``budget`` iterations pass.

    A step that would raise the NLL is discarded and ends the phase, so the
    recorded trace is non-increasing by construction.
    """
    if nll is None:
        nll = problem.nll(sq, st, with_area=with_area)
    phase = _Phase(sq, st, nll, [nll])
    for _ in range(budget):
        corr = e_step(phase.sq, problem.cloud, problem.gum, phase.st)
        new_sq, new_st, _ = _m_step(
            problem, phase.sq, corr, phase.st, cfg.max_inner_iters, cfg.scale_noise_ratio, with_area
        )
        new_nll = problem.nll(new_sq, new_st, with_area=with_area)
        if not np.isfinite(new_nll) or new_nll > phase.nll:
            break
        drop = phase.nll - new_nll
        moved = _param_change(problem, phase.sq, new_sq)
        phase.sq, phase.st, phase.nll = new_sq, new_st, new_nll
        phase.trace.append(new_nll)
        phase.iterations += 1
        if drop <= cfg.rel_tol_nll * max(1.0, abs(new_nll)) or moved < cfg.param_tol:
            break
    return phase


# ---------------------------------------------------------------------------
# switching
# ---------------------------------------------------------------------------


def _relabel(sq: Superquadric, perm: np.ndarray) -> Superquadric:
    scales = sq.scales @ perm  # new scale k = old scale of the axis in column k
    return Superquadric(
        sq.eps2, sq.eps1, *scales, pose=Pose.from_matrix(sq.rotation @ perm, sq.translation)
    )


def candidates_axis_mismatch(sq: Superquadric) -> list:
    """Move the principal axis onto the current local x (then y) axis.

    The axes are relabeled cyclically so the frame stays right-handed and the
    solid keeps its position and extent. The exponents trade roles; the
    re-encoding is exact when ``eps1 == eps2``.
    """
    return [Candidate("axis-x", _relabel(sq, _PERM_X)), Candidate("axis-y", _relabel(sq, _PERM_Y))]


def duality_scale(eps2: float) -> float:
    """Cross-section scale factor ``2^((1 - eps2)/2)`` used by the duality move.

    A square of half-width ``a`` turned by 45 degrees is the diamond of
    half-diagonal ``a*sqrt(2)``, and the reverse move divides by ``sqrt(2)``;
    the factor is 1 for the circle.
    """
    return 2.0 ** (0.5 * (1.0 - eps2))


def candidates_duality(sq: Superquadric) -> list:
    """``eps2 -> 2 - eps2`` with rescaled cross-section, turned 45 degrees about z."""
    s = duality_scale(sq.eps2)
    pose = Pose.from_matrix(sq.rotation @ _ROT_Z45, sq.translation)
    return [Candidate("duality", sq.replace(eps2=2.0 - sq.eps2, ax=sq.ax * s, ay=sq.ay * s, pose=pose))]


def candidate_set(sq: Superquadric) -> list:
    """Axis moves, duality, and duality applied after each axis move."""
    axis = candidates_axis_mismatch(sq)
    combos = [
        Candidate(f"{c.tag}+duality", candidates_duality(c.superquadric)[0].superquadric) for c in axis
    ]
    return axis + candidates_duality(sq) + combos


def _refine_candidate(problem, cand: Candidate, z_hat, cfg: FitConfig):
    x, reference = pack_params(cand.superquadric)
    sq = unpack_params(problem.clip(x), reference)
    r = kernels.radial_residual(sq.pose.to_local(problem.cloud), sq.shape)
    try:
        sigma2 = sigma2_update(Correspondences(None, z_hat, r * r), problem.sigma2_min)
        phase = _em_phase(problem, sq, GumState(sigma2), cfg, cfg.candidate_refine_iters)
    except AllOutliersError:
        return None
    return phase


def _s_step(problem, sq, st, cfg: FitConfig, current_nll: float):
    z_hat = e_step(sq, problem.cloud, problem.gum, st).z_hat
    cands = candidate_set(sq)
    workers = min(_threads(), len(cands))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            phases = list(pool.map(lambda c: _refine_candidate(problem, c, z_hat, cfg), cands))
    else:
        phases = [_refine_candidate(problem, c, z_hat, cfg) for c in cands]

    threshold = current_nll - abs(current_nll) * cfg.rel_tol_nll
    best, best_idx, records = None, -1, []
    for i, (cand, phase) in enumerate(zip(cands, phases)):
        nll = phase.nll if phase is not None else math.inf
        records.append([cand.tag, current_nll, nll, False])
        if nll < threshold and (best is None or nll < best.nll):
            best, best_idx = phase, i
    if best is not None:
        records[best_idx][3] = True
    return best, [SwitchRecord(*rec) for rec in records]


def s_step(sq: Superquadric, cloud, cfg: FitConfig, st: GumState, current_nll: float):
    """Try every candidate re-encoding and return the best improving one.

    Returns ``((superquadric, state, nll) or None, switch records)``.
    """
    problem = _Problem.build(cloud, cfg)
    best, records = _s_step(problem, sq, st, cfg, current_nll)
    if best is None:
        return None, records
    return (best.sq, best.st, best.nll), records


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------


def ems_fit(cloud, cfg: FitConfig | None = None, init: Superquadric | None = None) -> FitResult:
    """Recover one superquadric from ``cloud``.

    Starts from :func:`initial_guess` (or ``init``), alternates EM phases with
    switching until no candidate improves, ``max_switches`` jumps have been
    taken, or ``max_em_iters`` EM iterations have run.
    """
    cfg = cfg or FitConfig()
    start = time.perf_counter()
    problem = _Problem.build(cloud, cfg)
    sq = init if init is not None else initial_guess(problem.cloud, cfg.init_trim)
    x, reference = pack_params(sq)
    sq = unpack_params(problem.clip(x), reference)
    st = _initial_state(problem, sq)

    trace, phase_starts, log = [], [], []
    budget, switches, nll = cfg.max_em_iters, 0, None
    try:
        if cfg.warmup_iters > 0:
            # While the noise estimate is still coarse the area term favours
            # shrinking the solid, so settle the pose and variance first.
            phase = _em_phase(problem, sq, st, cfg, min(cfg.warmup_iters, budget - 1), with_area=False)
            phase_starts.append(0)
            trace.extend(phase.trace)
            budget -= phase.iterations
            sq, st = phase.sq, phase.st
        while True:
            phase = _em_phase(problem, sq, st, cfg, budget, nll)
            phase_starts.append(len(trace))
            trace.extend(phase.trace)
            budget -= phase.iterations
            sq, st, nll = phase.sq, phase.st, phase.nll
            if not cfg.switching or switches >= cfg.max_switches or budget <= 0:
                break
            best, records = _s_step(problem, sq, st, cfg, nll)
            log.extend(records)
            if best is None:
                break
            switches += 1
            sq, st, nll = best.sq, best.st, best.nll
        z_hat = e_step(sq, problem.cloud, problem.gum, st).z_hat
    except AllOutliersError as exc:
        raise AllOutliersError(
            f"{exc} after {cfg.max_em_iters - budget} EM iterations "
            f"(sigma2={st.sigma2:.3g}, last fit {sq!r})"
        ) from exc

    return FitResult(
        superquadric=sq,
        sigma2=st.sigma2,
        final_nll=float(nll),
        nll_trace=np.asarray(trace),
        phase_starts=tuple(phase_starts),
        z_hat=z_hat,
        switch_log=tuple(log),
        warmup_phase=cfg.warmup_iters > 0,
        iterations=cfg.max_em_iters - budget,
        wall_time=time.perf_counter() - start,
    )
