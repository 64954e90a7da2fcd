"""Superquadric geometry: definition, frames, projections, area and surface sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from . import kernels

_FINE_CURVE = 4096


def as_cloud(points) -> np.ndarray:
    """Validate and return an ``(N, 3)`` float64 array with N >= 1 finite points."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts.reshape(1, -1)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected an (N, 3) array of points, got shape {pts.shape}")
    if pts.shape[0] < 1:
        raise ValueError("point cloud is empty")
    if not np.all(np.isfinite(pts)):
        raise ValueError("point cloud contains non-finite coordinates")
    return pts


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform stored as a unit quaternion ``(w, x, y, z)`` and a translation."""

    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n == 0.0:
            raise ValueError("rotation quaternion must be finite and non-zero")
        q = q / n
        # canonical sign keeps serialisation stable
        if q[0] < 0 or (q[0] == 0 and q[np.flatnonzero(q)[0]] < 0):
            q = -q
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(t)):
            raise ValueError("translation must be finite")
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)

    @classmethod
    def from_matrix(cls, matrix, translation=(0.0, 0.0, 0.0)) -> "Pose":
        x, y, z, w = Rotation.from_matrix(np.asarray(matrix, dtype=np.float64)).as_quat()
        return cls(np.array([w, x, y, z]), translation)

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0.0, 0.0, 0.0)) -> "Pose":
        x, y, z, w = Rotation.from_rotvec(rotvec).as_quat()
        return cls(np.array([w, x, y, z]), translation)

    @property
    def matrix(self) -> np.ndarray:
        w, x, y, z = self.rotation
        return Rotation.from_quat([x, y, z, w]).as_matrix()

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: apply ``other`` first, then ``self``."""
        r = self.matrix
        return Pose.from_matrix(r @ other.matrix, r @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        rt = self.matrix.T
        return Pose.from_matrix(rt, -rt @ self.translation)

    def to_local(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.translation) @ self.matrix

    def to_world(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.matrix.T + self.translation


def to_local(pose: Pose, points) -> np.ndarray:
    return pose.to_local(points)


def to_world(pose: Pose, points) -> np.ndarray:
    return pose.to_world(points)


@dataclass(frozen=True, eq=False)
class Superquadric:
    """Convex superquadric ``(eps1, eps2, ax, ay, az)`` placed by ``pose``.

    ``eps1`` shapes the profile along the local z (principal) axis and ``eps2``
    the cross-section orthogonal to it.
    """

    eps1: float
    eps2: float
    ax: float
    ay: float
    az: float
    pose: Pose = field(default_factory=Pose)

    def __post_init__(self):
        for name in ("eps1", "eps2", "ax", "ay", "az"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not (0.0 <= self.eps1 <= 2.0 and 0.0 <= self.eps2 <= 2.0):
            raise ValueError(f"shape exponents must lie in [0, 2], got ({self.eps1}, {self.eps2})")
        if not (self.ax > 0 and self.ay > 0 and self.az > 0):
            raise ValueError(f"scales must be positive, got ({self.ax}, {self.ay}, {self.az})")

    @property
    def shape(self) -> np.ndarray:
        return np.array([self.eps1, self.eps2, self.ax, self.ay, self.az])

    @property
    def scales(self) -> np.ndarray:
        return np.array([self.ax, self.ay, self.az])

    @property
    def rotation(self) -> np.ndarray:
        return self.pose.matrix

    @property
    def translation(self) -> np.ndarray:
        return self.pose.translation

    def replace(self, **changes) -> "Superquadric":
        values = dict(eps1=self.eps1, eps2=self.eps2, ax=self.ax, ay=self.ay, az=self.az, pose=self.pose)
        values.update(changes)
        return Superquadric(**values)

    def transformed(self, pose: Pose) -> "Superquadric":
        """The same solid moved rigidly by ``pose`` (world-frame motion)."""
        return self.replace(pose=pose.compose(self.pose))

    def __repr__(self) -> str:
        t = np.array2string(self.translation, precision=4)
        return (
            f"Superquadric(eps=({self.eps1:.4g}, {self.eps2:.4g}), "
            f"a=({self.ax:.4g}, {self.ay:.4g}, {self.az:.4g}), t={t})"
        )


def _implicit_from_log_norm(nu, eps1):
    if eps1 > 0.0:
        with np.errstate(over="ignore"):
            return np.exp((2.0 / eps1) * nu)
    return np.where(nu > 0.0, np.inf, np.where(nu < 0.0, 0.0, 1.0))


def implicit_value(sq: Superquadric, points_local) -> np.ndarray | float:
    """Inside-outside function F; < 1 inside, 1 on the surface, > 1 outside.

    Evaluated as ``exp(2/eps1 * log_norm)``, so very small exponents saturate to
    0 or inf away from the surface instead of raising.
    """
    pts = np.asarray(points_local, dtype=np.float64)
    out = _implicit_from_log_norm(kernels.log_norm(pts, sq.shape), sq.eps1)
    return float(out[0]) if pts.ndim == 1 else out


def implicit_gradient(sq: Superquadric, points_local) -> np.ndarray:
    """Gradient of F in the local frame; coordinates exactly on a symmetry plane get 0."""
    if sq.eps1 == 0.0:
        raise ValueError("F is not differentiable at eps1 = 0")
    pts = np.asarray(points_local, dtype=np.float64)
    flat = pts.reshape(-1, 3)
    f = _implicit_from_log_norm(kernels.log_norm(flat, sq.shape), sq.eps1)
    g = (2.0 / sq.eps1) * f[:, None] * kernels.log_norm_gradient(flat, sq.shape)
    return g[0] if pts.ndim == 1 else g


def radial_project_local(sq: Superquadric, points_local) -> np.ndarray:
    pts = np.asarray(points_local, dtype=np.float64).reshape(-1, 3)
    scale = np.exp(-kernels.log_norm(pts, sq.shape))
    out = pts * scale[:, None]
    origin = ~np.any(pts != 0.0, axis=1)
    out[origin] = (0.0, 0.0, sq.az)
    return out


def radial_project(sq: Superquadric, points) -> np.ndarray:
    """Intersect the local ray from the centre through each point with the surface.

    The centre itself maps to the local ``+z`` pole.
    """
    pts = np.asarray(points, dtype=np.float64)
    local = sq.pose.to_local(pts.reshape(-1, 3))
    out = sq.pose.to_world(radial_project_local(sq, local))
    return out[0] if pts.ndim == 1 else out


def radial_distance(sq: Superquadric, points) -> np.ndarray:
    """Unsigned distance from each point to its radial projection."""
    local = sq.pose.to_local(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    return np.abs(kernels.radial_residual(local, sq.shape))


# ---------------------------------------------------------------------------
# 2-D superellipse helpers
# ---------------------------------------------------------------------------


def _superellipse(phi, a1, a2, eps):
    """Point on ``|x/a1|^(2/eps) + |y/a2|^(2/eps) = 1`` and its derivative in ``phi``.

    ``phi`` is the polar angle of the point after dividing by the scales, so the
    corners of the eps -> 0 rectangle always sit at odd multiples of 45 degrees.
    Returns ``(x, y, dx, dy)``.
    """
    c, s = np.cos(phi), np.sin(phi)
    ac = np.maximum(np.abs(c), kernels.COORD_FLOOR)
    as_ = np.maximum(np.abs(s), kernels.COORD_FLOOR)
    lognorm, w1, _ = kernels._soft_max_np(np.log(ac), np.log(as_), eps)
    g = np.exp(-lognorm)
    dg = g * ((1.0 - w1) * -c * np.sign(s) / as_ + w1 * s * np.sign(c) / ac)
    return a1 * c * g, a2 * s * g, a1 * (c * dg - s * g), a2 * (s * dg + c * g)


def _curve_table(a1, a2, eps, lo, hi, n=_FINE_CURVE):
    phi = np.linspace(lo, hi, n + 1)
    x, y, _, _ = _superellipse(phi, a1, a2, eps)
    seg = np.hypot(np.diff(x), np.diff(y))
    arc = np.concatenate(([0.0], np.cumsum(seg)))
    return phi, x, y, arc


# ---------------------------------------------------------------------------
# surface area
# ---------------------------------------------------------------------------


def surface_area_quadrature(sq: Superquadric, n_eta: int = 200, n_omega: int = 400) -> float:
    """Midpoint-rule surface integral over a latitude/longitude grid.

    The surface is written as ``(rho(eta) q(omega), z(eta))`` where ``q`` runs
    over the cross-section curve at unit cross-section norm and ``(rho, z)``
    over the profile curve.
    """
    h_eta = math.pi / n_eta
    h_om = 2.0 * math.pi / n_omega
    eta = -0.5 * math.pi + h_eta * (np.arange(n_eta) + 0.5)
    om = -math.pi + h_om * (np.arange(n_omega) + 0.5)

    rho, _, drho, dz = _superellipse(eta, 1.0, sq.az, sq.eps1)
    qx, qy, dqx, dqy = _superellipse(om, sq.ax, sq.ay, sq.eps2)
    q1 = dqx * dqx + dqy * dqy  # |q'|^2
    q2 = (qx * dqy - qy * dqx) ** 2  # (q x q')^2

    integrand = np.abs(rho)[:, None] * np.sqrt(
        (dz * dz)[:, None] * q1[None, :] + (drho * drho)[:, None] * q2[None, :]
    )
    return float(integrand.sum() * h_eta * h_om)


def corner_areas(ax: float, ay: float, az: float) -> np.ndarray:
    """Closed-form areas of the limit solids, indexed ``[eps1 in {0,2}, eps2 in {0,2}]``."""
    cuboid = 8.0 * (ax * ay + ay * az + ax * az)
    rhombic_prism = 4.0 * ax * ay + 8.0 * az * math.hypot(ax, ay)
    bipyramid = 4.0 * ax * math.hypot(ay, az) + 4.0 * ay * math.hypot(ax, az)
    octahedron = 4.0 * math.sqrt((ax * ay) ** 2 + (ay * az) ** 2 + (ax * az) ** 2)
    return np.array([[cuboid, rhombic_prism], [bipyramid, octahedron]])


def surface_area_fast(sq: Superquadric) -> float:
    """Bilinear interpolation in (eps1, eps2) between the four limit-solid areas."""
    c = corner_areas(sq.ax, sq.ay, sq.az)
    u = min(max(sq.eps1, 0.0), 2.0) / 2.0
    v = min(max(sq.eps2, 0.0), 2.0) / 2.0
    return float(
        (1 - u) * (1 - v) * c[0, 0] + (1 - u) * v * c[0, 1] + u * (1 - v) * c[1, 0] + u * v * c[1, 1]
    )


def corner_area_gradients(ax: float, ay: float, az: float) -> np.ndarray:
    """Derivatives of :func:`corner_areas` w.r.t. ``(ax, ay, az)``, shape ``(2, 2, 3)``."""
    g = np.empty((2, 2, 3))
    g[0, 0] = 8.0 * np.array([ay + az, ax + az, ax + ay])
    h = math.hypot(ax, ay)
    g[0, 1] = [4.0 * ay + 8.0 * az * ax / h, 4.0 * ax + 8.0 * az * ay / h, 8.0 * h]
    h1, h2 = math.hypot(ay, az), math.hypot(ax, az)
    g[1, 0] = [
        4.0 * h1 + 4.0 * ay * ax / h2,
        4.0 * ax * ay / h1 + 4.0 * h2,
        4.0 * ax * az / h1 + 4.0 * ay * az / h2,
    ]
    root = math.sqrt((ax * ay) ** 2 + (ay * az) ** 2 + (ax * az) ** 2)
    g[1, 1] = 4.0 * np.array([ax * (ay**2 + az**2), ay * (ax**2 + az**2), az * (ax**2 + ay**2)]) / root
    return g


def surface_area_fast_gradient(sq: Superquadric) -> np.ndarray:
    """Gradient of :func:`surface_area_fast` w.r.t. ``(eps1, eps2, ax, ay, az)``."""
    c = corner_areas(sq.ax, sq.ay, sq.az)
    gc = corner_area_gradients(sq.ax, sq.ay, sq.az)
    u = min(max(sq.eps1, 0.0), 2.0) / 2.0
    v = min(max(sq.eps2, 0.0), 2.0) / 2.0
    wts = np.array([[(1 - u) * (1 - v), (1 - u) * v], [u * (1 - v), u * v]])
    out = np.empty(5)
    out[0] = 0.5 * ((1 - v) * (c[1, 0] - c[0, 0]) + v * (c[1, 1] - c[0, 1]))
    out[1] = 0.5 * ((1 - u) * (c[0, 1] - c[0, 0]) + u * (c[1, 1] - c[1, 0]))
    out[2:] = np.einsum("ij,ijk->k", wts, gc)
    return out


def surface_area(sq: Superquadric, mode: str = "fast") -> float:
    if mode == "fast":
        return surface_area_fast(sq)
    if mode == "quadrature":
        return surface_area_quadrature(sq)
    raise ValueError(f"unknown area mode {mode!r}")


# ---------------------------------------------------------------------------
# equal-distance surface sampling
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SurfaceSamples:
    points: np.ndarray
    spacing: float

    def __len__(self) -> int:
        return len(self.points)


def _sample_local(sq: Superquadric, spacing: float) -> np.ndarray:
    # cross-section curve with unit "radius": rho(q) == 1
    phi, qx, qy, qarc = _curve_table(sq.ax, sq.ay, sq.eps2, 0.0, 2.0 * math.pi)
    perimeter = qarc[-1]
    reach = float(np.max(np.hypot(qx, qy)))

    # profile curve (rho, z) from the south to the north pole; the horizontal
    # axis is stretched by the widest cross-section direction so that band gaps
    # never exceed the spacing anywhere around the ring
    psi = np.linspace(-0.5 * math.pi, 0.5 * math.pi, _FINE_CURVE + 1)
    rho, z, _, _ = _superellipse(psi, 1.0, sq.az, sq.eps1)
    parc = np.concatenate(([0.0], np.cumsum(np.hypot(np.diff(rho) * reach, np.diff(z)))))
    n_bands = max(1, math.ceil(parc[-1] / spacing - 1e-9))
    band_psi = np.interp(np.linspace(0.0, parc[-1], n_bands + 1), parc, psi)
    band_rho, band_z, _, _ = _superellipse(band_psi, 1.0, sq.az, sq.eps1)
    band_psi[0], band_psi[-1] = -0.5 * math.pi, 0.5 * math.pi
    band_rho[0] = band_rho[-1] = 0.0
    band_z[0], band_z[-1] = -sq.az, sq.az

    chunks = []
    for k, (rk, zk) in enumerate(zip(band_rho, band_z)):
        count = math.ceil(rk * perimeter / spacing - 1e-9)
        if rk <= 0.0 or count <= 1:
            chunks.append(np.array([[0.0, 0.0, zk]]) if rk <= 0.0 or count < 1 else
                          np.array([[rk * qx[0], rk * qy[0], zk]]))
            continue
        offset = 0.5 * (k % 2)
        s = (np.arange(count) + offset) * (perimeter / count)
        ang = np.interp(s, qarc, phi)
        cx, cy, _, _ = _superellipse(ang, sq.ax, sq.ay, sq.eps2)
        chunks.append(np.column_stack((rk * cx, rk * cy, np.full(count, zk))))
    pts = np.concatenate(chunks)
    if len(pts) < 8:
        extremes = np.array(
            [[sq.ax, 0, 0], [-sq.ax, 0, 0], [0, sq.ay, 0], [0, -sq.ay, 0], [0, 0, sq.az], [0, 0, -sq.az]],
            dtype=np.float64,
        )
        pts = np.unique(np.concatenate((extremes, pts)), axis=0)
    return pts


def sample_surface_equidistant(sq: Superquadric, spacing: float) -> SurfaceSamples:
    """Approximately equal-distance samples of the surface, in world coordinates.

    Latitude bands are placed at equal arc length along the profile curve; each
    band then receives a number of samples proportional to its circumference.
    """
    if not spacing > 0:
        raise ValueError("spacing must be positive")
    local = _sample_local(sq, float(spacing))
    return SurfaceSamples(points=sq.pose.to_world(local), spacing=float(spacing))
