"""Hot per-point kernels for superquadric evaluation.

Every kernel exists twice: an explicit loop compiled with ``numba.njit`` and a
vectorized numpy version. The numba path is used when numba imports and the
environment variable ``SQEMS_DISABLE_NUMBA`` is unset (or ``0``).

Shape parameters are passed as a length-5 float array
``(eps1, eps2, ax, ay, az)``; points are ``(N, 3)`` arrays already expressed in
the superquadric frame.

Everything is computed through the log of the *radial norm*
``nu(p) = F(p)^(eps1/2)``, which is homogeneous of degree one in ``p``::

    rho = max(lx, ly) + eps2/2 * log1p(exp(-2|lx - ly| / eps2))    # log cross-section norm
    nu  = max(rho, lz) + eps1/2 * log1p(exp(-2|rho - lz| / eps1))

with ``lx = log(|x| / ax)`` etc. The form never overflows and has the exact
cuboid/cylinder limit at ``eps = 0``, where it reduces to a max.
"""

from __future__ import annotations

import math
import os

import numpy as np
from scipy.special import expit

EPS_MIN = 0.007  # lower bound on the shape exponents during fitting
COORD_FLOOR = 1e-300

_disabled = os.environ.get("SQEMS_DISABLE_NUMBA", "0").strip().lower() not in ("", "0", "false", "no")

try:
    if _disabled:
        raise ImportError("numba disabled by SQEMS_DISABLE_NUMBA")
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:
    NUMBA_AVAILABLE = False

BACKEND = "numba" if NUMBA_AVAILABLE else "numpy"


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------


def _soft_max_np(a, b, eps):
    """``eps/2 * logaddexp(2a/eps, 2b/eps)`` and the weight of ``a``; exact max at eps = 0."""
    gap = np.abs(a - b)
    hi = np.maximum(a, b)
    if eps > 0.0:
        t = 2.0 * gap / eps
        val = hi + 0.5 * eps * np.log1p(np.exp(-t))
        wa = expit(2.0 * (a - b) / eps)
    else:
        t = np.where(gap > 0.0, np.inf, 0.0)
        val = hi
        wa = np.where(a > b, 1.0, np.where(a < b, 0.0, 0.5))
    return val, wa, t


def _soft_max_deps_np(t):
    """Derivative of the soft max w.r.t. eps, as a function of ``t = 2|a-b|/eps``."""
    with np.errstate(invalid="ignore", over="ignore"):
        out = 0.5 * (t * expit(-t) + np.log1p(np.exp(-t)))
    return np.where(t > 700.0, 0.0, out)


def _log_norm_terms_np(points, shape):
    e1, e2, ax, ay, az = shape
    absp = np.maximum(np.abs(points), COORD_FLOOR)
    lx = np.log(absp[:, 0]) - math.log(ax)
    ly = np.log(absp[:, 1]) - math.log(ay)
    lz = np.log(absp[:, 2]) - math.log(az)
    rho, wx, t2 = _soft_max_np(lx, ly, e2)
    nu, wr, t1 = _soft_max_np(rho, lz, e1)
    return nu, rho, wx, wr, t1, t2


def log_norm_numpy(points, shape):
    return _log_norm_terms_np(points, shape)[0]


def radial_residual_numpy(points, shape):
    nu = log_norm_numpy(points, shape)
    norm = np.sqrt(np.einsum("ij,ij->i", points, points))
    with np.errstate(invalid="ignore", over="ignore"):
        r = norm * (1.0 - np.exp(-nu))
    return np.where(norm > 0.0, r, -shape[4])


def radial_jacobian_numpy(points, shape):
    e1, e2, ax, ay, az = shape
    nu, _, wx, wr, t1, t2 = _log_norm_terms_np(points, shape)
    wy = 1.0 - wx
    wz = 1.0 - wr
    dnu = np.empty((points.shape[0], 5))
    dnu[:, 0] = _soft_max_deps_np(t1)
    dnu[:, 1] = wr * _soft_max_deps_np(t2)
    dnu[:, 2] = -wr * wx / ax
    dnu[:, 3] = -wr * wy / ay
    dnu[:, 4] = -wz / az

    absp = np.abs(points)
    safe = np.where(absp >= COORD_FLOOR, points, 1.0)
    dnp = np.column_stack((wr * wx, wr * wy, wz)) / safe
    dnp[absp < COORD_FLOOR] = 0.0

    norm = np.sqrt(np.einsum("ij,ij->i", points, points))
    good = norm > 0.0
    with np.errstate(invalid="ignore", over="ignore"):
        h = np.exp(-nu)
        nh = np.where(good, norm * h, 0.0)
        r = np.where(good, norm * (1.0 - h), -az)
        jshape = nh[:, None] * dnu
        unit = points / np.where(good, norm, 1.0)[:, None]
        jp = unit * (1.0 - h)[:, None] + nh[:, None] * dnp
    jshape[~good] = 0.0
    jshape[~good, 4] = -1.0
    jp[~good] = 0.0
    return r, jshape, jp


def log_norm_gradient_numpy(points, shape):
    _, _, wx, wr, _, _ = _log_norm_terms_np(points, shape)
    absp = np.abs(points)
    safe = np.where(absp >= COORD_FLOOR, points, 1.0)
    g = np.column_stack((wr * wx, wr * (1.0 - wx), 1.0 - wr)) / safe
    g[absp < COORD_FLOOR] = 0.0
    return g


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if NUMBA_AVAILABLE:

    @njit(cache=True, inline="always")
    def _expit(t):
        if t >= 0.0:
            return 1.0 / (1.0 + math.exp(-t))
        e = math.exp(t)
        return e / (1.0 + e)

    @njit(cache=True, inline="always")
    def _soft_max(a, b, eps):
        gap = abs(a - b)
        hi = max(a, b)
        if eps > 0.0:
            t = 2.0 * gap / eps
            return hi + 0.5 * eps * math.log1p(math.exp(-t)), _expit(2.0 * (a - b) / eps), t
        if a > b:
            return hi, 1.0, math.inf
        if a < b:
            return hi, 0.0, math.inf
        return hi, 0.5, 0.0

    @njit(cache=True, inline="always")
    def _soft_max_deps(t):
        if t > 700.0:
            return 0.0
        return 0.5 * (t * _expit(-t) + math.log1p(math.exp(-t)))

    @njit(cache=True, inline="always")
    def _logs(x, y, z, ax, ay, az):
        lx = math.log(max(abs(x), COORD_FLOOR)) - math.log(ax)
        ly = math.log(max(abs(y), COORD_FLOOR)) - math.log(ay)
        lz = math.log(max(abs(z), COORD_FLOOR)) - math.log(az)
        return lx, ly, lz

    @njit(cache=True, nogil=True)
    def log_norm_numba(points, shape):
        n = points.shape[0]
        out = np.empty(n)
        e1, e2, ax, ay, az = shape[0], shape[1], shape[2], shape[3], shape[4]
        for i in range(n):
            lx, ly, lz = _logs(points[i, 0], points[i, 1], points[i, 2], ax, ay, az)
            rho, _, _ = _soft_max(lx, ly, e2)
            nu, _, _ = _soft_max(rho, lz, e1)
            out[i] = nu
        return out

    @njit(cache=True, nogil=True)
    def radial_residual_numba(points, shape):
        n = points.shape[0]
        out = np.empty(n)
        e1, e2, ax, ay, az = shape[0], shape[1], shape[2], shape[3], shape[4]
        for i in range(n):
            x, y, z = points[i, 0], points[i, 1], points[i, 2]
            norm = math.sqrt(x * x + y * y + z * z)
            if norm == 0.0:
                out[i] = -az
                continue
            lx, ly, lz = _logs(x, y, z, ax, ay, az)
            rho, _, _ = _soft_max(lx, ly, e2)
            nu, _, _ = _soft_max(rho, lz, e1)
            out[i] = norm * (1.0 - math.exp(-nu))
        return out

    @njit(cache=True, nogil=True)
    def radial_jacobian_numba(points, shape):
        n = points.shape[0]
        r = np.empty(n)
        jshape = np.zeros((n, 5))
        jp = np.zeros((n, 3))
        e1, e2, ax, ay, az = shape[0], shape[1], shape[2], shape[3], shape[4]
        for i in range(n):
            x, y, z = points[i, 0], points[i, 1], points[i, 2]
            norm = math.sqrt(x * x + y * y + z * z)
            if norm == 0.0:
                r[i] = -az
                jshape[i, 4] = -1.0
                continue
            lx, ly, lz = _logs(x, y, z, ax, ay, az)
            rho, wx, t2 = _soft_max(lx, ly, e2)
            nu, wr, t1 = _soft_max(rho, lz, e1)
            wy = 1.0 - wx
            wz = 1.0 - wr
            h = math.exp(-nu)
            nh = norm * h
            r[i] = norm * (1.0 - h)
            jshape[i, 0] = nh * _soft_max_deps(t1)
            jshape[i, 1] = nh * wr * _soft_max_deps(t2)
            jshape[i, 2] = -nh * wr * wx / ax
            jshape[i, 3] = -nh * wr * wy / ay
            jshape[i, 4] = -nh * wz / az
            c = (1.0 - h) / norm
            gx = wr * wx / x if abs(x) >= COORD_FLOOR else 0.0
            gy = wr * wy / y if abs(y) >= COORD_FLOOR else 0.0
            gz = wz / z if abs(z) >= COORD_FLOOR else 0.0
            jp[i, 0] = c * x + nh * gx
            jp[i, 1] = c * y + nh * gy
            jp[i, 2] = c * z + nh * gz
        return r, jshape, jp

    @njit(cache=True, nogil=True)
    def log_norm_gradient_numba(points, shape):
        n = points.shape[0]
        g = np.zeros((n, 3))
        e1, e2, ax, ay, az = shape[0], shape[1], shape[2], shape[3], shape[4]
        for i in range(n):
            x, y, z = points[i, 0], points[i, 1], points[i, 2]
            lx, ly, lz = _logs(x, y, z, ax, ay, az)
            rho, wx, _ = _soft_max(lx, ly, e2)
            _, wr, _ = _soft_max(rho, lz, e1)
            if abs(x) >= COORD_FLOOR:
                g[i, 0] = wr * wx / x
            if abs(y) >= COORD_FLOOR:
                g[i, 1] = wr * (1.0 - wx) / y
            if abs(z) >= COORD_FLOOR:
                g[i, 2] = (1.0 - wr) / z
        return g

else:  # pragma: no cover - exercised only when numba is absent or disabled
    log_norm_numba = None
    radial_residual_numba = None
    radial_jacobian_numba = None
    log_norm_gradient_numba = None


def _as_inputs(points, shape):
    pts = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
    shp = np.ascontiguousarray(shape, dtype=np.float64)
    return pts, shp


def log_norm(points, shape):
    """``log F(p)^(eps1/2)`` for each local point: 0 on the surface, < 0 inside."""
    pts, shp = _as_inputs(points, shape)
    if NUMBA_AVAILABLE:
        return log_norm_numba(pts, shp)
    return log_norm_numpy(pts, shp)


def radial_residual(points, shape):
    """Signed radial distance ``|p| (1 - F(p)^(-eps1/2))``; positive outside."""
    pts, shp = _as_inputs(points, shape)
    if NUMBA_AVAILABLE:
        return radial_residual_numba(pts, shp)
    return radial_residual_numpy(pts, shp)


def radial_jacobian(points, shape):
    """Residuals plus derivatives w.r.t. the 5 shape parameters and local coordinates.

    Returns ``(r, d_shape, d_point)`` with shapes ``(N,)``, ``(N, 5)`` and ``(N, 3)``.
    """
    pts, shp = _as_inputs(points, shape)
    if NUMBA_AVAILABLE:
        return radial_jacobian_numba(pts, shp)
    return radial_jacobian_numpy(pts, shp)


def log_norm_gradient(points, shape):
    """Gradient of :func:`log_norm` w.r.t. the local coordinates (0 on symmetry planes)."""
    pts, shp = _as_inputs(points, shape)
    if NUMBA_AVAILABLE:
        return log_norm_gradient_numba(pts, shp)
    return log_norm_gradient_numpy(pts, shp)
