"""Gaussian-uniform mixture on a superquadric surface.

Inliers are isotropic Gaussians centred on the surface, outliers are uniform
over a bounding workspace. This module holds the E-step (radial correspondences
and posterior inlier probabilities), the closed-form variance update and the
negative log-likelihood.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import kernels
from .geometry import Superquadric, surface_area


class AllOutliersError(RuntimeError):
    """Every point has zero posterior inlier probability."""


@dataclass(frozen=True)
class GumConfig:
    w_o: float = 0.1
    volume: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.w_o < 1.0:
            raise ValueError(f"w_o must lie in [0, 1), got {self.w_o}")
        if not self.volume > 0.0:
            raise ValueError(f"workspace volume must be positive, got {self.volume}")

    @property
    def p_o(self) -> float:
        return 1.0 / self.volume


@dataclass(frozen=True)
class GumState:
    sigma2: float

    def __post_init__(self):
        if not self.sigma2 > 0.0:
            raise ValueError(f"sigma2 must be positive, got {self.sigma2}")

    @property
    def log_c(self) -> float:
        """Log of the Gaussian normaliser ``(2 pi sigma2)^(-3/2)``."""
        return -1.5 * math.log(2.0 * math.pi * self.sigma2)

    @property
    def c(self) -> float:
        return math.exp(self.log_c)


@dataclass(frozen=True, eq=False)
class Correspondences:
    mu_hat: np.ndarray
    z_hat: np.ndarray
    residual_sq: np.ndarray

    def __len__(self) -> int:
        return len(self.z_hat)


def _log_outlier_odds(cfg: GumConfig) -> float:
    return math.log(cfg.w_o * cfg.p_o / (1.0 - cfg.w_o))


def posterior_inlier(residual_sq, cfg: GumConfig, st: GumState) -> np.ndarray:
    """Posterior probability of the Gaussian component for each squared residual."""
    residual_sq = np.asarray(residual_sq, dtype=np.float64)
    if cfg.w_o == 0.0:
        return np.ones_like(residual_sq)
    log_gauss = st.log_c - residual_sq / (2.0 * st.sigma2)
    return expit(log_gauss - _log_outlier_odds(cfg))


def e_step(sq: Superquadric, cloud: np.ndarray, cfg: GumConfig, st: GumState) -> Correspondences:
    local = sq.pose.to_local(cloud)
    mu_local = local * np.exp(-kernels.log_norm(local, sq.shape))[:, None]
    origin = ~np.any(local != 0.0, axis=1)
    mu_local[origin] = (0.0, 0.0, sq.az)
    mu = sq.pose.to_world(mu_local)
    residual_sq = np.sum((cloud - mu) ** 2, axis=1)
    return Correspondences(mu_hat=mu, z_hat=posterior_inlier(residual_sq, cfg, st), residual_sq=residual_sq)


def sigma2_update(corr: Correspondences, sigma2_min: float = 0.0) -> float:
    """Stationary point of the expected NLL in the noise variance (3-D isotropic)."""
    zsum = float(np.sum(corr.z_hat))
    if not zsum > 0.0:
        raise AllOutliersError("all points classified outliers")
    sigma2 = float(np.dot(corr.z_hat, corr.residual_sq)) / (3.0 * zsum)
    return max(sigma2, sigma2_min)


def negative_log_likelihood(
    sq: Superquadric,
    cloud: np.ndarray,
    cfg: GumConfig,
    st: GumState,
    corr: Correspondences,
    area_mode: str = "fast",
) -> float:
    """Expected NLL with correspondences and inlier weights held fixed.

    ``sum_i z_i (|x_i - mu_i|^2 / (2 sigma2) - log c) + N log A``; ``cfg`` is
    accepted for symmetry with :func:`observed_nll` and does not enter.
    """
    n = len(cloud)
    gauss = float(np.dot(corr.z_hat, corr.residual_sq / (2.0 * st.sigma2) - st.log_c))
    return gauss + n * math.log(surface_area(sq, area_mode))


def observed_nll(
    sq: Superquadric,
    cloud: np.ndarray,
    cfg: GumConfig,
    st: GumState,
    area_mode: str = "fast",
    residual_sq: np.ndarray | None = None,
    include_area: bool = True,
) -> float:
    """NLL with the inlier/outlier membership marginalised out.

    ``-sum_i log((1 - w_o) N(x_i | mu_i, sigma2) + w_o p_o) + N log A``. It equals
    :func:`negative_log_likelihood` at ``z = 1`` when ``w_o = 0`` and is the
    quantity an EM iteration is guaranteed not to increase. With
    ``include_area=False`` the ``N log A`` term is dropped.
    """
    if residual_sq is None:
        local = sq.pose.to_local(cloud)
        residual_sq = kernels.radial_residual(local, sq.shape) ** 2
    log_gauss = st.log_c - residual_sq / (2.0 * st.sigma2)
    if cfg.w_o == 0.0:
        per_point = log_gauss
    else:
        per_point = np.logaddexp(math.log1p(-cfg.w_o) + log_gauss, math.log(cfg.w_o * cfg.p_o))
    nll = -float(np.sum(per_point))
    if include_area:
        nll += len(residual_sq) * math.log(surface_area(sq, area_mode))
    return nll


def workspace_volume(cloud: np.ndarray, margin: float = 0.1) -> float:
    """Volume of the bounding box grown by ``margin`` of its extent on each side.

    Flat directions are thickened to 1% of the largest extent.
    """
    cloud = np.asarray(cloud, dtype=np.float64)
    ext = cloud.max(axis=0) - cloud.min(axis=0)
    big = float(ext.max())
    if big <= 0.0:
        big = 1.0
    ext = np.maximum(ext, 0.01 * big)
    return float(np.prod(ext * (1.0 + 2.0 * margin)))
