"""Stochastic ensemble Kalman filter with perturbed observations.

The analysis is computed in representer form: one observation-space system
is factorized once and solved for every member. The constrained variant
left-multiplies the (possibly tapered) gain by ``I - u_perp u_perp^T`` so the
update never touches the linear invariants.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.linalg import cho_solve, cholesky

from .errors import (
    ConfigError,
    DimensionError,
    Diverged,
    EnsembleTooSmall,
    SingularInnovationCovariance,
)
from .invariant_subspace import SubUnitaryBasis

JITTER_START = 1e-12
JITTER_MAX = 1e-6
COND_MAX = 1e14

TAPER_METRICS = ("index", "euclidean", "periodic")


@dataclass(frozen=True, eq=False)
class Ensemble:
    """Ensemble states stored column-wise, optionally paired with simulated observations."""

    states: np.ndarray
    obs: np.ndarray | None = None

    def __post_init__(self):
        x = np.asarray(self.states, dtype=float)
        if x.ndim != 2:
            raise DimensionError("ensemble states must be an (n, M) matrix")
        if x.shape[1] < 2:
            raise EnsembleTooSmall(f"need at least two members, got {x.shape[1]}")
        object.__setattr__(self, "states", x)
        if self.obs is not None:
            y = np.atleast_2d(np.asarray(self.obs, dtype=float))
            if y.shape[1] != x.shape[1]:
                raise DimensionError("obs must pair column-to-column with states")
            object.__setattr__(self, "obs", y)

    @property
    def n(self) -> int:
        return self.states.shape[0]

    @property
    def M(self) -> int:
        return self.states.shape[1]

    @property
    def mean(self) -> np.ndarray:
        return self.states.mean(axis=1)

    @property
    def finite(self) -> bool:
        return bool(np.all(np.isfinite(self.states)))


@dataclass(frozen=True)
class EnKFConfig:
    """Regularization and variant switches for the EnKF analysis.

    ``taper_radius=None`` (or ``inf``) disables tapering. ``noise_cov``
    selects the observation-noise term of the innovation covariance:
    ``"sample"`` (default) uses the centered sample covariance of the drawn
    perturbations, ``"exact"`` uses ``sigma_E**2 I``. The sample form is rank
    deficient when ``M <= d``; at ``M = d`` it removes all analysis spread.
    """

    beta: float = 1.0
    taper_radius: float | None = None
    taper_metric: str = "index"
    constrained: bool = False
    sequential: bool = False
    noise_cov: str = "sample"

    def __post_init__(self):
        if not self.beta >= 1.0:
            raise ConfigError(f"inflation must be >= 1, got {self.beta}")
        if self.taper_radius is not None and not self.taper_radius > 0:
            raise ConfigError("taper radius must be positive")
        if self.taper_metric not in TAPER_METRICS:
            raise ConfigError(f"unknown taper metric {self.taper_metric!r}")
        if self.noise_cov not in ("exact", "sample"):
            raise ConfigError(f"unknown noise covariance {self.noise_cov!r}")

    @property
    def tapered(self) -> bool:
        return self.taper_radius is not None and math.isfinite(self.taper_radius)


def _states(ensemble) -> np.ndarray:
    x = ensemble.states if isinstance(ensemble, Ensemble) else np.asarray(ensemble, dtype=float)
    if x.ndim != 2:
        raise DimensionError("ensemble must be an (n, M) matrix")
    return x


def anomalies(ensemble) -> np.ndarray:
    """Centered members scaled by ``1/sqrt(M - 1)``, so ``A A^T`` is the sample covariance."""
    x = _states(ensemble)
    m = x.shape[1]
    if m < 2:
        raise EnsembleTooSmall(f"need at least two members, got {m}")
    return (x - x.mean(axis=1, keepdims=True)) / math.sqrt(m - 1)


def multiplicative_inflation(ensemble, beta: float, u_para=None) -> np.ndarray:
    """Scale anomalies about the ensemble mean by ``beta``.

    With ``u_para`` only the anomaly components in ``span(u_para)`` are
    scaled, so ``u_perp^T x`` of every member is left untouched.
    """
    if not beta >= 1.0:
        raise ConfigError(f"inflation must be >= 1, got {beta}")
    x = _states(ensemble)
    if beta == 1.0:
        return x.copy()
    a = x - x.mean(axis=1, keepdims=True)
    if u_para is None:
        return x + (beta - 1.0) * a
    u_para = np.asarray(u_para, dtype=float)
    return x + (beta - 1.0) * (u_para @ (u_para.T @ a))


def gaspari_cohn(dist, radius: float):
    """Fifth-order piecewise rational correlation with support ``2 * radius``."""
    if not radius > 0:
        raise ConfigError("taper radius must be positive")
    z = np.abs(np.asarray(dist, dtype=float)) / radius
    out = np.zeros_like(z)
    inner = z <= 1.0
    zi = z[inner]
    out[inner] = (((-0.25 * zi + 0.5) * zi + 0.625) * zi - 5.0 / 3.0) * zi**2 + 1.0
    outer = (z > 1.0) & (z < 2.0)
    zo = z[outer]
    out[outer] = ((((zo / 12.0 - 0.5) * zo + 0.625) * zo + 5.0 / 3.0) * zo - 5.0) * zo + 4.0 - 2.0 / (3.0 * zo)
    return out if out.ndim else float(out)


def grid_distance(i, j, n: int, metric: str = "index"):
    """Distance between grid indices; ``periodic`` wraps around a ring of ``n`` nodes."""
    diff = np.abs(np.subtract.outer(np.asarray(i, dtype=float), np.asarray(j, dtype=float)))
    if metric == "periodic":
        return np.minimum(diff, n - diff)
    if metric in ("index", "euclidean"):
        return diff
    raise ConfigError(f"unknown taper metric {metric!r}")


@lru_cache(maxsize=64)
def _taper_cached(n: int, obs_loc: tuple, radius: float, metric: str):
    state_loc = np.arange(n)
    obs = np.asarray(obs_loc)
    rho_xy = gaspari_cohn(grid_distance(state_loc, obs, n, metric), radius)
    rho_yy = gaspari_cohn(grid_distance(obs, obs, n, metric), radius)
    rho_xy.setflags(write=False)
    rho_yy.setflags(write=False)
    return rho_xy, rho_yy


def taper_matrices(n: int, obs_locations, radius: float, metric: str = "index"):
    """State-observation and observation-observation taper matrices."""
    return _taper_cached(int(n), tuple(int(v) for v in np.asarray(obs_locations).ravel()),
                         float(radius), metric)


def _factor_spd(c: np.ndarray):
    """Cholesky factor with jitter escalation."""
    d = c.shape[0]
    scale = np.trace(c) / d
    if not (np.isfinite(scale) and scale > 0):
        raise SingularInnovationCovariance("innovation covariance is zero or non-finite")
    jitter = 0.0
    while True:
        try:
            low = cholesky(c + jitter * scale * np.eye(d), lower=True, check_finite=False)
            diag = np.diag(low)
            if (diag.max() / diag.min()) ** 2 <= COND_MAX:
                return low
        except np.linalg.LinAlgError:
            pass
        jitter = JITTER_START if jitter == 0.0 else 10.0 * jitter
        if jitter > JITTER_MAX * (1 + 1e-9):
            raise SingularInnovationCovariance("innovation covariance is numerically singular")


def _representer_update(x, y_star, g, sigma_e, rng, u_perp, rho_xy=None, rho_yy=None,
                        noise_cov="sample"):
    """One perturbed-observation update; returns the analysis states."""
    d = g.shape[0]
    m = x.shape[1]
    eps = sigma_e * rng.standard_normal((d, m))
    a_x = anomalies(x)
    ga = g @ a_x
    c_yy = ga @ ga.T
    c_xy = a_x @ ga.T
    if rho_yy is not None:
        c_yy = rho_yy * c_yy
        c_xy = rho_xy * c_xy
    if noise_cov == "sample":
        a_e = anomalies(eps)
        c_yy = c_yy + a_e @ a_e.T
    else:
        c_yy = c_yy + sigma_e**2 * np.eye(d)
    innov = g @ x + eps - y_star[:, None]
    b = cho_solve((_factor_spd(c_yy), True), innov, check_finite=False)
    if u_perp is not None and u_perp.shape[1]:
        c_xy = c_xy - u_perp @ (u_perp.T @ c_xy)
    xa = x - c_xy @ b
    if not np.all(np.isfinite(xa)):
        raise Diverged("non-finite analysis ensemble")
    return xa


def _prepare(ensemble, y_star, model, config: EnKFConfig, basis):
    x = _states(ensemble)
    if x.shape[1] < 2:
        raise EnsembleTooSmall(f"need at least two members, got {x.shape[1]}")
    if x.shape[0] != model.n:
        raise DimensionError(f"ensemble has n={x.shape[0]}, model has n={model.n}")
    y_star = np.atleast_1d(np.asarray(y_star, dtype=float))
    if y_star.shape != (model.d,):
        raise DimensionError(f"y_star has shape {y_star.shape}, expected ({model.d},)")
    if not np.all(np.isfinite(x)):
        raise Diverged("non-finite forecast ensemble")
    basis = model.basis if basis is None else basis
    u_perp = basis.u_perp if config.constrained else None
    rho_xy = rho_yy = None
    if config.tapered:
        rho_xy, rho_yy = taper_matrices(model.n, model.obs_locations, config.taper_radius,
                                        config.taper_metric)
    u_para = basis.u_para if config.constrained else None
    return multiplicative_inflation(x, config.beta, u_para), y_star, u_perp, rho_xy, rho_yy


def enkf_analysis(ensemble, y_star, model, config: EnKFConfig, rng: np.random.Generator,
                  basis: SubUnitaryBasis | None = None) -> np.ndarray:
    """Joint EnKF analysis of all ``d`` observation components.

    The forecast ensemble is first inflated by ``config.beta``. Returns the
    analysis states as an ``(n, M)`` array.
    """
    x, y_star, u_perp, rho_xy, rho_yy = _prepare(ensemble, y_star, model, config, basis)
    return _representer_update(x, y_star, model.obs_matrix, model.obs_noise_std, rng,
                               u_perp, rho_xy, rho_yy, config.noise_cov)


def enkf_analysis_sequential(ensemble, y_star, model, config: EnKFConfig,
                             rng: np.random.Generator,
                             basis: SubUnitaryBasis | None = None) -> np.ndarray:
    """Assimilate the observation components one at a time.

    Inflation is applied once to the forecast. Each scalar update perturbs its
    own observation from the current ensemble.
    """
    x, y_star, u_perp, rho_xy, rho_yy = _prepare(ensemble, y_star, model, config, basis)
    g = model.obs_matrix
    for j in range(model.d):
        rxy = None if rho_xy is None else rho_xy[:, j:j + 1]
        ryy = None if rho_yy is None else rho_yy[j:j + 1, j:j + 1]
        x = _representer_update(x, y_star[j:j + 1], g[j:j + 1], model.obs_noise_std, rng,
                                u_perp, rxy, ryy, config.noise_cov)
    return x


def constrained_analysis_rotated(ensemble, y_star, obs_matrix, sigma_e: float,
                                 basis: SubUnitaryBasis, rng: np.random.Generator,
                                 noise_cov: str = "sample") -> np.ndarray:
    """Constrained update computed in rotated coordinates.

    Only ``x_para = u_para^T x`` is updated, through the empirical gain of the
    rotated state; ``x_perp`` is carried over. Without tapering this equals
    the projected-gain update of :func:`enkf_analysis`.
    """
    x = _states(ensemble)
    g = np.atleast_2d(np.asarray(obs_matrix, dtype=float))
    y_star = np.atleast_1d(np.asarray(y_star, dtype=float))
    d, m = g.shape[0], x.shape[1]
    eps = sigma_e * rng.standard_normal((d, m))
    x_perp = basis.u_perp.T @ x
    x_para = basis.u_para.T @ x
    y = g @ x + eps
    a_para = anomalies(x_para)
    a_y = anomalies(g @ x)
    if noise_cov == "sample":
        a_e = anomalies(eps)
        cov_yy = a_y @ a_y.T + a_e @ a_e.T
    else:
        cov_yy = a_y @ a_y.T + sigma_e**2 * np.eye(d)
    gain = np.linalg.solve(cov_yy, (a_para @ a_y.T).T).T
    x_para_a = x_para - gain @ (y - y_star[:, None])
    return basis.u_perp @ x_perp + basis.u_para @ x_para_a


def kalman_posterior(mean, cov, y_star, obs_matrix, noise_var):
    """Exact linear-Gaussian posterior from one joint update.

    ``noise_var`` holds the diagonal of the observation noise covariance.
    Returns ``(mean, cov)``.
    """
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    g = np.atleast_2d(np.asarray(obs_matrix, dtype=float))
    noise = np.broadcast_to(np.asarray(noise_var, dtype=float), (g.shape[0],))
    s = g @ cov @ g.T + np.diag(noise)
    gain = np.linalg.solve(s, g @ cov).T
    post_mean = mean + gain @ (np.atleast_1d(y_star) - g @ mean)
    post_cov = cov - gain @ g @ cov
    return post_mean, 0.5 * (post_cov + post_cov.T)


def kalman_posterior_sequential(mean, cov, y_star, obs_matrix, noise_var):
    """Exact posterior obtained by assimilating the components one at a time."""
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    g = np.atleast_2d(np.asarray(obs_matrix, dtype=float))
    noise = np.broadcast_to(np.asarray(noise_var, dtype=float), (g.shape[0],))
    y_star = np.atleast_1d(np.asarray(y_star, dtype=float))
    for j in range(g.shape[0]):
        gj = g[j]
        pg = cov @ gj
        s = gj @ pg + noise[j]
        mean = mean + pg * ((y_star[j] - gj @ mean) / s)
        cov = cov - np.outer(pg, pg) / s
        cov = 0.5 * (cov + cov.T)
    return mean, cov


__all__ = [
    "kalman_posterior", "kalman_posterior_sequential",
    "Ensemble", "EnKFConfig", "anomalies", "multiplicative_inflation", "gaspari_cohn",
    "grid_distance", "taper_matrices", "enkf_analysis", "enkf_analysis_sequential",
    "constrained_analysis_rotated",
]
