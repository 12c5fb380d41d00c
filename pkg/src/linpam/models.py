"""Benchmark state-space models, time integrators and invariant-preserving noise.

States are stored column-wise: a single state has shape ``(n,)`` and an
ensemble has shape ``(n, M)``. All propagators act on either form.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigError, DimensionError, NumericalBlowup, StiffnessError
from .invariant_subspace import (
    SubUnitaryBasis,
    orthonormal_complement,
    orthonormalize_constraints,
    project_complement,
)

VectorField = Callable[[np.ndarray], np.ndarray]

MIN_DT = 1e-12


# --------------------------------------------------------------------------
# integrators


def rk4_step(f: VectorField, x, dt: float) -> np.ndarray:
    """One classical fourth-order Runge-Kutta step for an autonomous field."""
    if not dt > 0:
        raise ConfigError("dt must be positive")
    k1 = f(x)
    k2 = f(x + 0.5 * dt * k1)
    k3 = f(x + 0.5 * dt * k2)
    k4 = f(x + dt * k3)
    out = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise NumericalBlowup("non-finite state in RK4 step")
    return out


def ssprk43_step(f: VectorField, x, dt: float, abs_tol: float = 1e-6, rel_tol: float = 1e-6):
    """One accepted step of the four-stage, third-order SSP Runge-Kutta scheme.

    The error is estimated against the embedded second-order solution with
    uniform weights 1/4. Rejected attempts shrink ``dt`` until the scaled RMS
    error is at most one.

    Returns
    -------
    x_next : ndarray
    accepted_dt : float
    suggested_dt : float
        Step size proposed for the next call.
    """
    if not dt > 0:
        raise ConfigError("dt must be positive")
    if not (abs_tol > 0 and rel_tol > 0):
        raise ConfigError("tolerances must be positive")
    while True:
        k1 = f(x)
        y1 = x + 0.5 * dt * k1
        k2 = f(y1)
        y2 = y1 + 0.5 * dt * k2
        k3 = f(y2)
        y3 = (2.0 / 3.0) * x + (1.0 / 3.0) * (y2 + 0.5 * dt * k3)
        k4 = f(y3)
        x_new = y3 + 0.5 * dt * k4
        # b = (1/6, 1/6, 1/6, 1/2), embedded b_hat = (1/4, 1/4, 1/4, 1/4)
        err = dt * ((-1.0 / 12.0) * (k1 + k2 + k3) + 0.25 * k4)
        if not np.all(np.isfinite(x_new)):
            raise NumericalBlowup("non-finite state in SSPRK43 step")
        scale = abs_tol + rel_tol * np.maximum(np.abs(x), np.abs(x_new))
        err_norm = float(np.sqrt(np.mean((err / scale) ** 2)))
        if err_norm <= 1.0:
            factor = 5.0 if err_norm == 0 else min(5.0, max(0.2, 0.9 * err_norm ** (-1.0 / 3.0)))
            return x_new, dt, dt * factor
        dt = dt * max(0.2, 0.9 * err_norm ** (-1.0 / 3.0))
        if dt < MIN_DT:
            raise StiffnessError(f"step size underflow ({dt:.3e})")


def integrate_ssprk43(f: VectorField, x, duration: float, dt0: float,
                      abs_tol: float = 1e-6, rel_tol: float = 1e-6):
    """Advance exactly by ``duration``, clipping the final substep.

    Returns the final state and the last suggested step size.
    """
    t = 0.0
    dt = dt0
    while duration - t > 1e-14 * max(1.0, duration):
        h = min(dt, duration - t)
        x, h_acc, dt_next = ssprk43_step(f, x, h, abs_tol, rel_tol)
        t += h_acc
        if h_acc == h and h < dt:
            dt_next = max(dt_next, dt)  # clipping, not the error control, limited h
        dt = dt_next
    return x, dt


def spectral_advection_rhs(x, c: float = 1.0, length: float = 1.0) -> np.ndarray:
    """``-c du/ds`` with the spatial derivative taken in Fourier space.

    Acts along axis 0, so ensembles ``(n, M)`` are differentiated column-wise.
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    if n % 2:
        raise ConfigError("spectral differentiation requires an even grid size")
    k = np.arange(n // 2 + 1)
    mult = 1j * 2.0 * np.pi * k / length
    if x.ndim == 2:
        mult = mult[:, None]
    return -c * np.fft.irfft(mult * np.fft.rfft(x, axis=0), n=n, axis=0)


def lorenz63_rhs(x, sigma: float = 10.0, beta: float = 8.0 / 3.0, rho: float = 28.0):
    x1, x2, x3 = x[0], x[1], x[2]
    return np.stack([sigma * (x2 - x1), x1 * (rho - x3) - x2, x1 * x2 - beta * x3])


# --------------------------------------------------------------------------
# noise and observation


def invariant_preserving_process_noise(rng: np.random.Generator, basis: SubUnitaryBasis,
                                       sigma_w: float, size=None) -> np.ndarray:
    """Gaussian noise projected onto ``span(u_para)``.

    ``size=None`` gives one ``(n,)`` draw, otherwise ``(n, size)``.
    """
    if sigma_w < 0:
        raise ConfigError("sigma_w must be nonnegative")
    shape = (basis.n,) if size is None else (basis.n, int(size))
    if sigma_w == 0:
        return np.zeros(shape)
    return project_complement(basis, sigma_w * rng.standard_normal(shape))


@dataclass(frozen=True, eq=False)
class StateSpaceModel:
    """Forecast model, linear observation operator and noise levels.

    Subclasses implement :meth:`propagate`, the noiseless flow over one
    assimilation window ``dt_obs``.
    """

    basis: SubUnitaryBasis
    obs_matrix: np.ndarray
    obs_noise_std: float
    process_noise_std: float
    dt_obs: float
    taper_metric: str = "index"
    name: str = "model"

    def __post_init__(self):
        g = np.atleast_2d(np.asarray(self.obs_matrix, dtype=float))
        if g.shape[1] != self.basis.n:
            raise DimensionError(f"obs_matrix has {g.shape[1]} columns, state has {self.basis.n}")
        g.setflags(write=False)
        object.__setattr__(self, "obs_matrix", g)
        if not self.obs_noise_std >= 0 or not self.process_noise_std >= 0:
            raise ConfigError("noise levels must be nonnegative")
        if not self.dt_obs > 0:
            raise ConfigError("dt_obs must be positive")

    @property
    def n(self) -> int:
        return self.basis.n

    @property
    def d(self) -> int:
        return self.obs_matrix.shape[0]

    @property
    def obs_locations(self) -> np.ndarray:
        """Grid index each observation row is attached to (used for tapering)."""
        return np.argmax(np.abs(self.obs_matrix), axis=1)

    def propagate(self, x) -> np.ndarray:
        raise NotImplementedError

    def forward(self, x, rng: np.random.Generator) -> np.ndarray:
        """Noiseless flow followed by invariant-preserving process noise."""
        x = np.asarray(x, dtype=float)
        size = None if x.ndim == 1 else x.shape[1]
        return self.propagate(x) + invariant_preserving_process_noise(
            rng, self.basis, self.process_noise_std, size)

    def observe(self, x, rng: np.random.Generator | None = None) -> np.ndarray:
        return observe(self, x, rng)


def observe(model: StateSpaceModel, x, rng: np.random.Generator | None = None) -> np.ndarray:
    """``G x + eps`` with ``eps ~ N(0, sigma_E^2 I_d)``; works column-wise on ensembles."""
    x = np.asarray(x, dtype=float)
    if x.shape[0] != model.n:
        raise DimensionError(f"state has leading dimension {x.shape[0]}, model has n={model.n}")
    y = model.obs_matrix @ x
    if model.obs_noise_std > 0:
        if rng is None:
            raise ConfigError("an rng is required for noisy observations")
        y = y + model.obs_noise_std * rng.standard_normal(y.shape)
    return y


# --------------------------------------------------------------------------
# synthetic linear model


@dataclass(frozen=True, eq=False)
class SyntheticLinearModel(StateSpaceModel):
    """``dx/dt = A x`` with ``A = u diag(lam) u^T`` and ``r`` zero eigenvalues."""

    u: np.ndarray = None
    lam: np.ndarray = None
    _step: np.ndarray = field(init=False, repr=False, default=None)

    def __post_init__(self):
        super().__post_init__()
        object.__setattr__(self, "_step", self.propagator(self.dt_obs))

    @property
    def r(self) -> int:
        return self.basis.r

    def propagator(self, dt: float) -> np.ndarray:
        return (self.u * np.exp(self.lam * dt)) @ self.u.T

    def propagate(self, x) -> np.ndarray:
        return self._step @ np.asarray(x, dtype=float)


def build_synthetic_linear(rng: np.random.Generator, n: int = 20, r: int = 10,
                           dt_obs: float = 0.1, sigma_w: float = 1e-2,
                           sigma_e: float = 1e-1) -> SyntheticLinearModel:
    """Random symmetric negative semidefinite linear model with ``r`` invariants.

    The eigenvector matrix is the Q factor of an ``n x n`` Gaussian matrix;
    the ``n - r`` nonzero eigenvalues are uniform on ``[-5, 0)``. Every state
    component is observed.
    """
    if not 0 <= r < n:
        raise ConfigError(f"need 0 <= r < n, got r={r}, n={n}")
    q, upper = np.linalg.qr(rng.standard_normal((n, n)))
    q = q * np.where(np.diag(upper) < 0, -1.0, 1.0)
    lam = np.concatenate([np.zeros(r), rng.uniform(-5.0, 0.0, size=n - r)])
    basis = SubUnitaryBasis(q[:, :r], q[:, r:])
    return SyntheticLinearModel(
        basis=basis, obs_matrix=np.eye(n), obs_noise_std=sigma_e,
        process_noise_std=sigma_w, dt_obs=dt_obs, taper_metric="index",
        name="synthetic", u=q, lam=lam)


# --------------------------------------------------------------------------
# linear advection


@dataclass(frozen=True, eq=False)
class LinearAdvectionModel(StateSpaceModel):
    """Periodic linear advection on ``[0, 1)`` with spectral derivatives.

    The conserved quantity is the discrete mass; its unit-norm direction is
    ``1/sqrt(n)`` and ``mass_scale`` converts grid means to invariant values
    (``u_perp.T x = mass_scale * mean(x)``).
    """

    c: float = 1.0
    abs_tol: float = 1e-4
    rel_tol: float = 1e-4
    mass_scale: float = 1.0

    @property
    def grid(self) -> np.ndarray:
        return np.arange(self.n) / self.n

    def rhs(self, x):
        return spectral_advection_rhs(x, self.c)

    def propagate(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        dt0 = 1.0 / (abs(self.c) * self.n) if self.c else self.dt_obs
        out, _ = integrate_ssprk43(self.rhs, x, self.dt_obs, dt0, self.abs_tol, self.rel_tol)
        return out


def build_advection(n: int = 128, obs_stride: int = 4, dt_obs: float = 0.2,
                    sigma_w: float = 1e-2, sigma_e: float = 1e-1, c: float = 1.0,
                    abs_tol: float = 1e-4, rel_tol: float = 1e-4) -> LinearAdvectionModel:
    """Advection benchmark: point observations at every ``obs_stride``-th node."""
    if n % 2:
        raise ConfigError("advection grid size must be even")
    basis, lower = orthonormalize_constraints(np.full((n, 1), 1.0 / n))
    idx = np.arange(0, n, obs_stride)
    g = np.zeros((idx.size, n))
    g[np.arange(idx.size), idx] = 1.0
    # u_perp^T x = R^{-T} (1/n)^T x, so the invariant is mean(x) / R
    return LinearAdvectionModel(
        basis=basis, obs_matrix=g, obs_noise_std=sigma_e, process_noise_std=sigma_w,
        dt_obs=dt_obs, taper_metric="periodic", name="advection", c=c,
        abs_tol=abs_tol, rel_tol=rel_tol, mass_scale=1.0 / float(lower[0, 0]))


# --------------------------------------------------------------------------
# embedded Lorenz-63


@dataclass(frozen=True, eq=False)
class EmbeddedLorenz63Model(StateSpaceModel):
    """Lorenz-63 augmented with a constant fourth coordinate and rotated by ``q``."""

    q: np.ndarray = None
    sigma: float = 10.0
    beta: float = 8.0 / 3.0
    rho: float = 28.0
    substeps: int = 10

    def rhs(self, x):
        z = self.q.T @ x
        dz = lorenz63_rhs(z, self.sigma, self.beta, self.rho)
        return self.q[:, :3] @ dz

    def propagate(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        h = self.dt_obs / self.substeps
        for _ in range(self.substeps):
            x = rk4_step(self.rhs, x, h)
        return x


def build_embedded_lorenz(rng: np.random.Generator | None = None, q=None,
                          dt_obs: float = 0.05, sigma_e: float = 3.0,
                          sigma_w: float = 0.0, substeps: int = 10) -> EmbeddedLorenz63Model:
    """Embedded Lorenz-63 in R^4 with invariant direction ``u_perp = q e_4``.

    ``q`` defaults to the Q factor of a 4x4 standard Gaussian matrix drawn from
    ``rng``. The complement is spanned by the rotated Lorenz coordinates
    ``q[:, :3]``.
    """
    if q is None:
        if rng is None:
            raise ConfigError("either rng or q is required")
        q, _ = np.linalg.qr(rng.standard_normal((4, 4)))
    q = np.asarray(q, dtype=float)
    if q.shape != (4, 4):
        raise DimensionError("q must be 4x4")
    basis = SubUnitaryBasis(q[:, 3:], q[:, :3])
    return EmbeddedLorenz63Model(
        basis=basis, obs_matrix=np.eye(4), obs_noise_std=sigma_e,
        process_noise_std=sigma_w, dt_obs=dt_obs, taper_metric="index",
        name="lorenz", q=q, substeps=substeps)


__all__ = [
    "StateSpaceModel", "SyntheticLinearModel", "LinearAdvectionModel", "EmbeddedLorenz63Model",
    "build_synthetic_linear", "build_advection", "build_embedded_lorenz",
    "rk4_step", "ssprk43_step", "integrate_ssprk43", "spectral_advection_rhs",
    "lorenz63_rhs", "invariant_preserving_process_noise", "observe",
    "orthonormal_complement",
]
