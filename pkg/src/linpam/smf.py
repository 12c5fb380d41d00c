"""Stochastic map filter analysis, unconstrained and invariant-preserving.

For a scalar observation the joint forecast samples ``(y, x)`` are pushed to
a standard Gaussian by a lower-triangular map estimated from the ensemble.
Each member is then moved so that the map evaluated at ``(y_star, x_a)``
equals its value at ``(y, x)``, solving one univariate problem per state
coordinate down the triangle.

The constrained variant works in the rotated coordinates
``(x_perp, x_para)``. Its map conditions on ``x_perp`` but never updates it,
so every member keeps its invariants whatever the fitted map looks like.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .enkf import multiplicative_inflation
from .errors import (
    ConfigError,
    ConstantInvariantViolated,
    DegenerateMarginal,
    DimensionError,
    Diverged,
    EnsembleTooSmall,
)
from .invariant_subspace import SubUnitaryBasis
from .transport import (
    FeatureSpec,
    fit_affine_block,
    fit_component_closed_form,
    fit_component_projected_newton,
)

CONSTANT_TOL = 1e-8


@dataclass(frozen=True)
class SMFConfig:
    """Map features, inflation and variant switches of the stochastic map filter."""

    spec: FeatureSpec = field(default_factory=FeatureSpec)
    beta: float = 1.0
    constrained: bool = False
    reduced: bool = False

    def __post_init__(self):
        if not self.beta >= 1.0:
            raise ConfigError(f"inflation must be >= 1, got {self.beta}")
        if self.reduced and not self.constrained:
            raise ConfigError("the reduced update is a constrained variant")


def _check(states, y, y_star):
    x = np.asarray(states, dtype=float)
    if x.ndim != 2:
        raise DimensionError("ensemble must be an (n, M) matrix")
    if x.shape[1] < 2:
        raise EnsembleTooSmall(f"need at least two members, got {x.shape[1]}")
    y = np.asarray(y, dtype=float).ravel()
    if y.size != x.shape[1]:
        raise DimensionError("one simulated observation per member is required")
    y_star = float(np.asarray(y_star, dtype=float).reshape(()))
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y)) and np.isfinite(y_star)):
        raise Diverged("non-finite input to the map analysis")
    return x, y, y_star


def partial_inversion(joint, n_cond: int, y_star: float, spec: FeatureSpec) -> np.ndarray:
    """Analysis in the joint sample matrix ``(M, K)``.

    Column 0 holds the simulated observations; columns ``1..n_cond-1`` are
    conditioning inputs kept fixed; columns ``n_cond..K-1`` are updated.
    A target in column ``t`` belongs to a map component of ``t + 1`` inputs;
    the component of two inputs gets the monotone diagonal, all others an
    affine one. Returns the updated target columns ``(M, K - n_cond)``.
    """
    z = np.asarray(joint, dtype=float)
    m, kk = z.shape
    if not 1 <= n_cond < kk:
        raise ConfigError("need at least one conditioning and one target column")
    new_inputs = {0: y_star}
    first_block = n_cond
    if n_cond == 1 and spec.p > 0:
        try:
            comp = fit_component_projected_newton(z[:, :2], spec.with_diagonal("monotone"))
            ref = comp.evaluate(z[:, :2])
            new_inputs[1] = comp.invert(np.full(m, y_star), ref)
        except DegenerateMarginal:
            new_inputs[1] = z[:, 1]
        first_block = 2
    if first_block < kk:
        block = fit_affine_block(z, first_block, spec)
        z = block.conditional_update(z, new_inputs)
    else:
        z = z.copy()
        for j, v in new_inputs.items():
            z[:, j] = v
    out = z[:, n_cond:]
    if not np.all(np.isfinite(out)):
        raise Diverged("non-finite analysis ensemble")
    return out


def smf_analysis_unconstrained(states, y, y_star, spec: FeatureSpec | None = None) -> np.ndarray:
    """Map analysis of a scalar observation with joint ordering ``(y, x_1, ..., x_n)``.

    Parameters
    ----------
    states : ndarray, shape (n, M)
    y : ndarray, shape (M,)
        Simulated observations paired with the members.
    y_star : float
    """
    x, y, y_star = _check(states, y, y_star)
    spec = spec or FeatureSpec()
    joint = np.hstack([y[:, None], x.T])
    return partial_inversion(joint, 1, y_star, spec).T


def smf_analysis_constrained(states, y, y_star, spec: FeatureSpec | None,
                             basis: SubUnitaryBasis) -> np.ndarray:
    """Invariant-preserving map analysis with ordering ``(y, x_perp, x_para)``.

    Only the ``x_para`` block is fitted and inverted; ``x_perp`` enters both
    sides of the inversion unchanged.
    """
    x, y, y_star = _check(states, y, y_star)
    spec = spec or FeatureSpec()
    if basis.n != x.shape[0]:
        raise DimensionError("basis and ensemble dimensions differ")
    x_perp = basis.u_perp.T @ x
    x_para = basis.u_para.T @ x
    joint = np.hstack([y[:, None], x_perp.T, x_para.T])
    para_a = partial_inversion(joint, 1 + basis.r, y_star, spec).T
    return x + basis.u_para @ (para_a - x_para)


def smf_analysis_reduced(states, y, y_star, spec: FeatureSpec | None,
                         basis: SubUnitaryBasis, c) -> np.ndarray:
    """Map analysis on ``(y, x_para)`` for members that share the invariant ``c``.

    The invariant coordinates are dropped from the map and the result is
    lifted with ``u_perp @ c``.
    """
    x, y, y_star = _check(states, y, y_star)
    spec = spec or FeatureSpec()
    c = np.atleast_1d(np.asarray(c, dtype=float))
    if c.shape != (basis.r,):
        raise DimensionError(f"invariant value must have length {basis.r}")
    inv = basis.u_perp.T @ x
    if np.max(np.abs(inv - c[:, None]), initial=0.0) > CONSTANT_TOL * (1.0 + np.max(np.abs(c), initial=0.0)):
        raise ConstantInvariantViolated("members do not share the stated invariant value")
    x_para = basis.u_para.T @ x
    joint = np.hstack([y[:, None], x_para.T])
    para_a = partial_inversion(joint, 1, y_star, spec).T
    return (basis.u_perp @ c)[:, None] + basis.u_para @ para_a


def assimilate_vector_observation(states, y_star, analysis_op, model, rng: np.random.Generator):
    """Assimilate the components of ``y_star`` one after the other.

    Before each scalar update the simulated observations
    ``G_j x + eps_j`` are drawn from the current ensemble. ``analysis_op`` is
    called as ``analysis_op(states, y_j, y_star_j)``.
    """
    x = np.asarray(states, dtype=float)
    y_star = np.atleast_1d(np.asarray(y_star, dtype=float))
    if y_star.shape != (model.d,):
        raise DimensionError(f"y_star has shape {y_star.shape}, expected ({model.d},)")
    g = model.obs_matrix
    for j in range(model.d):
        y_j = g[j] @ x + model.obs_noise_std * rng.standard_normal(x.shape[1])
        x = analysis_op(x, y_j, y_star[j])
    return x


def smf_analysis(ensemble, y_star, model, config: SMFConfig, rng: np.random.Generator,
                 basis: SubUnitaryBasis | None = None, c=None) -> np.ndarray:
    """Full analysis step: forecast inflation, then sequential scalar updates.

    Constrained variants inflate only the ``u_para`` part of the anomalies.
    """
    basis = model.basis if basis is None else basis
    u_para = basis.u_para if config.constrained else None
    x = multiplicative_inflation(np.asarray(ensemble, dtype=float), config.beta, u_para)
    if not np.all(np.isfinite(x)):
        raise Diverged("non-finite forecast ensemble")
    spec = config.spec
    if not config.constrained:
        def op(s, y, ys):
            return smf_analysis_unconstrained(s, y, ys, spec)
    elif config.reduced:
        if c is None:
            c = (basis.u_perp.T @ x).mean(axis=1)

        def op(s, y, ys):
            return smf_analysis_reduced(s, y, ys, spec, basis, c)
    else:
        def op(s, y, ys):
            return smf_analysis_constrained(s, y, ys, spec, basis)
    return assimilate_vector_observation(x, y_star, op, model, rng)


__all__ = [
    "SMFConfig", "partial_inversion", "smf_analysis_unconstrained", "smf_analysis_constrained",
    "smf_analysis_reduced", "assimilate_vector_observation", "smf_analysis",
]
