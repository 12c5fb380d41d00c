"""Monotone lower-triangular transport maps with separable features.

A map component ``S^k`` of ``k`` inputs is a sum of univariate features:

    S^k(x_1, ..., x_k) = sum_{j<k} phi_j(x_j) + phi_k(x_k)

Off-diagonal features are a linear term plus ``p`` Gaussian bumps. The
diagonal feature is either affine with positive slope or a nonnegative
combination of ``p + 2`` increasing erf-based functions (two linear ramps
and ``p`` sigmoids). Coefficients minimize the sample average of

    0.5 * S^k(x)**2 - log dS^k/dx_k(x)

which pushes the samples to a standard Gaussian. Every input is whitened by
its sample mean and standard deviation before it is featurized, so centers,
widths and coefficients live in standardized coordinates.

Samples are stored row-wise here: ``(M, k)``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cholesky, lapack, solve_triangular
from scipy.special import erf

from .errors import ConfigError, DegenerateMarginal, DimensionError, InversionBracketFailure

SQRT2 = math.sqrt(2.0)
SQRT2PI = math.sqrt(2.0 * math.pi)
SQRT2_OVER_PI = math.sqrt(2.0 / math.pi)

DEGENERATE_TOL = 1e-10
RIDGE_FALLBACK = 1e-8
PIVOT_TOL = 1e-10
TAIL_SLOPE_FLOOR = 1e-4
INVERT_TOL = 1e-10
BRACKET_LIMIT = 1e6


@dataclass(frozen=True)
class FeatureSpec:
    """Feature family of a map component.

    Parameters
    ----------
    p : int
        Number of Gaussian bumps per off-diagonal feature (and sigmoids in the
        monotone diagonal).
    gamma : float
        Width scale relative to the spacing of neighbouring centers.
    diagonal : {"affine", "monotone"}
    ridge : float
        Optional penalty ``0.5 * ridge * ||c||**2`` added to the objective.
    """

    p: int = 2
    gamma: float = 2.0
    diagonal: str = "affine"
    ridge: float = 0.0

    def __post_init__(self):
        if int(self.p) != self.p or self.p < 0:
            raise ConfigError("p must be a nonnegative integer")
        if not self.gamma > 0:
            raise ConfigError("gamma must be positive")
        if self.diagonal not in ("affine", "monotone"):
            raise ConfigError(f"unknown diagonal kind {self.diagonal!r}")
        if not self.ridge >= 0:
            raise ConfigError("ridge must be nonnegative")

    @property
    def monotone(self) -> bool:
        # with p = 0 the monotone family reduces to an affine function
        return self.diagonal == "monotone" and self.p > 0

    def with_diagonal(self, kind: str) -> "FeatureSpec":
        return FeatureSpec(self.p, self.gamma, kind, self.ridge)


@dataclass(frozen=True, eq=False)
class FeatureSite:
    """Centers and widths of the bumps (or erf functions) of one feature."""

    centers: np.ndarray
    widths: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.centers, dtype=float).ravel()
        w = np.asarray(self.widths, dtype=float).ravel()
        if c.shape != w.shape:
            raise DimensionError("centers and widths must have the same length")
        if np.any(np.diff(c) < 0):
            raise ConfigError("centers must be nondecreasing")
        if np.any(w <= 0):
            raise ConfigError("widths must be positive")
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "widths", w)

    @property
    def size(self) -> int:
        return self.centers.size


def empirical_quantiles(samples, q: int) -> np.ndarray:
    """Quantiles at levels ``l / (q + 1)``, ``l = 1..q``.

    Order statistics are interpolated linearly with plotting positions
    ``l (M + 1) / (q + 1)``.
    """
    if q == 0:
        return np.zeros(0)
    levels = np.arange(1, q + 1) / (q + 1)
    return np.quantile(np.asarray(samples, dtype=float), levels, method="weibull")


def fit_sites(samples_j, p: int, gamma: float = 2.0, diagonal: bool = False) -> FeatureSite:
    """Centers from empirical quantiles and widths from neighbour spacing.

    ``q = p + 2`` functions are placed for a monotone diagonal, ``q = p``
    otherwise. Widths are ``gamma * (xi[l+1] - xi[l-1]) / 2`` with the end
    centers repeated at the boundaries.
    """
    x = np.asarray(samples_j, dtype=float).ravel()
    if x.size < 2:
        raise ConfigError("need at least two samples")
    lo, hi = float(x.min()), float(x.max())
    if hi == lo:
        raise DegenerateMarginal("all samples are identical")
    q = p + 2 if diagonal else p
    centers = empirical_quantiles(x, q)
    if q == 0:
        return FeatureSite(centers, np.zeros(0))
    padded = np.concatenate([centers[:1], centers, centers[-1:]])
    widths = gamma * (padded[2:] - padded[:-2]) / 2.0
    widths = np.maximum(widths, 1e-8 * (hi - lo + 1e-12))
    return FeatureSite(centers, widths)


# --------------------------------------------------------------------------
# univariate features


def offdiagonal_features(site: FeatureSite, x) -> np.ndarray:
    """Columns ``[x, N(x; xi_1, s_1), ..., N(x; xi_p, s_p)]`` with shape ``(M, 1 + p)``."""
    x = np.asarray(x, dtype=float).reshape(-1, 1)
    if site.size == 0:
        return x.copy()
    u = (x - site.centers) / site.widths
    return np.hstack([x, np.exp(-0.5 * u * u) / (SQRT2PI * site.widths)])


def eval_offdiagonal(site: FeatureSite, c_block, xj):
    """``c0 * x + sum_l c_l * N(x; xi_l, s_l)``."""
    c_block = np.asarray(c_block, dtype=float)
    out = offdiagonal_features(site, xj) @ c_block
    return out if np.ndim(xj) else float(out[0])


def psi_features(site: FeatureSite, x):
    """Values and derivatives of the ``p + 2`` increasing diagonal functions.

    Returns two ``(M, p + 2)`` arrays.
    """
    x = np.asarray(x, dtype=float).reshape(-1, 1)
    xi = site.centers
    s = site.widths
    dx = x - xi
    delta = dx / (SQRT2 * s)
    e = erf(delta)
    g = np.exp(-delta * delta)
    val = 0.5 * (1.0 + e)
    der = g / (SQRT2PI * s)
    val[:, 0] = 0.5 * (dx[:, 0] * (1.0 - e[:, 0]) - s[0] * SQRT2_OVER_PI * g[:, 0])
    der[:, 0] = 0.5 * (1.0 - e[:, 0])
    val[:, -1] = 0.5 * (dx[:, -1] * (1.0 + e[:, -1]) + s[-1] * SQRT2_OVER_PI * g[:, -1])
    der[:, -1] = 0.5 * (1.0 + e[:, -1])
    return val, der


def eval_diagonal_psi(site: FeatureSite, c_block, xk):
    """Value and derivative of ``c0 + sum_l c_l psi_l(x)``."""
    c_block = np.asarray(c_block, dtype=float)
    val, der = psi_features(site, xk)
    v = c_block[0] + val @ c_block[1:]
    d = der @ c_block[1:]
    if np.ndim(xk) == 0:
        return float(v[0]), float(d[0])
    return v, d


# --------------------------------------------------------------------------
# map component


@dataclass(frozen=True, eq=False)
class TriangularMapComponent:
    """One fitted component ``S^k`` of a lower-triangular map.

    ``coeffs`` stacks ``k - 1`` off-diagonal blocks of size ``1 + p`` followed
    by the diagonal block (``[c0, slope]`` or ``[c0, c_1, ..., c_{p+2}]``).
    Off-diagonal inputs with zero sample variance are inactive: their block
    is zero and they are ignored on evaluation.
    """

    k: int
    spec: FeatureSpec
    mean: np.ndarray
    std: np.ndarray
    active: np.ndarray
    off_sites: tuple
    diag_site: FeatureSite | None
    coeffs: np.ndarray
    lower: float = -1.0
    upper: float = 1.0
    converged: bool = True
    n_iter: int = 0
    ridge_fallback: bool = False
    history: tuple = field(default=(), repr=False)

    @property
    def p(self) -> int:
        return self.spec.p

    @property
    def monotone(self) -> bool:
        return self.diag_site is not None

    @property
    def n_off(self) -> int:
        return (self.k - 1) * (1 + self.p)

    @property
    def diag_coeffs(self) -> np.ndarray:
        return self.coeffs[self.n_off:]

    def _prefix(self, x_prefix) -> np.ndarray:
        x = np.asarray(x_prefix, dtype=float)
        if x.ndim == 2:
            return x
        if self.k == 1:
            return x.reshape(x.shape[0] if x.ndim else 1, 0)
        return x.reshape(-1, self.k - 1)

    def offdiag_design(self, x_prefix) -> np.ndarray:
        """Off-diagonal feature matrix ``(M, (k-1)(1+p))`` of standardized prefixes."""
        x_prefix = self._prefix(x_prefix)
        m = x_prefix.shape[0]
        out = np.zeros((m, self.n_off))
        w = 1 + self.p
        for j in range(self.k - 1):
            if self.active[j]:
                z = (x_prefix[:, j] - self.mean[j]) / self.std[j]
                out[:, j * w:(j + 1) * w] = offdiagonal_features(self.off_sites[j], z)
        return out

    def diag_design(self, x_last):
        """Diagonal design (with intercept column) and its derivative in standardized units."""
        z = (np.asarray(x_last, dtype=float).ravel() - self.mean[-1]) / self.std[-1]
        ones = np.ones((z.size, 1))
        if self.monotone:
            val, der = psi_features(self.diag_site, z)
            return np.hstack([ones, val]), np.hstack([np.zeros_like(ones), der])
        return np.hstack([ones, z[:, None]]), np.hstack([np.zeros_like(ones), ones])

    def offdiag_part(self, x_prefix, coeffs=None) -> np.ndarray:
        c = self.coeffs if coeffs is None else coeffs
        return self.offdiag_design(x_prefix) @ c[:self.n_off]

    def diag_part(self, x_last, coeffs=None):
        """Diagonal value and derivative with respect to the original last input."""
        c = self.coeffs if coeffs is None else coeffs
        d, dd = self.diag_design(x_last)
        cd = c[self.n_off:]
        return d @ cd, (dd @ cd) / self.std[-1]

    def evaluate(self, samples) -> np.ndarray:
        x = _as_samples(samples, self.k)
        return self.offdiag_part(x[:, :-1]) + self.diag_part(x[:, -1])[0]

    def derivative(self, samples) -> np.ndarray:
        """``dS^k/dx_k`` at each sample."""
        x = _as_samples(samples, self.k)
        return self.diag_part(x[:, -1])[1]

    def invert(self, x_prefix, z) -> np.ndarray:
        return invert_last_input(self, x_prefix, z)


def _as_samples(samples, k: int) -> np.ndarray:
    x = np.asarray(samples, dtype=float)
    if x.ndim == 1:
        x = x[:, None] if k == 1 else x[None, :]
    if x.ndim != 2 or x.shape[1] != k:
        raise DimensionError(f"samples must have shape (M, {k}), got {x.shape}")
    return x


def _standardize(x: np.ndarray):
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    active = std > DEGENERATE_TOL * np.maximum(1.0, np.abs(mean))
    std = np.where(active, std, 1.0)
    return mean, std, active


def _scaffold(samples, spec: FeatureSpec, monotone: bool):
    x = np.asarray(samples, dtype=float)
    if x.ndim != 2:
        raise DimensionError("samples must be an (M, k) matrix")
    m, k = x.shape
    if m < 2:
        raise ConfigError("need at least two samples")
    if not np.all(np.isfinite(x)):
        raise DimensionError("samples contain non-finite values")
    mean, std, active = _standardize(x)
    if not active[-1]:
        raise DegenerateMarginal("the last input has zero variance")
    z = (x - mean) / std
    sites = tuple(
        fit_sites(z[:, j], spec.p, spec.gamma) if active[j] else None for j in range(k - 1)
    )
    diag_site = fit_sites(z[:, -1], spec.p, spec.gamma, diagonal=True) if monotone else None
    return x, z, mean, std, active, sites, diag_site


def _chol_gram(gram: np.ndarray, ridge: float = 0.0, rank_deficient: bool = False):
    """Cholesky factor of ``gram + ridge I`` with a fallback for near-collinear columns.

    ``rank_deficient`` (fewer samples than columns) skips the unshifted attempt
    when no ridge is set.
    """
    dim = gram.shape[0]
    base = gram + ridge * np.eye(dim) if ridge > 0 else gram
    if ridge > 0 or not rank_deficient:
        try:
            low = cholesky(base, lower=True, check_finite=False)
            piv = np.diag(low) ** 2
            if np.all(piv > PIVOT_TOL * np.maximum(np.diag(base), 1e-300)):
                return low, False
        except np.linalg.LinAlgError:
            pass
    lam = RIDGE_FALLBACK * max(np.trace(gram), 1e-300)
    for _ in range(8):
        try:
            return cholesky(base + lam * np.eye(dim), lower=True, check_finite=False), True
        except np.linalg.LinAlgError:
            lam *= 10.0
    raise np.linalg.LinAlgError("Gram matrix could not be factorized")


def objective(component: TriangularMapComponent, samples, coeffs=None):
    """Sample objective ``mean(0.5 S^2 - log dS/dx_k)`` and its gradient in ``coeffs``.

    The derivative is taken with respect to the original (unstandardized)
    last input. A nonpositive derivative at any sample gives ``+inf``. The
    optional ridge penalty of the component's spec is included.
    """
    c = component.coeffs if coeffs is None else np.asarray(coeffs, dtype=float)
    x = _as_samples(samples, component.k)
    m = x.shape[0]
    off = component.offdiag_design(x[:, :-1])
    d, dd = component.diag_design(x[:, -1])
    design = np.hstack([off, d])
    s = design @ c
    slope = dd @ c[component.n_off:]
    lam = component.spec.ridge
    if np.any(slope <= 0) or not np.all(np.isfinite(slope)):
        return math.inf, np.full_like(c, np.nan)
    val = 0.5 * np.mean(s * s) - np.mean(np.log(slope)) + math.log(component.std[-1])
    grad = design.T @ s / m
    grad[component.n_off:] -= dd.T @ (1.0 / slope) / m
    if lam:
        val += 0.5 * lam * float(c @ c)
        grad += lam * c
    return float(val), grad


def fit_component_closed_form(samples, spec: FeatureSpec | None = None) -> TriangularMapComponent:
    """Fit a component with affine diagonal by least squares.

    For a fixed slope ``a`` the optimal off-diagonal coefficients and
    intercept are a (ridge) least-squares fit of ``-a x_k`` on the off-diagonal
    features; the optimal slope is then ``1 / sqrt(residual second moment)``.
    Both follow from one Cholesky factor of the Gram matrix of
    ``[1, features(x_{1:k-1}), x_k]``.
    """
    spec = (spec or FeatureSpec()).with_diagonal("affine")
    x, z, mean, std, active, sites, _ = _scaffold(samples, spec, monotone=False)
    m, k = x.shape
    w = 1 + spec.p
    cols = [np.ones((m, 1))]
    index = [np.zeros(0, dtype=int)]
    pos = 1
    for j in range(k - 1):
        if active[j]:
            cols.append(offdiagonal_features(sites[j], z[:, j]))
            index.append(np.arange(j * w, (j + 1) * w))
            pos += w
    cols.append(z[:, -1:])
    phi = np.hstack(cols)
    low, fallback = _chol_gram(phi.T @ phi, m * spec.ridge)
    e_last = np.zeros(phi.shape[1])
    e_last[-1] = 1.0
    # last row of inv(L)
    row = math.sqrt(m) * solve_triangular(low.T, e_last, lower=False, check_finite=False)
    # row[-1] is the slope; row[0] the intercept; the rest off-diagonal weights
    coeffs = np.zeros((k - 1) * w + 2)
    off_idx = np.concatenate(index[1:]) if len(index) > 1 else np.zeros(0, dtype=int)
    coeffs[off_idx] = row[1:-1]
    coeffs[-2] = row[0]
    coeffs[-1] = row[-1]
    zs = z[:, -1]
    return TriangularMapComponent(
        k=k, spec=spec, mean=mean, std=std, active=active, off_sites=sites, diag_site=None,
        coeffs=coeffs, lower=float(zs.min()), upper=float(zs.max()), ridge_fallback=fallback)


def _lower_bounds(q: int) -> np.ndarray:
    lb = np.zeros(q)
    lb[0] = lb[-1] = TAIL_SLOPE_FLOOR
    return lb


def fit_component_projected_newton(samples, spec: FeatureSpec | None = None, max_iter: int = 200,
                                   tol: float = 1e-8, init=None) -> TriangularMapComponent:
    """Fit a component with monotone erf-based diagonal.

    The off-diagonal coefficients and the intercept enter quadratically and
    are eliminated exactly; the remaining ``p + 2`` diagonal weights are found
    by a projected Newton method with Armijo backtracking on the bound
    constraints ``c_l >= 0`` (the two tail ramps keep a small positive floor
    so the component is onto). Stops when the projected gradient norm is at
    most ``tol * (1 + |J|)``.

    ``init`` optionally gives the starting diagonal weights.
    """
    spec = (spec or FeatureSpec()).with_diagonal("monotone")
    if spec.p == 0:
        return fit_component_closed_form(samples, spec)
    x, z, mean, std, active, sites, dsite = _scaffold(samples, spec, monotone=True)
    m, k = x.shape
    w = 1 + spec.p
    cols = [np.ones((m, 1))]
    index = []
    for j in range(k - 1):
        if active[j]:
            cols.append(offdiagonal_features(sites[j], z[:, j]))
            index.append(np.arange(j * w, (j + 1) * w))
    phi = np.hstack(cols)
    psi, dpsi = psi_features(dsite, z[:, -1])
    lam = spec.ridge
    low, fallback = _chol_gram(phi.T @ phi, m * lam)
    beta = solve_triangular(low, phi.T @ psi, lower=True, check_finite=False)
    beta = solve_triangular(low.T, beta, lower=False, check_finite=False)
    # reduced quadratic form after eliminating [intercept, off-diagonal]
    quad = (psi.T @ psi - (phi.T @ psi).T @ beta) / m + lam * np.eye(psi.shape[1])
    quad = 0.5 * (quad + quad.T)
    log_std = math.log(std[-1])

    def fun(c):
        slope = dpsi @ c
        if np.any(slope <= 0):
            return math.inf
        return 0.5 * float(c @ quad @ c) - float(np.mean(np.log(slope))) + log_std

    def grad_hess(c):
        slope = dpsi @ c
        inv = 1.0 / slope
        g = quad @ c - dpsi.T @ inv / m
        h = quad + (dpsi * (inv * inv)[:, None]).T @ dpsi / m
        return g, h

    q = psi.shape[1]
    lb = _lower_bounds(q)
    if init is None:
        c = np.zeros(q)
        c[0] = c[-1] = 1.0
        a = 0.5 * float(c @ quad @ c)
        c = c / math.sqrt(2.0 * a) if a > 0 else c
    else:
        c = np.asarray(init, dtype=float).copy()
    c = np.maximum(c, lb)
    val = fun(c)
    history = [val]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        g, h = grad_hess(c)
        pgrad = c - np.maximum(c - g, lb)
        if np.linalg.norm(pgrad) <= tol * (1.0 + abs(val)):
            converged = True
            it -= 1
            break
        eps = min(1e-3, float(np.linalg.norm(pgrad)))
        act = (c - lb <= eps) & (g > 0)
        free = ~act
        d = np.zeros(q)
        if np.any(free):
            hf = h[np.ix_(free, free)]
            try:
                d[free] = np.linalg.solve(hf, g[free])
            except np.linalg.LinAlgError:
                d[free] = g[free] / np.maximum(np.diag(hf), 1e-12)
        if np.any(act):
            d[act] = g[act] / np.maximum(np.diag(h)[act], 1e-12)
        alpha = 1.0
        while True:
            c_new = np.maximum(c - alpha * d, lb)
            v_new = fun(c_new)
            decrease = alpha * float(g[free] @ d[free]) + float(g[act] @ (c - c_new)[act])
            if v_new <= val - 1e-4 * decrease:
                break
            alpha *= 0.5
            if alpha < 1e-16:
                c_new, v_new = c, val
                break
        if v_new == val and np.array_equal(c_new, c):
            # no further decrease is possible at machine precision
            converged = np.linalg.norm(pgrad) <= 1e-6 * (1.0 + abs(val))
            break
        c, val = c_new, v_new
        history.append(val)
    if not converged and it >= max_iter:
        warnings.warn("projected Newton reached the iteration cap", RuntimeWarning, stacklevel=2)

    a = -beta @ c
    coeffs = np.zeros((k - 1) * w + 1 + q)
    if index:
        coeffs[np.concatenate(index)] = a[1:]
    coeffs[(k - 1) * w] = a[0]
    coeffs[(k - 1) * w + 1:] = c
    zs = z[:, -1]
    return TriangularMapComponent(
        k=k, spec=spec, mean=mean, std=std, active=active, off_sites=sites, diag_site=dsite,
        coeffs=coeffs, lower=float(zs.min()), upper=float(zs.max()), converged=converged,
        n_iter=it, ridge_fallback=fallback, history=tuple(history))


def fit_component(samples, spec: FeatureSpec | None = None) -> TriangularMapComponent:
    spec = spec or FeatureSpec()
    if spec.monotone:
        return fit_component_projected_newton(samples, spec)
    return fit_component_closed_form(samples, spec)


def invert_last_input(component: TriangularMapComponent, x_prefix, z) -> np.ndarray:
    """Solve ``S^k(x_prefix, x_k) = z`` for ``x_k``, vectorized over rows.

    Affine diagonals are inverted exactly. Monotone diagonals use a bracket
    grown by doubling from the training range followed by Newton steps that
    fall back to bisection whenever they leave the bracket.
    """
    z = np.atleast_1d(np.asarray(z, dtype=float))
    if component.k == 1:
        off = np.zeros(z.size)
    else:
        xp = np.asarray(x_prefix, dtype=float).reshape(-1, component.k - 1)
        off = component.offdiag_part(xp)
        if off.size == 1 and z.size > 1:
            off = np.full(z.size, off[0])
    target = z - off
    mu, sd = component.mean[-1], component.std[-1]
    cd = component.diag_coeffs
    if not component.monotone:
        return mu + sd * (target - cd[0]) / cd[1]

    site = component.diag_site

    def g(u):
        val, der = psi_features(site, u)
        return cd[0] + val @ cd[1:], der @ cd[1:]

    width = max(component.upper - component.lower, 1e-12)
    lo = np.full(target.shape, component.lower)
    hi = np.full(target.shape, component.upper)
    step = width
    while True:
        glo = g(lo)[0]
        ghi = g(hi)[0]
        need_lo = glo > target
        need_hi = ghi < target
        if not (need_lo.any() or need_hi.any()):
            break
        if step > BRACKET_LIMIT * width:
            raise InversionBracketFailure("could not bracket the root of the diagonal")
        lo = np.where(need_lo, lo - step, lo)
        hi = np.where(need_hi, hi + step, hi)
        step *= 2.0

    u = np.clip(np.zeros_like(target), lo, hi)
    tol = INVERT_TOL * (1.0 + np.abs(z))
    for _ in range(200):
        val, der = g(u)
        res = val - target
        done = np.abs(res) <= tol
        if done.all():
            break
        lo = np.where(res < 0, u, lo)
        hi = np.where(res > 0, u, hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            newton = u - res / der
        bad = ~np.isfinite(newton) | (newton <= lo) | (newton >= hi)
        u_new = np.where(bad, 0.5 * (lo + hi), newton)
        stalled = (hi - lo) <= 4 * np.finfo(float).eps * (1.0 + np.abs(u))
        u = np.where(done | stalled, u, u_new)
        if np.all(done | stalled):
            break
    # one Newton polish brings the residual test down to roundoff in x
    val, der = g(u)
    with np.errstate(divide="ignore", invalid="ignore"):
        polished = u - (val - target) / der
    small = np.abs(polished - u) <= 1e-8 * (1.0 + np.abs(u))
    u = np.where(np.isfinite(polished) & small, polished, u)
    return mu + sd * u


# --------------------------------------------------------------------------
# batched block of affine-diagonal components


def _batch_sites(z: np.ndarray, p: int, gamma: float):
    """:func:`fit_sites` for every column of ``z`` at once; arrays of shape ``(p, k)``."""
    k = z.shape[1]
    if p == 0:
        return np.zeros((0, k)), np.zeros((0, k))
    levels = np.arange(1, p + 1) / (p + 1)
    centers = np.quantile(z, levels, axis=0, method="weibull").reshape(p, k)
    padded = np.vstack([centers[:1], centers, centers[-1:]])
    widths = gamma * (padded[2:] - padded[:-2]) / 2.0
    span = z.max(axis=0) - z.min(axis=0)
    return centers, np.maximum(widths, 1e-8 * (span + 1e-12))


def _batch_features(z: np.ndarray, centers: np.ndarray, widths: np.ndarray) -> np.ndarray:
    """:func:`offdiagonal_features` of every column of ``z``, blocks side by side."""
    m, k = z.shape
    u = (z[:, None, :] - centers) / widths
    bumps = np.exp(-0.5 * u * u) / (SQRT2PI * widths)
    return np.concatenate([z[:, None, :], bumps], axis=1).transpose(0, 2, 1).reshape(m, -1)


@dataclass(frozen=True, eq=False)
class AffineBlockMap:
    """Components for inputs ``first_target..K-1`` with affine diagonals.

    The inputs are ordered as one sample matrix ``(M, K)``; every component
    conditions on all earlier inputs. The design matrix is
    ``[1, features(input_0), ..., features(input_{K-1})]`` where each block
    starts with the input itself, so the least-squares problems of all
    components are nested. They are solved together from a single Cholesky
    factor ``L`` of the (ridge-shifted) Gram matrix: component ``t`` has
    coefficient row ``sqrt(M) * inv(L)[m_t, :m_t + 1]`` where ``m_t`` is the
    column of input ``t``.
    """

    spec: FeatureSpec
    first_target: int
    mean: np.ndarray
    std: np.ndarray
    active: np.ndarray
    centers: np.ndarray
    widths: np.ndarray
    block_start: np.ndarray
    rows: np.ndarray
    ridge_fallback: bool = False

    @property
    def K(self) -> int:
        return self.mean.size

    @property
    def sites(self) -> tuple:
        """Feature sites per input, ``None`` for dropped inputs."""
        out = [None] * self.K
        for i, j in enumerate(np.flatnonzero(self.active)):
            out[j] = FeatureSite(self.centers[:, i], self.widths[:, i])
        return tuple(out)

    def features(self, j: int, x_j) -> np.ndarray:
        z = (np.asarray(x_j, dtype=float) - self.mean[j]) / self.std[j]
        i = (self.block_start[j] - 1) // (1 + self.spec.p)
        return _batch_features(z.reshape(-1, 1), self.centers[:, i:i + 1], self.widths[:, i:i + 1])

    def design(self, samples) -> np.ndarray:
        x = np.asarray(samples, dtype=float)
        z = (x[:, self.active] - self.mean[self.active]) / self.std[self.active]
        return np.hstack([np.ones((x.shape[0], 1)), _batch_features(z, self.centers, self.widths)])

    def evaluate(self, samples) -> np.ndarray:
        """Values of every target component, shape ``(M, K - first_target)``."""
        phi = self.design(samples)
        return phi @ self.rows.T

    def component(self, t: int) -> TriangularMapComponent:
        """The fitted component of input ``t`` as a standalone object."""
        if not self.first_target <= t < self.K or not self.active[t]:
            raise ConfigError(f"input {t} is not a fitted target")
        w = 1 + self.spec.p
        row = self.rows[t - self.first_target]
        m_t = self.block_start[t]
        coeffs = np.zeros(t * w + 2)
        for j in range(t):
            if self.active[j]:
                b = self.block_start[j]
                coeffs[j * w:(j + 1) * w] = row[b:b + w]
        coeffs[-2] = row[0]
        coeffs[-1] = row[m_t]
        return TriangularMapComponent(
            k=t + 1, spec=self.spec.with_diagonal("affine"), mean=self.mean[:t + 1],
            std=self.std[:t + 1], active=self.active[:t + 1], off_sites=self.sites[:t],
            diag_site=None, coeffs=coeffs, ridge_fallback=self.ridge_fallback)

    def conditional_update(self, samples, new_inputs: dict) -> np.ndarray:
        """Move targets so each component keeps its value under new conditioning.

        Solves ``S_t(new_0, ..., new_{t-1}, x_t') = S_t(x_0, ..., x_t)`` for
        every target ``t`` in order. ``new_inputs`` maps input indices that
        are not block targets (observations, pre-updated inputs) to their new
        values, either scalars or length-``M`` vectors. Returns the updated
        sample matrix.
        """
        x = np.array(samples, dtype=float, copy=True)
        m = x.shape[0]
        phi_old = self.design(x)
        delta = np.zeros_like(phi_old)
        w = 1 + self.spec.p
        for j, v in new_inputs.items():
            x[:, j] = np.broadcast_to(np.asarray(v, dtype=float), (m,))
            if self.active[j]:
                b = self.block_start[j]
                delta[:, b:b + w] = self.features(j, x[:, j]) - phi_old[:, b:b + w]
        for t in range(self.first_target, self.K):
            if self.active[t]:
                row = self.rows[t - self.first_target]
                b = self.block_start[t]
                shift = -(delta[:, :b] @ row[:b]) / row[b]
                x[:, t] = x[:, t] + self.std[t] * shift
                delta[:, b:b + w] = self.features(t, x[:, t]) - phi_old[:, b:b + w]
        return x


def fit_affine_block(samples, first_target: int, spec: FeatureSpec | None = None) -> AffineBlockMap:
    """Fit all affine-diagonal components for inputs ``first_target..K-1`` at once.

    Inputs with zero sample variance are dropped from the design. A dropped
    target is left unchanged by :meth:`AffineBlockMap.conditional_update`.
    """
    spec = (spec or FeatureSpec()).with_diagonal("affine")
    x = np.asarray(samples, dtype=float)
    if x.ndim != 2:
        raise DimensionError("samples must be an (M, K) matrix")
    m, kk = x.shape
    if not 0 <= first_target < kk:
        raise ConfigError("first_target out of range")
    if m < 2:
        raise ConfigError("need at least two samples")
    mean, std, active = _standardize(x)
    z = (x - mean) / std
    w = 1 + spec.p
    centers, widths = _batch_sites(z[:, active], spec.p, spec.gamma)
    starts = np.full(kk, -1)
    starts[active] = 1 + w * np.arange(np.count_nonzero(active))
    phi = np.hstack([np.ones((m, 1)), _batch_features(z[:, active], centers, widths)])
    low, fallback = _chol_gram(phi.T @ phi, m * spec.ridge, rank_deficient=m < phi.shape[1])
    linv, info = lapack.dtrtri(low, lower=1)
    if info != 0:
        raise np.linalg.LinAlgError("singular Cholesky factor")
    rows = np.zeros((kk - first_target, phi.shape[1]))
    for t in range(first_target, kk):
        if active[t]:
            b = starts[t]
            rows[t - first_target, :b + 1] = math.sqrt(m) * linv[b, :b + 1]
    return AffineBlockMap(spec=spec, first_target=first_target, mean=mean, std=std,
                          active=active, centers=centers, widths=widths, block_start=starts,
                          rows=rows, ridge_fallback=fallback)


__all__ = [
    "FeatureSpec", "FeatureSite", "TriangularMapComponent", "AffineBlockMap",
    "empirical_quantiles", "fit_sites", "offdiagonal_features", "eval_offdiagonal",
    "psi_features", "eval_diagonal_psi", "objective", "fit_component_closed_form",
    "fit_component_projected_newton", "fit_component", "invert_last_input",
    "fit_affine_block",
]
