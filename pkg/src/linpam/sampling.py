"""Random streams and the smooth periodic prior used by the advection problem."""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .invariant_subspace import SubUnitaryBasis, project_complement

SEED_ENV = "LINPAM_SEED"


@dataclass(frozen=True)
class RngStream:
    """A reproducible, independent random stream identified by ``(seed, stream_id)``.

    Streams are PCG64 generators (128-bit state) seeded through
    :class:`numpy.random.SeedSequence` with ``stream_id`` as spawn key, so
    distinct ids give statistically independent sequences. ``stream_id`` may
    be an int or a tuple of ints for hierarchical streams
    (repetition, purpose, ...).
    """

    seed: int
    stream_id: int | tuple = 0

    def generator(self) -> np.random.Generator:
        key = self.stream_id if isinstance(self.stream_id, tuple) else (self.stream_id,)
        seq = np.random.SeedSequence(entropy=int(self.seed), spawn_key=tuple(int(k) for k in key))
        return np.random.Generator(np.random.PCG64(seq))


def resolve_seed(cli_seed=None, default: int = 0) -> int:
    """CLI value wins over ``LINPAM_SEED``, which wins over ``default``."""
    if cli_seed is not None:
        return int(cli_seed)
    env = os.environ.get(SEED_ENV)
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV}={env!r} is not an integer") from exc
    return default


def gaussian_vector(rng: np.random.Generator, dim, std: float = 1.0) -> np.ndarray:
    """I.i.d. ``N(0, std**2)`` entries; ``dim`` may be an int or a shape tuple."""
    if std < 0:
        raise ConfigError("std must be nonnegative")
    if std == 0:
        return np.zeros(dim)
    return std * rng.standard_normal(dim)


@dataclass(frozen=True, eq=False)
class SmoothPeriodicPrior:
    """Smooth periodic fields with prescribed linear invariants.

    Draws complex Fourier coefficients damped by ``exp(-k**alpha / 2)``,
    transforms them to a real grid field, removes the invariant components and
    adds back ``u_perp @ c``. Hence every sample satisfies ``u_perp.T x = c``.
    """

    basis: SubUnitaryBasis
    c: np.ndarray
    alpha: float = 1.0
    envelope: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        n = self.basis.n
        if n % 2:
            raise ConfigError(f"grid size must be even, got {n}")
        if not self.alpha > 0:
            raise ConfigError("alpha must be positive")
        c = np.atleast_1d(np.asarray(self.c, dtype=float))
        if c.shape != (self.basis.r,) or not np.all(np.isfinite(c)):
            raise ConfigError(f"invariant value must be a finite vector of length {self.basis.r}")
        object.__setattr__(self, "c", c)
        # the first (zero-frequency) mode carries index 1
        k = np.arange(1, n // 2 + 2, dtype=float)
        object.__setattr__(self, "envelope", np.exp(-0.5 * k**self.alpha))

    @property
    def n(self) -> int:
        return self.basis.n


def sample_smooth_periodic(prior: SmoothPeriodicPrior, rng: np.random.Generator, size=None):
    """One sample (shape ``(n,)``) or ``size`` samples stored column-wise.

    The zero-frequency and Nyquist imaginary parts are left in place; the real
    inverse transform ignores them.
    """
    n = prior.n
    m = 1 if size is None else int(size)
    half = n // 2 + 1
    z_re = rng.standard_normal((half, m))
    z_im = rng.standard_normal((half, m))
    coeffs = (z_re + 1j * z_im) * prior.envelope[:, None]
    field_ = np.fft.irfft(coeffs, n=n, axis=0)
    x = project_complement(prior.basis, field_) + (prior.basis.u_perp @ prior.c)[:, None]
    return x[:, 0] if size is None else x
