"""Geometry of linear invariants.

A set of ``r`` linear invariants of an ``n``-dimensional state is described by
a sub-unitary matrix ``u_perp`` (orthonormal columns) so that the invariants
read ``u_perp.T @ x``. Its orthonormal complement ``u_para`` spans the
directions along which an analysis step may move the state without touching
the invariants. Together ``[u_perp, u_para]`` is an orthogonal matrix and

    x = u_perp @ x_perp + u_para @ x_para.

All functions accept either a single state of shape ``(n,)`` or an ensemble of
states stored column-wise with shape ``(n, M)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, RankDeficiency

ORTHO_TOL = 1e-12
RANK_TOL = 1e-10

__all__ = [
    "SubUnitaryBasis",
    "orthonormalize_constraints",
    "orthonormal_complement",
    "decompose_state",
    "reconstruct_state",
    "evaluate_invariants",
    "project_complement",
]


def _frozen(a):
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


def _basis_defects(u_perp, u_para):
    n = u_perp.shape[0]
    r = u_perp.shape[1]
    return (
        np.max(np.abs(u_perp.T @ u_perp - np.eye(r)), initial=0.0),
        np.max(np.abs(u_para.T @ u_para - np.eye(n - r)), initial=0.0),
        np.max(np.abs(u_perp.T @ u_para), initial=0.0),
        np.max(np.abs(u_perp @ u_perp.T + u_para @ u_para.T - np.eye(n)), initial=0.0),
    )


@dataclass(frozen=True, eq=False)
class SubUnitaryBasis:
    """Invariant directions ``u_perp`` and their orthonormal complement ``u_para``.

    ``r = 0`` is accepted and stands for "no invariants" (``u_para`` then spans
    the whole space).
    """

    u_perp: np.ndarray
    u_para: np.ndarray

    def __post_init__(self):
        u_perp = np.asarray(self.u_perp, dtype=float)
        u_para = np.asarray(self.u_para, dtype=float)
        if u_perp.ndim == 1:
            u_perp = u_perp[:, None]
        if u_perp.ndim != 2 or u_para.ndim != 2:
            raise DimensionError("basis matrices must be two-dimensional")
        n, r = u_perp.shape
        if u_para.shape != (n, n - r):
            raise DimensionError(
                f"u_para has shape {u_para.shape}, expected {(n, n - r)}"
            )
        if r >= n:
            raise DimensionError(f"need r < n, got r={r}, n={n}")
        worst = max(_basis_defects(u_perp, u_para))
        if not worst <= ORTHO_TOL:
            raise RankDeficiency(
                f"columns of [u_perp, u_para] are not orthonormal (defect {worst:.3e})"
            )
        object.__setattr__(self, "u_perp", _frozen(u_perp))
        object.__setattr__(self, "u_para", _frozen(u_para))

    @property
    def n(self) -> int:
        return self.u_perp.shape[0]

    @property
    def r(self) -> int:
        return self.u_perp.shape[1]

    @property
    def rotation(self) -> np.ndarray:
        """The orthogonal matrix ``[u_perp, u_para]``."""
        return np.hstack([self.u_perp, self.u_para])

    @property
    def projector(self) -> np.ndarray:
        """``I - u_perp u_perp^T``, the projector onto ``span(u_para)``."""
        return np.eye(self.n) - self.u_perp @ self.u_perp.T

    @classmethod
    def unconstrained(cls, n: int) -> "SubUnitaryBasis":
        return cls(np.zeros((n, 0)), np.eye(n))

    @classmethod
    def from_constraints(cls, a_raw, rng=None) -> "SubUnitaryBasis":
        basis, _ = orthonormalize_constraints(a_raw, rng=rng)
        return basis


def orthonormal_complement(u_perp, rng=None) -> np.ndarray:
    """Orthonormal basis of the complement of ``span(u_perp)``.

    ``u_perp`` is padded with standard Gaussian columns and a complete QR
    factorization is taken; the trailing columns form the complement.
    """
    u_perp = np.asarray(u_perp, dtype=float)
    n, r = u_perp.shape
    rng = np.random.default_rng(0) if rng is None else rng
    padded = np.hstack([u_perp, rng.standard_normal((n, n - r))])
    q, _ = np.linalg.qr(padded, mode="complete")
    u_para = q[:, r:]
    if max(_basis_defects(u_perp, u_para)) > ORTHO_TOL:
        # one extra Gram-Schmidt sweep against u_perp
        u_para = u_para - u_perp @ (u_perp.T @ u_para)
        u_para, _ = np.linalg.qr(u_para)
    return u_para


def orthonormalize_constraints(a_raw, rng=None):
    """Turn raw constraint vectors into a sub-unitary basis.

    Computes ``a_raw = u_perp @ R`` with ``u_perp`` sub-unitary and ``R``
    lower triangular with nonnegative diagonal (a QL factorization, obtained
    from a QR factorization of the column-reversed matrix). A constraint
    ``a_raw.T @ x = c_raw`` is then equivalent to
    ``u_perp.T @ x = solve(R.T, c_raw)``.

    Parameters
    ----------
    a_raw : array_like, shape (n, r)
        Constraint vectors stored column-wise, full column rank, ``r < n``.
    rng : numpy.random.Generator, optional
        Source of the padding columns used to build the complement. Defaults
        to a fixed seed so the basis is reproducible.

    Returns
    -------
    basis : SubUnitaryBasis
    R : ndarray, shape (r, r)
    """
    a = np.asarray(a_raw, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise DimensionError("a_raw must be a vector or a matrix")
    n, r = a.shape
    if not 1 <= r < n:
        raise DimensionError(f"need 1 <= r < n, got r={r}, n={n}")
    if not np.all(np.isfinite(a)):
        raise RankDeficiency("a_raw has non-finite entries")

    q, upper = np.linalg.qr(a[:, ::-1])
    u_perp = q[:, ::-1]
    lower = upper[::-1, ::-1]
    signs = np.where(np.diag(lower) < 0, -1.0, 1.0)
    u_perp = u_perp * signs
    lower = signs[:, None] * lower

    scale = np.linalg.norm(a, 2)
    if scale == 0 or np.min(np.abs(np.diag(lower))) < RANK_TOL * scale:
        raise RankDeficiency(
            f"a_raw has numerical rank below {r} (tolerance {RANK_TOL:g}*||a_raw||)"
        )
    u_para = orthonormal_complement(u_perp, rng)
    return SubUnitaryBasis(u_perp, u_para), lower


def _check_rows(basis: SubUnitaryBasis, x, rows: int, what: str):
    x = np.asarray(x, dtype=float)
    if x.ndim not in (1, 2) or x.shape[0] != rows:
        raise DimensionError(f"{what} has shape {x.shape}, expected leading dimension {rows}")
    return x


def decompose_state(basis: SubUnitaryBasis, x):
    """Split ``x`` into invariant coordinates and complement coordinates."""
    x = _check_rows(basis, x, basis.n, "x")
    return basis.u_perp.T @ x, basis.u_para.T @ x


def reconstruct_state(basis: SubUnitaryBasis, x_perp, x_para):
    """Inverse of :func:`decompose_state`."""
    x_perp = _check_rows(basis, x_perp, basis.r, "x_perp")
    x_para = _check_rows(basis, x_para, basis.n - basis.r, "x_para")
    if x_perp.ndim != x_para.ndim or x_perp.shape[1:] != x_para.shape[1:]:
        raise DimensionError("x_perp and x_para must describe the same number of states")
    return basis.u_perp @ x_perp + basis.u_para @ x_para


def evaluate_invariants(basis: SubUnitaryBasis, x):
    """``u_perp.T @ x``."""
    x = _check_rows(basis, x, basis.n, "x")
    return basis.u_perp.T @ x


def project_complement(basis: SubUnitaryBasis, v):
    """Remove the invariant components of ``v``: ``(I - u_perp u_perp^T) v``."""
    v = _check_rows(basis, v, basis.n, "v")
    return v - basis.u_perp @ (basis.u_perp.T @ v)
