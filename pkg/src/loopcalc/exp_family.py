"""Exponential-family coordinates for distributions on ``{0, ..., q-1}``.

A sufficient statistic is a ``(q-1) x q`` matrix whose row ``k`` holds
``t_{k+1}(x)``.  Scalar helpers that take a label ``y`` use the symbol
convention ``y in {1, ..., q-1}`` (row ``y - 1``); the matrix helpers are
plain 0-based arrays.  The reference symbol is always ``0``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import DegenerateError, InputError

INTERIOR_MASS = 1e-12
MAX_CONDITION = 1e12


@dataclass(frozen=True)
class SufficientStatistic:
    t: np.ndarray

    def __post_init__(self):
        t = np.array(self.t, dtype=float)
        if t.ndim != 2 or t.shape[0] != t.shape[1] - 1:
            raise InputError(f"sufficient statistic must have shape (q-1, q), got {t.shape}")
        aug = np.vstack([np.ones(t.shape[1]), t])
        if np.linalg.matrix_rank(aug) < t.shape[1]:
            raise InputError("rows of the sufficient statistic and the constant function are linearly dependent")
        t.setflags(write=False)
        object.__setattr__(self, "t", t)

    @property
    def q(self) -> int:
        return self.t.shape[1]

    @classmethod
    def indicator(cls, q: int) -> SufficientStatistic:
        """``t_y(x) = delta(x, y)`` for ``y = 1..q-1``."""
        return cls(np.eye(q)[1:])


def _check_probs(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=float)
    if abs(b.sum() - 1) > 1e-9:
        raise InputError(f"probability vector sums to {b.sum()!r}")
    if b.min() < INTERIOR_MASS:
        raise DegenerateError(f"boundary belief: smallest mass {b.min():.3g} < {INTERIOR_MASS:g}")
    return b


@dataclass(frozen=True)
class ExpFamilyPoint:
    """An interior distribution ``b`` together with its natural and expectation coordinates."""

    stat: SufficientStatistic
    b: np.ndarray
    theta: np.ndarray
    eta: np.ndarray

    @classmethod
    def from_probs(cls, stat: SufficientStatistic, b) -> ExpFamilyPoint:
        b = _check_probs(b)
        eta = stat.t @ b
        return cls(stat, b, theta_from_eta(stat, eta), eta)

    @classmethod
    def from_theta(cls, stat: SufficientStatistic, theta) -> ExpFamilyPoint:
        theta = np.asarray(theta, dtype=float)
        b, eta = eta_from_theta(stat, theta)
        return cls(stat, b, theta, eta)

    @classmethod
    def from_eta(cls, stat: SufficientStatistic, eta) -> ExpFamilyPoint:
        theta = theta_from_eta(stat, eta)
        b, _ = eta_from_theta(stat, theta)
        return cls(stat, b, theta, np.asarray(eta, dtype=float))


def log_partition(stat: SufficientStatistic, theta) -> float:
    """``log Z(theta) = log sum_x exp(theta . t(x))``."""
    return float(logsumexp(np.asarray(theta, dtype=float) @ stat.t))


def eta_from_theta(stat: SufficientStatistic, theta) -> tuple[np.ndarray, np.ndarray]:
    """Distribution and expectation parameter for a natural parameter."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (stat.q - 1,) or not np.all(np.isfinite(theta)):
        raise InputError(f"theta must be a finite vector of length {stat.q - 1}")
    s = theta @ stat.t
    s -= s.max()
    b = np.exp(s)
    b /= b.sum()
    return b, stat.t @ b


def probs_from_eta(stat: SufficientStatistic, eta) -> np.ndarray:
    """The unique distribution with ``sum_x t(x) b(x) = eta``.

    The statistic rows plus the constant row form an invertible ``q x q``
    system, so the moment constraints pin ``b`` down exactly.
    """
    eta = np.asarray(eta, dtype=float)
    if eta.shape != (stat.q - 1,):
        raise InputError(f"eta must have length {stat.q - 1}")
    aug = np.vstack([np.ones(stat.q), stat.t])
    return np.linalg.solve(aug, np.concatenate([[1.0], eta]))


def theta_from_eta(stat: SufficientStatistic, eta) -> np.ndarray:
    """Natural parameter for an expectation parameter strictly inside the domain."""
    b = probs_from_eta(stat, eta)
    if b.min() <= INTERIOR_MASS:
        raise DegenerateError(
            f"eta is on or outside the boundary of the expectation domain (implied mass {b.min():.3g})"
        )
    # theta . (t(x) - t(0)) = log b(x) - log b(0) for x = 1..q-1
    diff = (stat.t[:, 1:] - stat.t[:, :1]).T
    return np.linalg.solve(diff, np.log(b[1:]) - np.log(b[0]))


def fisher_theta(point: ExpFamilyPoint) -> np.ndarray:
    """Covariance of the statistic, ``<t_k t_l> - eta_k eta_l``."""
    centered = point.stat.t - point.eta[:, None]
    return (centered * point.b) @ centered.T


def fisher_eta(point: ExpFamilyPoint) -> np.ndarray:
    jt = fisher_theta(point)
    cond = np.linalg.cond(jt)
    if not cond < MAX_CONDITION:
        raise DegenerateError(f"Fisher matrix is near singular (condition number {cond:.3g})")
    return np.linalg.inv(jt)


def tangent_theta_matrix(point: ExpFamilyPoint) -> np.ndarray:
    """Row ``k``: ``d log b(x) / d theta_k = t_k(x) - eta_k`` over ``x``."""
    return point.stat.t - point.eta[:, None]


def tangent_eta_matrix(point: ExpFamilyPoint) -> np.ndarray:
    """Row ``k``: ``d log b(x) / d eta_k = sum_w J_eta[w, k] (t_w(x) - eta_w)``."""
    return fisher_eta(point).T @ tangent_theta_matrix(point)


def tangent_theta(point: ExpFamilyPoint, y: int, x: int) -> float:
    return float(tangent_theta_matrix(point)[y - 1, x])


def tangent_eta(point: ExpFamilyPoint, y: int, x: int) -> float:
    return float(tangent_eta_matrix(point)[y - 1, x])


def transform_statistic(stat: SufficientStatistic, L) -> SufficientStatistic:
    """``t'_y = sum_w L[y, w] t_w``; then ``eta' = L eta`` and ``theta' = L^{-T} theta``."""
    L = np.asarray(L, dtype=float)
    if L.shape != (stat.q - 1, stat.q - 1):
        raise InputError(f"transform must be {stat.q - 1}x{stat.q - 1}, got {L.shape}")
    # determinant relative to the Hadamard bound, so the test ignores overall scale
    if abs(np.linalg.det(L)) <= 1e-12 * np.prod(np.linalg.norm(L, axis=1)):
        raise InputError("transform matrix is singular")
    return SufficientStatistic(L @ stat.t)


def diagonalizing_statistic(point: ExpFamilyPoint) -> SufficientStatistic:
    """A statistic whose Fisher matrix at ``point.b`` is the identity.

    With ``J = V diag(lam) V^T`` the transform is ``L = diag(lam)^{-1/2} V^T``,
    so ``L J L^T = I``.
    """
    jt = fisher_theta(point)
    try:
        lam, vecs = np.linalg.eigh(jt)
    except np.linalg.LinAlgError as exc:
        raise DegenerateError(f"eigendecomposition of the Fisher matrix failed: {exc}") from None
    if lam.min() <= 0:
        raise DegenerateError("Fisher matrix is not positive definite (degenerate belief)")
    return transform_statistic(point.stat, (vecs / np.sqrt(lam)).T)


def standardized_statistic(point: ExpFamilyPoint) -> np.ndarray:
    """Rows ``(t_k(x) - eta_k) / sqrt(Var t_k)``; equal to both tangents when the Fisher matrix is the identity."""
    centered = tangent_theta_matrix(point)
    var = (centered**2) @ point.b
    return centered / np.sqrt(var)[:, None]
