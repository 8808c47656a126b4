"""Sum-product belief propagation and Bethe free energy at its stationary points."""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .errors import BudgetError, DegenerateError, InputError
from .factor_graph import (
    DEFAULT_TABLE_BUDGET,
    FactorGraph,
    PseudoMarginals,
    _decode,
    exact_inference_ve,
)


@dataclass(frozen=True)
class MessageSet:
    """``var_to_fac[e]`` is ``m_{i->a}`` and ``fac_to_var[e]`` is ``m_{a->i}`` for edge ``e = (i, a)``."""

    var_to_fac: np.ndarray
    fac_to_var: np.ndarray

    def copy(self) -> MessageSet:
        return MessageSet(self.var_to_fac.copy(), self.fac_to_var.copy())


@dataclass(frozen=True)
class BPConfig:
    tolerance: float = 1e-10
    max_iterations: int = 10_000
    damping: float = 0.0
    schedule: Literal["parallel", "sequential"] = "parallel"

    def __post_init__(self):
        if not self.tolerance > 0:
            raise InputError("BP tolerance must be positive")
        if not 0 <= self.damping < 1:
            raise InputError("damping must lie in [0, 1)")
        if self.schedule not in ("parallel", "sequential"):
            raise InputError(f"unknown schedule {self.schedule!r}")


@dataclass(frozen=True)
class BetheResult:
    messages: MessageSet
    beliefs: PseudoMarginals
    log_z_bethe: float
    free_energy_parts: tuple[float, float] | None
    converged: bool
    iterations: int
    residual: float
    z_fac: np.ndarray = field(repr=False)
    z_var: np.ndarray = field(repr=False)
    z_edge: np.ndarray = field(repr=False)

    @property
    def z_bethe(self) -> float:
        return math.exp(self.log_z_bethe)

    def to_dict(self, g: FactorGraph) -> dict:
        return {
            "log_z_bethe": self.log_z_bethe,
            "converged": self.converged,
            "iterations": self.iterations,
            "residual": self.residual,
            "beliefs": self.beliefs.to_dict(g),
        }


def uniform_messages(g: FactorGraph) -> MessageSet:
    m = np.full((g.n_edges, g.q), 1.0 / g.q)
    return MessageSet(m.copy(), m.copy())


def random_messages(g: FactorGraph, seed: int = 0, spread: float = 0.5) -> MessageSet:
    """Uniform messages with a seeded multiplicative perturbation in ``[1 - spread, 1 + spread]``."""
    rng = np.random.default_rng(seed)
    parts = []
    for _ in range(2):
        m = 1.0 + spread * rng.uniform(-1, 1, size=(g.n_edges, g.q))
        parts.append(m / m.sum(axis=1, keepdims=True))
    return MessageSet(*parts)


def _normalize(v: np.ndarray, what: str) -> np.ndarray:
    s = v.sum()
    if not s > 0:
        raise DegenerateError(f"all-zero message {what}: support interaction is degenerate")
    return v / s


def _var_to_fac(g: FactorGraph, e: int, fac_to_var: np.ndarray) -> np.ndarray:
    i, _ = g.edges[e]
    m = g.h[i].copy()
    for e2 in g.var_edges[i]:
        if e2 != e:
            m *= fac_to_var[e2]
    return _normalize(m, f"{g.edge_id(e)[0]}->{g.edge_id(e)[1]}")


def _fac_to_var(g: FactorGraph, e: int, var_to_fac: np.ndarray) -> np.ndarray:
    _, a = g.edges[e]
    slot = g.slot(e)
    table = g.tables[a]
    args: list = [table, list(range(table.ndim))]
    for k, e2 in enumerate(g.fac_edges[a]):
        if k != slot:
            args += [var_to_fac[e2], [k]]
    m = np.einsum(*args, [slot])
    return _normalize(m, f"{g.edge_id(e)[1]}->{g.edge_id(e)[0]}")


def bp_step(g: FactorGraph, messages: MessageSet, config: BPConfig = BPConfig()) -> tuple[MessageSet, float]:
    """One sweep of both update rules, optionally damped; returns the new messages and the max-norm change."""
    old_vf, old_fv = messages.var_to_fac, messages.fac_to_var
    gamma = config.damping

    def mix(new, old):
        return new if gamma == 0 else (1 - gamma) * new + gamma * old

    if config.schedule == "parallel":
        vf = np.array([mix(_var_to_fac(g, e, old_fv), old_vf[e]) for e in range(g.n_edges)]).reshape(old_vf.shape)
        fv = np.array([mix(_fac_to_var(g, e, old_vf), old_fv[e]) for e in range(g.n_edges)]).reshape(old_fv.shape)
    else:
        vf, fv = old_vf.copy(), old_fv.copy()
        for a in range(g.n_factors):
            for e in g.fac_edges[a]:
                vf[e] = mix(_var_to_fac(g, e, fv), old_vf[e])
            for e in g.fac_edges[a]:
                fv[e] = mix(_fac_to_var(g, e, vf), old_fv[e])
    residual = max(
        float(np.abs(vf - old_vf).max(initial=0.0)),
        float(np.abs(fv - old_fv).max(initial=0.0)),
    )
    return MessageSet(vf, fv), residual


def beliefs_from_messages(
    g: FactorGraph, messages: MessageSet
) -> tuple[PseudoMarginals, np.ndarray, np.ndarray, np.ndarray]:
    """Beliefs and the normalizers ``Z_a``, ``Z_i``, ``Z_{i,a}`` defined by the messages."""
    vf, fv = messages.var_to_fac, messages.fac_to_var
    b_fac, z_fac = [], np.empty(g.n_factors)
    for a, table in enumerate(g.tables):
        unnorm = table * functools.reduce(np.multiply.outer, [vf[e] for e in g.fac_edges[a]])
        z_fac[a] = unnorm.sum()
        if not z_fac[a] > 0:
            raise DegenerateError(f"Z_a = 0 at factor {g.factors[a].id}")
        b_fac.append(unnorm / z_fac[a])
    b_var, z_var = np.empty((g.n_vars, g.q)), np.empty(g.n_vars)
    for i in range(g.n_vars):
        unnorm = g.h[i] * np.prod([fv[e] for e in g.var_edges[i]], axis=0) if g.var_edges[i] else g.h[i].copy()
        z_var[i] = unnorm.sum()
        if not z_var[i] > 0:
            raise DegenerateError(f"Z_i = 0 at variable {g.variables[i].id}")
        b_var[i] = unnorm / z_var[i]
    z_edge = (vf * fv).sum(axis=1)
    if np.any(~(z_edge > 0)):
        e = int(np.argmin(z_edge))
        raise DegenerateError(f"Z_ia = 0 on edge {g.edge_id(e)}")
    return PseudoMarginals(b_var, tuple(b_fac)), z_fac, z_var, z_edge


def log_z_bethe_stationary(z_fac, z_var, z_edge) -> float:
    """``sum log Z_a + sum log Z_i - sum log Z_{i,a}``."""
    z_fac, z_var, z_edge = (np.asarray(z, dtype=float) for z in (z_fac, z_var, z_edge))
    for name, z in (("Z_a", z_fac), ("Z_i", z_var), ("Z_ia", z_edge)):
        if np.any(~(z > 0)):
            raise DegenerateError(f"nonpositive normalizer {name}")
    return float(np.log(z_fac).sum() + np.log(z_var).sum() - np.log(z_edge).sum())


def _xlogy(x: np.ndarray, y: np.ndarray) -> float:
    mask = x > 0
    return float((x[mask] * np.log(y[mask])).sum())


def bethe_free_energy(g: FactorGraph, beliefs: PseudoMarginals, tol: float = 1e-6) -> tuple[float, float, float]:
    """``(F, U, H)`` with ``F = U - H``; ``0 log 0 = 0``."""
    beliefs.check(g, tol)
    u = 0.0
    h = 0.0
    for a, ba in enumerate(beliefs.fac):
        u -= _xlogy(ba, g.tables[a])
        h -= _xlogy(ba, ba)
    for i, bi in enumerate(beliefs.var):
        u -= _xlogy(bi, g.h[i])
        h += (g.var_degree(i) - 1) * _xlogy(bi, bi)
    return u - h, u, h


def bp_run(
    g: FactorGraph,
    init: MessageSet | Literal["uniform", "random"] | None = None,
    config: BPConfig = BPConfig(),
    seed: int = 0,
) -> BetheResult:
    """Iterate :func:`bp_step` until the max-norm change drops below the tolerance.

    Non-convergence is reported through ``converged=False``; the returned
    beliefs are then whatever the last iterate gives.
    """
    if init is None or (isinstance(init, str) and init == "uniform"):
        messages = uniform_messages(g)
    elif isinstance(init, str) and init == "random":
        messages = random_messages(g, seed)
    elif isinstance(init, MessageSet):
        messages = init.copy()
    else:
        raise InputError(f"unknown initialization {init!r}")

    residual, it, converged = math.inf, 0, False
    while it < config.max_iterations:
        messages, residual = bp_step(g, messages, config)
        it += 1
        if residual < config.tolerance:
            converged = True
            break
    return bethe_result_from_messages(g, messages, converged=converged, iterations=it, residual=residual)


def bethe_result_from_messages(
    g: FactorGraph, messages: MessageSet, converged: bool = True, iterations: int = 0, residual: float = 0.0
) -> BetheResult:
    beliefs, z_fac, z_var, z_edge = beliefs_from_messages(g, messages)
    log_z = log_z_bethe_stationary(z_fac, z_var, z_edge)
    parts = None
    if converged:
        try:
            _, u, h = bethe_free_energy(g, beliefs)
            parts = (u, h)
        except InputError:
            parts = None
    return BetheResult(messages, beliefs, log_z, parts, converged, iterations, residual, z_fac, z_var, z_edge)


@dataclass(frozen=True)
class StationarityReport:
    max_violation: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_violation <= self.tolerance


def check_stationarity(g: FactorGraph, messages: MessageSet, tol: float = 1e-8) -> StationarityReport:
    """Largest relative deviation of the messages from the fixed-point relations."""
    worst = 0.0
    for e in range(g.n_edges):
        for got, want in (
            (messages.var_to_fac[e], _var_to_fac(g, e, messages.fac_to_var)),
            (messages.fac_to_var[e], _fac_to_var(g, e, messages.var_to_fac)),
        ):
            got = got / got.sum()
            worst = max(worst, float(np.abs(got - want).max() / want.max()))
    return StationarityReport(worst, tol)


def tilted_graph(g: FactorGraph, beliefs: PseudoMarginals) -> FactorGraph:
    """Model with ``h'_i = b_i`` and ``f'_a = b_a / prod b_i`` (zero outside ``S_a``)."""
    factors = []
    for a, scope in enumerate(g.scopes):
        denom = functools.reduce(np.multiply.outer, [beliefs.var[i] for i in scope])
        with np.errstate(divide="ignore", invalid="ignore"):
            factors.append((scope, np.where(g.tables[a] > 0, beliefs.fac[a] / denom, 0.0)))
    return FactorGraph.from_arrays(beliefs.var, factors)


@dataclass(frozen=True)
class ReparameterizationReport:
    pointwise_error: float | None
    summed_error: float

    @property
    def max_error(self) -> float:
        return max(self.summed_error, self.pointwise_error or 0.0)


def check_reparameterization(
    g: FactorGraph, result: BetheResult, pointwise: bool = True, budget: float = 10**6
) -> ReparameterizationReport:
    """Check ``prod f prod h = Z_Bethe * prod_a [b_a / prod b_i] prod_i b_i`` and its summed form.

    The pointwise check enumerates every assignment (``q^N <= budget``); the
    summed form compares ``Z_Bethe * Z(tilted)`` with ``Z(G)``, both by
    variable elimination, so it also runs on larger models.
    """
    if result.beliefs.min_interior_mass(g) <= 0:
        raise DegenerateError("reparameterization needs strictly positive beliefs on the supports")
    tilted = tilted_graph(g, result.beliefs)
    point_err = None
    if pointwise:
        n_states = g.q**g.n_vars
        if n_states > budget:
            raise BudgetError(f"pointwise check needs q^N = {n_states:.3g} <= {budget:.3g}")
        x = _decode(0, n_states, g.n_vars, g.q)
        lhs = np.ones(n_states)
        rhs = np.full(n_states, result.z_bethe)
        for i in range(g.n_vars):
            lhs *= g.h[i][x[:, i]]
            rhs *= tilted.h[i][x[:, i]]
        for scope, t_orig, t_tilt in zip(g.scopes, g.tables, tilted.tables):
            idx = tuple(x[:, k] for k in scope)
            lhs *= t_orig[idx]
            rhs *= t_tilt[idx]
        pos = lhs > 0
        point_err = float(np.abs(rhs[pos] / lhs[pos] - 1).max(initial=0.0))
        if np.any(rhs[~pos] != 0):
            point_err = math.inf
    log_z = exact_inference_ve(g, marginals=False, table_budget=DEFAULT_TABLE_BUDGET).log_z
    log_tilt = exact_inference_ve(tilted, marginals=False, table_budget=DEFAULT_TABLE_BUDGET).log_z
    summed_err = abs(math.expm1(result.log_z_bethe + log_tilt - log_z))
    return ReparameterizationReport(point_err, summed_err)
