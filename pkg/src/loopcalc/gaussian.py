"""Gaussian models ``p(x) ∝ exp(-x'Jx/2 + h'x)``: exact moments, Gaussian BP and single-cycle loop corrections."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import networkx as nx
import numpy as np

from .bp import BPConfig
from .errors import DegenerateError, InputError

LOG_2PI = math.log(2 * math.pi)


@dataclass(frozen=True)
class GaussianModel:
    J: np.ndarray
    h: np.ndarray

    def __post_init__(self):
        J = np.array(self.J, dtype=float)
        h = np.array(self.h, dtype=float)
        if J.ndim != 2 or J.shape[0] != J.shape[1] or h.shape != (J.shape[0],):
            raise InputError(f"J must be N x N and h length N, got {J.shape} and {h.shape}")
        if not (np.all(np.isfinite(J)) and np.all(np.isfinite(h))):
            raise InputError("J and h must be finite")
        if np.abs(J - J.T).max(initial=0.0) > 1e-12:
            raise InputError("J is not symmetric")
        try:
            np.linalg.cholesky(J)
        except np.linalg.LinAlgError:
            raise InputError("J is not positive definite") from None
        J.setflags(write=False)
        h.setflags(write=False)
        object.__setattr__(self, "J", J)
        object.__setattr__(self, "h", h)

    @property
    def n(self) -> int:
        return len(self.h)

    @property
    def edges(self) -> list[tuple[int, int]]:
        """Pairs ``i < j`` with ``J_ij != 0``."""
        iu, ju = np.nonzero(np.triu(self.J, 1))
        return list(zip(iu.tolist(), ju.tolist()))

    def graph(self) -> nx.Graph:
        gr = nx.Graph()
        gr.add_nodes_from(range(self.n))
        gr.add_edges_from(self.edges)
        return gr

    def neighbors(self) -> list[list[int]]:
        out: list[list[int]] = [[] for _ in range(self.n)]
        for i, j in self.edges:
            out[i].append(j)
            out[j].append(i)
        return out

    @classmethod
    def from_dict(cls, doc) -> GaussianModel:
        try:
            return cls(np.asarray(doc["J"], dtype=float), np.asarray(doc.get("h", [0.0] * len(doc["J"])), dtype=float))
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"malformed Gaussian model: {exc}") from None

    def to_dict(self) -> dict:
        return {"J": self.J.tolist(), "h": self.h.tolist()}

    @classmethod
    def load(cls, path: str | Path) -> GaussianModel:
        text = Path(path).read_text()
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
        return cls.from_dict(doc)

    @classmethod
    def cycle(cls, n: int, diag: float = 1.0, off: float = 0.3, h=None) -> GaussianModel:
        """Single cycle ``0-1-...-(n-1)-0`` with constant diagonal and coupling."""
        if n < 3:
            raise InputError("a cycle needs at least 3 variables")
        J = np.eye(n) * diag
        for i in range(n):
            j = (i + 1) % n
            J[i, j] = J[j, i] = off
        return cls(J, np.zeros(n) if h is None else h)


@dataclass(frozen=True)
class GaussianExact:
    log_z: float
    mean: np.ndarray
    cov: np.ndarray


def gaussian_exact(model: GaussianModel) -> GaussianExact:
    """``log ∫ exp(-x'Jx/2 + h'x) dx``, mean ``J^{-1} h`` and covariance ``J^{-1}``."""
    chol = np.linalg.cholesky(model.J)
    cov = np.linalg.inv(model.J)
    mean = cov @ model.h
    logdet = 2 * np.log(np.diag(chol)).sum()
    log_z = 0.5 * model.n * LOG_2PI - 0.5 * logdet + 0.5 * float(model.h @ mean)
    return GaussianExact(float(log_z), mean, cov)


@dataclass(frozen=True)
class GaussianBelief:
    """BP beliefs: per-variable mean and variance, per-edge pairwise covariance (keys ``(i, j)``, ``i < j``)."""

    mean: np.ndarray
    var: np.ndarray
    edge_cov: dict[tuple[int, int], float]
    edge_var: dict[tuple[int, int], tuple[float, float]]

    def cov(self, i: int, j: int) -> float:
        return self.edge_cov[(min(i, j), max(i, j))]


@dataclass(frozen=True)
class GaussianBPResult:
    beliefs: GaussianBelief
    log_z_bethe: float
    converged: bool
    iterations: int
    residual: float
    negative_cavity_seen: bool

    def to_dict(self) -> dict:
        return {
            "log_z_bethe": self.log_z_bethe,
            "converged": self.converged,
            "iterations": self.iterations,
            "residual": self.residual,
            "negative_cavity_seen": bool(self.negative_cavity_seen),
            "mean": self.beliefs.mean.tolist(),
            "var": self.beliefs.var.tolist(),
        }


def _cavity(model, nbrs, prec, lin, j, i):
    """Precision and linear term at ``j`` with the message from ``i`` removed."""
    p = model.J[j, j] + sum(prec[(k, j)] for k in nbrs[j] if k != i)
    l = model.h[j] + sum(lin[(k, j)] for k in nbrs[j] if k != i)
    return p, l


def gaussian_bp_run(model: GaussianModel, config: BPConfig = BPConfig()) -> GaussianBPResult:
    """Gaussian BP with messages ``m_{j->i}(x_i) ∝ exp(-P x_i^2 / 2 + l x_i)`` stored as ``(P, l)``."""
    nbrs = model.neighbors()
    directed = [(j, i) for i in range(model.n) for j in nbrs[i]]
    prec = {d: 0.0 for d in directed}
    lin = {d: 0.0 for d in directed}
    gamma = config.damping
    negative = False
    residual, it, converged = math.inf, 0, False
    while it < config.max_iterations:
        src_p, src_l = prec, lin
        new_p, new_l = dict(prec), dict(lin)
        for j, i in directed:
            p, l = _cavity(model, nbrs, src_p if config.schedule == "parallel" else new_p,
                           src_l if config.schedule == "parallel" else new_l, j, i)
            if p == 0:
                raise DegenerateError(f"cavity precision vanished at variable {j}")
            # a negative cavity precision is tolerated transiently; beliefs are checked at the end
            negative |= p < 0
            pn = -model.J[i, j] ** 2 / p
            ln = -model.J[i, j] * l / p
            new_p[(j, i)] = (1 - gamma) * pn + gamma * prec[(j, i)]
            new_l[(j, i)] = (1 - gamma) * ln + gamma * lin[(j, i)]
        residual = max(
            [abs(new_p[d] - prec[d]) for d in directed] + [abs(new_l[d] - lin[d]) for d in directed], default=0.0
        )
        prec, lin = new_p, new_l
        it += 1
        if residual < config.tolerance:
            converged = True
            break
    beliefs = _beliefs(model, nbrs, prec, lin)
    return GaussianBPResult(beliefs, gaussian_bethe_log_z(model, beliefs), converged, it, residual, negative)


def _beliefs(model, nbrs, prec, lin) -> GaussianBelief:
    n = model.n
    mean, var = np.empty(n), np.empty(n)
    for i in range(n):
        p = model.J[i, i] + sum(prec[(k, i)] for k in nbrs[i])
        if p <= 0:
            raise DegenerateError(f"belief variance at variable {i} is not positive")
        var[i] = 1 / p
        mean[i] = (model.h[i] + sum(lin[(k, i)] for k in nbrs[i])) * var[i]
    edge_cov, edge_var = {}, {}
    for i, j in model.edges:
        pi, _ = _cavity(model, nbrs, prec, lin, i, j)
        pj, _ = _cavity(model, nbrs, prec, lin, j, i)
        det = pi * pj - model.J[i, j] ** 2
        if det <= 0:
            raise DegenerateError(f"pairwise belief on ({i}, {j}) is not positive definite")
        edge_cov[(i, j)] = -model.J[i, j] / det
        edge_var[(i, j)] = (pj / det, pi / det)
    return GaussianBelief(mean, var, edge_cov, edge_var)


def gaussian_bethe_log_z(model: GaussianModel, beliefs: GaussianBelief) -> float:
    """``-F_Bethe = -U + H`` with pair potentials ``exp(-J_ij x_i x_j)`` and differential entropies."""
    nbrs = model.neighbors()
    m, v = beliefs.mean, beliefs.var
    neg_u = 0.0
    ent = 0.0
    for (i, j), c in beliefs.edge_cov.items():
        neg_u += -model.J[i, j] * (c + m[i] * m[j])
        vi, vj = beliefs.edge_var[(i, j)]
        ent += 0.5 * (2 * (1 + LOG_2PI) + math.log(vi * vj - c * c))
    for i in range(model.n):
        neg_u += -0.5 * model.J[i, i] * (v[i] + m[i] ** 2) + model.h[i] * m[i]
        ent -= (len(nbrs[i]) - 1) * 0.5 * (1 + LOG_2PI + math.log(v[i]))
    return neg_u + ent


def _cycle_nodes(model: GaussianModel, cycle) -> list[int]:
    nodes = [int(i) for i in cycle]
    if len(nodes) < 3 or len(set(nodes)) != len(nodes):
        raise InputError("a loop needs at least 3 distinct variables")
    for i, j in zip(nodes, nodes[1:] + nodes[:1]):
        if model.J[i, j] == 0:
            raise InputError(f"({i}, {j}) is not an edge of the model")
    return nodes


def loop_correlation(beliefs: GaussianBelief, cycle) -> float:
    """``c = prod Cov_{b_a} / prod Var_{b_i}`` around the cycle."""
    nodes = list(cycle)
    num = math.prod(beliefs.cov(i, j) for i, j in zip(nodes, nodes[1:] + nodes[:1]))
    return num / math.prod(beliefs.var[i] for i in nodes)


def gaussian_simple_loop_weight(beliefs: GaussianBelief, cycle) -> float:
    """``c / (1 - c)``; diverges as the loop correlation approaches one."""
    c = loop_correlation(beliefs, cycle)
    if c >= 1:
        raise DegenerateError(f"loop correlation c = {c:.6g} >= 1: the series around this loop diverges")
    return c / (1 - c)


def _single_cycle(model: GaussianModel) -> list[int]:
    gr = model.graph()
    if model.n < 3 or not nx.is_connected(gr) or any(d != 2 for _, d in gr.degree()):
        raise InputError("the pairwise graph of the model is not a single cycle")
    cyc = [u for u, _ in nx.find_cycle(gr, source=0)]
    return cyc


@dataclass(frozen=True)
class SingleCycleResult:
    log_z: float
    log_z_bethe: float
    c: float
    mean: np.ndarray
    var: np.ndarray
    cycle: list[int]

    def to_dict(self) -> dict:
        return {
            "log_z": self.log_z,
            "log_z_bethe": self.log_z_bethe,
            "loop_correlation": self.c,
            "mean": self.mean.tolist(),
            "var": self.var.tolist(),
            "cycle": self.cycle,
        }


def gaussian_single_cycle(model: GaussianModel, config: BPConfig = BPConfig()) -> SingleCycleResult:
    """``Z = Z_Bethe / (1 - c)``, variances ``Var_b (1 + c) / (1 - c)``; the anchor is the lowest-id variable."""
    cyc = _single_cycle(model)
    res = gaussian_bp_run(model, config)
    c = loop_correlation(res.beliefs, cyc)
    if c >= 1:
        raise DegenerateError(f"loop correlation c = {c:.6g} >= 1")
    var = res.beliefs.var * (1 + c) / (1 - c)
    return SingleCycleResult(res.log_z_bethe - math.log1p(-c), res.log_z_bethe, c, res.beliefs.mean, var, cyc)


@dataclass(frozen=True)
class WalkSumReport:
    i: int
    max_len: int
    rho: float
    exact: float
    series: float
    series_residual: float
    tail_bound: float
    closed_form: float | None
    closed_form_residual: float | None

    @property
    def rounding_allowance(self) -> float:
        # the bound is for exact arithmetic; summing max_len + 1 terms adds rounding of its own
        return 4 * (self.max_len + 1) * np.finfo(float).eps * abs(self.exact)

    @property
    def series_within_bound(self) -> bool:
        return bool(self.series_residual <= self.tail_bound + self.rounding_allowance)

    def to_dict(self) -> dict:
        return dict(self.__dict__, rounding_allowance=float(self.rounding_allowance), series_within_bound=self.series_within_bound)


def walk_sum_check(model: GaussianModel, i: int, max_len: int, config: BPConfig = BPConfig()) -> WalkSumReport:
    """Compare ``Var_p[X_i]`` with the truncated walk sum and, on single cycles, the loop-corrected Bethe variance.

    ``W = I - D^{-1/2} J D^{-1/2}`` and ``Var_p[X_i] = (1/J_ii) sum_k (W^k)_ii``;
    the truncation error is at most ``rho^{L+1} / ((1 - rho) J_ii)`` with
    ``rho`` the spectral radius of ``|W|``.
    """
    if not 0 <= i < model.n:
        raise InputError(f"variable {i} out of range")
    d = np.sqrt(np.diag(model.J))
    W = np.eye(model.n) - model.J / np.outer(d, d)
    rho = float(np.abs(np.linalg.eigvalsh(np.abs(W))).max())
    if rho >= 1:
        raise InputError(f"model is not walk-summable (spectral radius of |W| is {rho:.6g})")
    acc, power = 0.0, np.eye(model.n)
    for _ in range(max_len + 1):
        acc += power[i, i]
        power = power @ W
    series = acc / model.J[i, i]
    exact = float(np.linalg.inv(model.J)[i, i])
    tail = rho ** (max_len + 1) / ((1 - rho) * model.J[i, i])
    closed = closed_res = None
    try:
        cyc = _single_cycle(model)
    except InputError:
        cyc = None
    if cyc is not None:
        res = gaussian_bp_run(model, config)
        c = loop_correlation(res.beliefs, cyc)
        vb = res.beliefs.var[i]
        closed = float(vb + 2 * vb * c / (1 - c))
        closed_res = abs(closed - exact)
    series = float(series)
    return WalkSumReport(i, max_len, rho, exact, series, abs(series - exact), float(tail), closed, closed_res)
