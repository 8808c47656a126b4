"""Generalized loops, loop weights and loop-series corrections to the Bethe approximation.

Every weight here is a contraction over edge labels: each factor in the
loop contributes ``< prod_e K_theta[e][y_e, X_i] >_{b_a}``, each variable
contributes ``< prod_e K_eta[e][y_e, X_i] >_{b_i}``, and the labels are
summed.  The representations differ only in the kernels:

* ``theorem1``        tangents w.r.t. natural and expectation parameters of any statistic
* ``diagonal_fisher`` both kernels ``(t - eta) / sd`` for a statistic with identity Fisher matrix
* ``delta_basis``     both kernels ``(delta(z, x) - b(z)) / sqrt(b(z))``, ``z`` over the full alphabet
* ``binary``          ``(x - eta) / sqrt(eta (1 - eta))`` for ``q = 2``
"""

from __future__ import annotations

import functools
import itertools
import json
from collections.abc import Callable, Iterator, Mapping, Sequence
from dataclasses import dataclass, field
from typing import IO, Literal

import networkx as nx
import numpy as np

from .bp import BetheResult
from .errors import BudgetError, InputError, NotATreeError
from .exp_family import (
    INTERIOR_MASS,
    ExpFamilyPoint,
    SufficientStatistic,
    diagonalizing_statistic,
    standardized_statistic,
    tangent_eta_matrix,
    tangent_theta_matrix,
)
from .factor_graph import FactorGraph, PseudoMarginals

MAX_EXHAUSTIVE_EDGES = 24

Method = Literal["theorem1", "diagonal_fisher", "delta_basis", "binary", "trace"]


# --------------------------------------------------------------------------
# loop objects and enumeration
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class GeneralizedLoop:
    """Edge subset ``E'`` (sorted edge positions) with its induced degrees.

    ``cycle`` is set for simple loops: the alternating node sequence
    ``(("v", i1), ("f", a1), ("v", i2), ...)`` in canonical orientation.
    """

    edges: tuple[int, ...]
    pairs: tuple[tuple[int, int], ...] = field(compare=False, repr=False)
    var_degree: Mapping[int, int] = field(compare=False, repr=False)
    fac_degree: Mapping[int, int] = field(compare=False, repr=False)
    cycle: tuple[tuple[str, int], ...] | None = field(default=None, compare=False, repr=False)

    @classmethod
    def from_edges(cls, g: FactorGraph, edges: Sequence[int], cycle=None) -> GeneralizedLoop:
        edges = tuple(sorted(int(e) for e in edges))
        if len(set(edges)) != len(edges) or any(not 0 <= e < g.n_edges for e in edges):
            raise InputError("loop edges must be distinct valid edge positions")
        vd: dict[int, int] = {}
        fd: dict[int, int] = {}
        for e in edges:
            i, a = g.edges[e]
            vd[i] = vd.get(i, 0) + 1
            fd[a] = fd.get(a, 0) + 1
        return cls(edges, tuple(g.edges[e] for e in edges), vd, fd, cycle)

    def is_generalized_loop(self) -> bool:
        return all(d != 1 for d in self.var_degree.values()) and all(d != 1 for d in self.fac_degree.values())

    def is_simple(self) -> bool:
        if not self.edges or not self.is_generalized_loop():
            return False
        if any(d != 2 for d in itertools.chain(self.var_degree.values(), self.fac_degree.values())):
            return False
        return nx.is_connected(self._nx())

    def _nx(self) -> nx.Graph:
        h = nx.Graph()
        h.add_edges_from((("v", i), ("f", a)) for i, a in self.pairs)
        return h

    def labelled(self, g: FactorGraph) -> list[list]:
        return [[g.edge_id(e)[0], g.edge_id(e)[1]] for e in self.edges]


def _enumerate_subsets(
    g: FactorGraph,
    allowed: Sequence[int],
    exempt_vars: frozenset[int] = frozenset(),
    exempt_facs: frozenset[int] = frozenset(),
    max_edges: int | None = None,
) -> list[tuple[int, ...]]:
    """All subsets of ``allowed`` with no degree-1 node outside the exempt sets (including the empty set).

    Backtracking over edges in order; a node's degree is checked as soon as
    its last allowed edge has been decided.
    """
    allowed = sorted(allowed)
    last_var: dict[int, int] = {}
    last_fac: dict[int, int] = {}
    for k, e in enumerate(allowed):
        i, a = g.edges[e]
        last_var[i] = k
        last_fac[a] = k
    closes_var = {k: i for i, k in last_var.items() if i not in exempt_vars}
    closes_fac: dict[int, list[int]] = {}
    for a, k in last_fac.items():
        if a not in exempt_facs:
            closes_fac.setdefault(k, []).append(a)
    closes: dict[int, list[tuple[str, int]]] = {}
    for k, i in closes_var.items():
        closes.setdefault(k, []).append(("v", i))
    for k, facs in closes_fac.items():
        closes.setdefault(k, []).extend(("f", a) for a in facs)

    vdeg = [0] * g.n_vars
    fdeg = [0] * g.n_factors
    out: list[tuple[int, ...]] = []
    chosen: list[int] = []
    limit = len(allowed) if max_edges is None else max_edges

    def ok(k: int) -> bool:
        for kind, n in closes.get(k, ()):
            if (vdeg[n] if kind == "v" else fdeg[n]) == 1:
                return False
        return True

    def rec(k: int) -> None:
        if k == len(allowed):
            out.append(tuple(chosen))
            return
        e = allowed[k]
        i, a = g.edges[e]
        if ok(k):
            rec(k + 1)
        if len(chosen) < limit:
            vdeg[i] += 1
            fdeg[a] += 1
            chosen.append(e)
            if ok(k):
                rec(k + 1)
            chosen.pop()
            vdeg[i] -= 1
            fdeg[a] -= 1

    rec(0)
    out.sort()
    return out


def _check_budget(n_edges: int, max_edges: int | None) -> None:
    if n_edges > MAX_EXHAUSTIVE_EDGES and max_edges is None:
        raise BudgetError(
            f"exhaustive loop enumeration is limited to |E| <= {MAX_EXHAUSTIVE_EDGES} edges "
            f"(graph has {n_edges}); pass max_edges to bound the loop size"
        )


def enumerate_generalized_loops(g: FactorGraph, max_edges: int | None = None) -> Iterator[GeneralizedLoop]:
    """Nonempty edge subsets with no degree-1 variable or factor, in lexicographic order of sorted edge positions."""
    _check_budget(g.n_edges, max_edges)
    for s in _enumerate_subsets(g, range(g.n_edges), max_edges=max_edges):
        if s:
            yield GeneralizedLoop.from_edges(g, s)


def _incidence_graph(g: FactorGraph) -> nx.Graph:
    h = nx.Graph()
    h.add_nodes_from(("v", i) for i in range(g.n_vars))
    h.add_nodes_from(("f", a) for a in range(g.n_factors))
    h.add_edges_from((("v", i), ("f", a)) for i, a in g.edges)
    return h


def _canonical_cycle(nodes: list[tuple[str, int]]) -> tuple[tuple[str, int], ...]:
    start = nodes.index(("v", min(n[1] for n in nodes if n[0] == "v")))
    rot = nodes[start:] + nodes[:start]
    rev = [rot[0]] + rot[1:][::-1]
    return tuple(rot if rot[1][1] <= rev[1][1] else rev)


def enumerate_simple_loops(g: FactorGraph) -> list[GeneralizedLoop]:
    """Simple cycles of the bipartite incidence graph, sorted by edge positions."""
    edge_pos = {(i, a): e for e, (i, a) in enumerate(g.edges)}
    loops = []
    for nodes in nx.simple_cycles(_incidence_graph(g)):
        cyc = _canonical_cycle(list(nodes))
        edges = []
        for u, v in zip(cyc, cyc[1:] + cyc[:1]):
            i, a = (u[1], v[1]) if u[0] == "v" else (v[1], u[1])
            edges.append(edge_pos[(i, a)])
        loops.append(GeneralizedLoop.from_edges(g, edges, cyc))
    loops.sort(key=lambda lp: lp.edges)
    return loops


# --------------------------------------------------------------------------
# kernels
# --------------------------------------------------------------------------


def _require_interior(beliefs: PseudoMarginals, g: FactorGraph, nodes: Sequence[int]) -> None:
    for i in nodes:
        if beliefs.var[i].min() < INTERIOR_MASS:
            raise InputError(
                f"boundary belief at variable {g.variables[i].id}: loop weights need interior beliefs "
                f"(smallest mass {beliefs.var[i].min():.3g})"
            )


StatSpec = SufficientStatistic | Mapping[int, SufficientStatistic] | Mapping[tuple[int, int], SufficientStatistic]


def _stat_for(stats, i: int, a: int, q: int) -> SufficientStatistic:
    if stats is None:
        return SufficientStatistic.indicator(q)
    if isinstance(stats, SufficientStatistic):
        return stats
    if (i, a) in stats:
        return stats[(i, a)]
    if i in stats:
        return stats[i]
    raise InputError(f"no sufficient statistic given for variable {i} on edge {(i, a)}")


def _kernels(
    g: FactorGraph, beliefs: PseudoMarginals, edges: Sequence[int], method: str, stats=None
) -> tuple[dict[int, np.ndarray], dict[int, np.ndarray]]:
    """Factor-side and variable-side kernel matrices (labels x alphabet) per edge."""
    _require_interior(beliefs, g, sorted({g.edges[e][0] for e in edges}))
    th: dict[int, np.ndarray] = {}
    et: dict[int, np.ndarray] = {}
    cache: dict = {}
    for e in edges:
        i, a = g.edges[e]
        b = beliefs.var[i]
        if method == "theorem1":
            stat = _stat_for(stats, i, a, g.q)
            key = (i, id(stat))
            if key not in cache:
                point = ExpFamilyPoint.from_probs(stat, b)
                cache[key] = (tangent_theta_matrix(point), tangent_eta_matrix(point))
            th[e], et[e] = cache[key]
        elif method == "diagonal_fisher":
            if i not in cache:
                base = ExpFamilyPoint.from_probs(_stat_for(stats, i, a, g.q), b)
                point = ExpFamilyPoint.from_probs(diagonalizing_statistic(base), b)
                cache[i] = standardized_statistic(point)
            th[e] = et[e] = cache[i]
        elif method == "delta_basis":
            th[e] = et[e] = (np.eye(g.q) - b[:, None]) / np.sqrt(b)[:, None]
        elif method == "binary":
            if g.q != 2:
                raise InputError(f"binary loop weight needs q = 2, got q = {g.q}")
            eta = b[1]
            th[e] = et[e] = (np.array([[0.0, 1.0]]) - eta) / np.sqrt(eta * (1 - eta))
        else:
            raise InputError(f"unknown weight method {method!r}")
    return th, et


# --------------------------------------------------------------------------
# contraction
# --------------------------------------------------------------------------


def _node_tensor(base: np.ndarray, axes: Sequence[int], mats: Sequence[np.ndarray]) -> np.ndarray:
    """``sum_x base(x) prod_k mats[k][y_k, x_{axes[k]}]`` as a tensor over ``y``."""
    nd = base.ndim
    args: list = [base, list(range(nd))]
    for k, (ax, m) in enumerate(zip(axes, mats)):
        args += [m, [nd + k, ax]]
    return np.einsum(*args, list(range(nd, nd + len(mats))))


def _contract_network(tensors: list[tuple[np.ndarray, list[int]]]) -> float:
    """Sum over all labels of the product of tensors; each label occurs in exactly two tensors."""
    scalar = 1.0
    pending = []
    for t, labels in tensors:
        if labels:
            pending.append((t, list(labels)))
        else:
            scalar *= float(t)
    while pending:
        best = None
        for x in range(len(pending)):
            lx = set(pending[x][1])
            for y in range(x + 1, len(pending)):
                shared = lx.intersection(pending[y][1])
                if not shared:
                    continue
                size = len(lx) + len(pending[y][1]) - 2 * len(shared)
                if best is None or size < best[0]:
                    best = (size, x, y, shared)
        if best is None:
            raise InputError("label without a partner in the contraction network")
        _, x, y, shared = best
        (tx, lx), (ty, ly) = pending[x], pending[y]
        sh = sorted(shared)
        t = np.tensordot(tx, ty, axes=([lx.index(s) for s in sh], [ly.index(s) for s in sh]))
        labels = [s for s in lx if s not in shared] + [s for s in ly if s not in shared]
        del pending[y], pending[x]
        if labels:
            pending.append((t, labels))
        else:
            scalar *= float(t)
    return scalar


def _weight(
    g: FactorGraph,
    beliefs: PseudoMarginals,
    edges: Sequence[int],
    th: Mapping[int, np.ndarray],
    et: Mapping[int, np.ndarray],
    c_block: tuple[np.ndarray, tuple[int, ...]] | None = None,
    skip_facs: frozenset[int] = frozenset(),
) -> float:
    """Contract the loop network; ``c_block = (g * b_C, C)`` replaces the variable nodes in ``C``."""
    by_fac: dict[int, list[int]] = {}
    by_var: dict[int, list[int]] = {}
    for e in edges:
        i, a = g.edges[e]
        by_fac.setdefault(a, []).append(e)
        by_var.setdefault(i, []).append(e)
    tensors = []
    for a, es in by_fac.items():
        if a in skip_facs:
            raise InputError(f"loop edge touches factor {g.factors[a].id} whose scope lies inside C")
        tensors.append((_node_tensor(beliefs.fac[a], [g.slot(e) for e in es], [th[e] for e in es]), es))
    in_c = set(c_block[1]) if c_block else set()
    for i, es in by_var.items():
        if i in in_c:
            continue
        tensors.append((_node_tensor(beliefs.var[i], [0] * len(es), [et[e] for e in es]), es))
    if c_block is not None:
        table, cvars = c_block
        axes, mats, labels = [], [], []
        for k, i in enumerate(cvars):
            for e in by_var.get(i, []):
                axes.append(k)
                mats.append(et[e])
                labels.append(e)
        tensors.append((_node_tensor(table, axes, mats), labels))
    return _contract_network(tensors)


def _as_loop(g: FactorGraph, loop) -> GeneralizedLoop:
    if isinstance(loop, GeneralizedLoop):
        return loop
    return GeneralizedLoop.from_edges(g, loop)


def _require_gloop(loop: GeneralizedLoop) -> None:
    if not loop.is_generalized_loop():
        raise InputError(f"edge set {list(loop.edges)} has a degree-1 node and is not a generalized loop")


def loop_weight(
    g: FactorGraph, beliefs: PseudoMarginals, loop, stats: StatSpec | None = None, method: str | None = None
) -> float:
    """Weight ``K(E')`` of a generalized loop.

    Without ``stats`` (or with ``method="diagonal_fisher"``) a per-variable
    statistic with identity Fisher matrix is built and both tangents reduce
    to the standardized statistic.  Passing ``stats`` (one statistic, a map
    variable -> statistic, or a map (variable, factor) -> statistic) selects
    the general natural/expectation tangent form.
    """
    loop = _as_loop(g, loop)
    _require_gloop(loop)
    if method is None:
        method = "diagonal_fisher" if stats is None else "theorem1"
    th, et = _kernels(g, beliefs, loop.edges, method, stats)
    return _weight(g, beliefs, loop.edges, th, et)


def loop_weight_binary(g: FactorGraph, beliefs: PseudoMarginals, loop) -> float:
    loop = _as_loop(g, loop)
    _require_gloop(loop)
    th, et = _kernels(g, beliefs, loop.edges, "binary")
    return _weight(g, beliefs, loop.edges, th, et)


def loop_weight_delta_basis(g: FactorGraph, beliefs: PseudoMarginals, loop) -> float:
    loop = _as_loop(g, loop)
    _require_gloop(loop)
    th, et = _kernels(g, beliefs, loop.edges, "delta_basis")
    return _weight(g, beliefs, loop.edges, th, et)


def subset_weight(g: FactorGraph, beliefs: PseudoMarginals, edges: Sequence[int], method: str = "delta_basis") -> float:
    """Holant term of an arbitrary edge subset (no degree precondition); vanishes unless it is a generalized loop."""
    edges = sorted(edges)
    th, et = _kernels(g, beliefs, edges, method)
    return _weight(g, beliefs, edges, th, et)


# --------------------------------------------------------------------------
# simple loops: trace of correlation matrices
# --------------------------------------------------------------------------


def _inv_sqrt(m: np.ndarray) -> np.ndarray:
    lam, v = np.linalg.eigh(m)
    if lam.min() <= 0:
        raise InputError("variance matrix is not positive definite")
    return (v / np.sqrt(lam)) @ v.T


def _pair_marginal(g: FactorGraph, beliefs: PseudoMarginals, a: int, i: int, j: int) -> np.ndarray:
    scope = g.scopes[a]
    si, sj = scope.index(i), scope.index(j)
    return np.einsum(beliefs.fac[a], list(range(len(scope))), [si, sj])


def _centered(stat: SufficientStatistic, b: np.ndarray) -> np.ndarray:
    return stat.t - (stat.t @ b)[:, None]


def correlation_matrix(
    pair: np.ndarray, bi: np.ndarray, bj: np.ndarray, si: SufficientStatistic, sj: SufficientStatistic
) -> np.ndarray:
    """``Var_i^{-1/2} Cov[t^i, t^j] Var_j^{-1/2}`` for a pairwise distribution with marginals ``bi``, ``bj``."""
    ci, cj = _centered(si, bi), _centered(sj, bj)
    cov = ci @ pair @ cj.T
    vi = (ci * bi) @ ci.T
    vj = (cj * bj) @ cj.T
    return _inv_sqrt(vi) @ cov @ _inv_sqrt(vj)


def simple_loop_weight_trace(g: FactorGraph, beliefs: PseudoMarginals, loop, stats: StatSpec | None = None) -> float:
    """``tr(prod_s Cor_{b_{a_s}}[t^{i_s}, t^{i_{s+1}}])`` around a simple loop."""
    loop = _as_loop(g, loop)
    if not loop.is_simple():
        raise InputError(f"edge set {list(loop.edges)} is not a simple loop")
    cyc = loop.cycle or _cycle_order(g, loop)
    _require_interior(beliefs, g, [n for kind, n in cyc if kind == "v"])
    vs = [n for kind, n in cyc if kind == "v"]
    fs = [n for kind, n in cyc if kind == "f"]
    prod = None
    for s, a in enumerate(fs):
        i, j = vs[s], vs[(s + 1) % len(vs)]
        si = _stat_for(stats, i, a, g.q)
        sj = _stat_for(stats, j, a, g.q)
        cor = correlation_matrix(_pair_marginal(g, beliefs, a, i, j), beliefs.var[i], beliefs.var[j], si, sj)
        prod = cor if prod is None else prod @ cor
    return float(np.trace(prod))


def _cycle_order(g: FactorGraph, loop: GeneralizedLoop) -> tuple[tuple[str, int], ...]:
    cyc = nx.find_cycle(loop._nx())
    return _canonical_cycle([u for u, _ in cyc])


# --------------------------------------------------------------------------
# series
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LedgerEntry:
    edges: tuple[int, ...]
    weight: float
    method: str
    cumulative_sum: float

    def to_dict(self, g: FactorGraph | None = None) -> dict:
        edges = [list(g.edge_id(e)) for e in self.edges] if g is not None else list(self.edges)
        return {"edges": edges, "weight": self.weight, "method": self.method, "cumulative_sum": self.cumulative_sum}


@dataclass(frozen=True)
class SeriesResult:
    z_estimate: float
    series_sum: float
    ledger: list[LedgerEntry]


def write_ledger(ledger: Sequence[LedgerEntry], fh: IO[str], g: FactorGraph | None = None) -> None:
    """JSON lines, one per loop."""
    for entry in ledger:
        fh.write(json.dumps(entry.to_dict(g), sort_keys=True) + "\n")


def _weigher(g: FactorGraph, beliefs: PseudoMarginals, method: str, stats) -> Callable[[GeneralizedLoop], float]:
    if method == "trace":
        return lambda lp: simple_loop_weight_trace(g, beliefs, lp, stats)
    if method == "binary":
        return lambda lp: loop_weight_binary(g, beliefs, lp)
    if method == "delta_basis":
        return lambda lp: loop_weight_delta_basis(g, beliefs, lp)
    return lambda lp: loop_weight(g, beliefs, lp, stats, method)


def full_loop_series(
    g: FactorGraph,
    result: BetheResult,
    method: str = "diagonal_fisher",
    stats: StatSpec | None = None,
    max_edges: int | None = None,
) -> SeriesResult:
    """``Z_Bethe (1 + sum over generalized loops of K)``; exact when ``max_edges`` is None."""
    weigh = _weigher(g, result.beliefs, method, stats)
    total = 1.0
    ledger = []
    for lp in enumerate_generalized_loops(g, max_edges):
        w = weigh(lp)
        total += w
        ledger.append(LedgerEntry(lp.edges, w, method, total))
    return SeriesResult(result.z_bethe * total, total, ledger)


@dataclass(frozen=True)
class TruncatedEstimates:
    z_bethe: float
    z_bethe_plus_loops: float
    z_bethe_times_loops: float
    ledger: list[LedgerEntry]


def truncated_series_estimates(
    g: FactorGraph, result: BetheResult, method: str = "trace", stats: StatSpec | None = None
) -> TruncatedEstimates:
    """Additive and multiplicative truncations of the series to simple loops."""
    beliefs = result.beliefs
    weigh = _weigher(g, beliefs, method, stats)
    total, log_prod = 1.0, 0.0
    ledger = []
    for lp in enumerate_simple_loops(g):
        w = weigh(lp)
        total += w
        log_prod += np.log1p(w)
        ledger.append(LedgerEntry(lp.edges, w, method, total))
    zb = result.z_bethe
    return TruncatedEstimates(zb, zb * total, zb * float(np.exp(log_prod)), ledger)


# --------------------------------------------------------------------------
# marginals
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class MarginalScope:
    """``C`` as sorted variable positions, ``F_C`` and the excluded edges ``E(F_C)``."""

    C: tuple[int, ...]
    F_C: frozenset[int]
    E_FC: frozenset[int]

    @classmethod
    def of(cls, g: FactorGraph, C: Sequence[int]) -> MarginalScope:
        cset = sorted(set(int(i) for i in C))
        if not cset or any(not 0 <= i < g.n_vars for i in cset):
            raise InputError("C must be a nonempty set of variable positions")
        fc = frozenset(a for a, scope in enumerate(g.scopes) if set(scope) <= set(cset))
        efc = frozenset(e for e, (_, a) in enumerate(g.edges) if a in fc)
        return cls(tuple(cset), fc, efc)

    def allowed(self, g: FactorGraph) -> list[int]:
        return [e for e in range(g.n_edges) if e not in self.E_FC]


def b_C_table(g: FactorGraph, beliefs: PseudoMarginals, scope: MarginalScope) -> np.ndarray:
    """Un-normalized ``prod_{i in C} b_i prod_{a in F_C} b_a / prod b_i`` as a dense tensor over ``x_C``."""
    pos = {i: k for k, i in enumerate(scope.C)}
    n = len(scope.C)
    table = functools.reduce(np.multiply.outer, [beliefs.var[i] for i in scope.C]) if n > 1 else beliefs.var[scope.C[0]].copy()
    for a in sorted(scope.F_C):
        sc = g.scopes[a]
        denom = functools.reduce(np.multiply.outer, [beliefs.var[i] for i in sc])
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(beliefs.fac[a] > 0, beliefs.fac[a] / denom, 0.0)
        table = np.einsum(table, list(range(n)), ratio, [pos[i] for i in sc], list(range(n)))
    return table


def _g_table(g: FactorGraph, gval, n: int) -> np.ndarray:
    if callable(gval):
        arr = np.empty((g.q,) * n)
        for x in itertools.product(range(g.q), repeat=n):
            arr[x] = gval(*x)
        return arr
    arr = np.asarray(gval, dtype=float)
    if arr.shape != (g.q,) * n:
        raise InputError(f"g table must have shape {(g.q,) * n}, got {arr.shape}")
    return arr


def marginal_loop_weight(
    g: FactorGraph,
    beliefs: PseudoMarginals,
    C: Sequence[int],
    gval,
    loop_edges: Sequence[int],
    stats: StatSpec | None = None,
    method: str | None = None,
) -> float:
    """``K^g(E')`` for ``E' ⊆ E \\ E(F_C)``; ``gval`` is a table over ``x_C`` (axes in sorted ``C`` order) or a callable."""
    scope = MarginalScope.of(g, C)
    edges = sorted(int(e) for e in loop_edges)
    bad = [e for e in edges if e in scope.E_FC]
    if bad:
        raise InputError(f"loop edges {[g.edge_id(e) for e in bad]} lie in E(F_C)")
    if method is None:
        method = "diagonal_fisher" if stats is None else "theorem1"
    th, et = _kernels(g, beliefs, edges, method, stats)
    gb = _g_table(g, gval, len(scope.C)) * b_C_table(g, beliefs, scope)
    return _weight(g, beliefs, edges, th, et, (gb, scope.C), scope.F_C)


def marginal_edge_sets(g: FactorGraph, C: Sequence[int], max_edges: int | None = None) -> list[tuple[int, ...]]:
    """Subsets of ``E \\ E(F_C)`` with no degree-1 node outside ``C`` and ``F_C`` (empty set first)."""
    scope = MarginalScope.of(g, C)
    allowed = scope.allowed(g)
    _check_budget(len(allowed), max_edges)
    return _enumerate_subsets(g, allowed, frozenset(scope.C), scope.F_C, max_edges)


@dataclass(frozen=True)
class MarginalCorrection:
    estimate: float
    bethe_estimate: float
    numerator: float
    denominator: float
    n_terms: int


def marginal_correction(
    g: FactorGraph,
    result: BetheResult,
    C: Sequence[int],
    gval,
    max_edges: int | None = None,
    stats: StatSpec | None = None,
) -> MarginalCorrection:
    """``<g>_p ≈ sum K^g / sum K^1`` over the admissible edge sets (exhaustive when ``max_edges`` is None)."""
    scope = MarginalScope.of(g, C)
    gt = _g_table(g, gval, len(scope.C))
    ones = np.ones_like(gt)
    num = den = 0.0
    sets = marginal_edge_sets(g, C, max_edges)
    for s in sets:
        num += marginal_loop_weight(g, result.beliefs, C, gt, s, stats)
        den += marginal_loop_weight(g, result.beliefs, C, ones, s, stats)
    bethe = float((gt * b_C_table(g, result.beliefs, scope)).sum())
    return MarginalCorrection(num / den, bethe, num, den, len(sets))


# --------------------------------------------------------------------------
# trees
# --------------------------------------------------------------------------


def tree_correlation_decompose(
    g: FactorGraph, beliefs: PseudoMarginals, i: int, j: int, stats: StatSpec | None = None
) -> np.ndarray:
    """Correlation matrix of ``t^i`` and ``t^j`` as a product of per-factor correlations along the tree path."""
    if not g.is_forest():
        raise NotATreeError("tree_correlation_decompose needs a cycle-free factor graph")
    if i == j:
        raise InputError("i and j must differ")
    try:
        path = nx.shortest_path(_incidence_graph(g), ("v", i), ("v", j))
    except nx.NetworkXNoPath:
        raise InputError(f"variables {i} and {j} are in different components") from None
    out = None
    for s in range(0, len(path) - 2, 2):
        u, a, v = path[s][1], path[s + 1][1], path[s + 2][1]
        cor = correlation_matrix(
            _pair_marginal(g, beliefs, a, u, v),
            beliefs.var[u],
            beliefs.var[v],
            _stat_for(stats, u, a, g.q),
            _stat_for(stats, v, a, g.q),
        )
        out = cor if out is None else out @ cor
    return out
