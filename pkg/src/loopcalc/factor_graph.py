"""Discrete factor graphs and the exact oracles used to check every approximation.

A :class:`FactorGraph` carries a common alphabet ``{0, ..., q-1}``, positive
per-variable weights ``h_i`` and nonnegative factor tables ``f_a`` stored
sparsely over their supports.  Internally variables, factors and edges are
addressed by position (``0..N-1``, ``0..M-1``, ``0..|E|-1``); the user-facing
ids are kept for I/O and error messages.
"""

from __future__ import annotations

import functools
import hashlib
import itertools
import json
import math
from collections.abc import Hashable, Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .errors import BudgetError, DegenerateError, InputError, NotATreeError, PolytopeError

DEFAULT_STATE_BUDGET = 10**8
DEFAULT_TABLE_BUDGET = 10**7


@dataclass(frozen=True)
class VariableNode:
    id: Hashable
    h: tuple[float, ...]


@dataclass(frozen=True)
class FactorNode:
    """A factor over ``neighbors``; assignments missing from ``entries`` are zero."""

    id: Hashable
    neighbors: tuple[Hashable, ...]
    entries: Mapping[tuple[int, ...], float] = field(hash=False)

    @property
    def degree(self) -> int:
        return len(self.neighbors)


class FactorGraph:
    """Immutable bipartite variable/factor model over a common alphabet.

    Construction only rejects input that cannot be interpreted at all (unknown
    variable ids, wrong arity, symbols outside the alphabet, negative weights).
    The modelling assumptions (``d_a >= 2``, ``h > 0``, support coverage, no
    duplicate edges) are reported by :meth:`validate` instead, so that broken
    models can still be loaded and diagnosed.
    """

    def __init__(self, q: int, variables: Sequence[VariableNode], factors: Sequence[FactorNode]):
        if int(q) != q or q < 1:
            raise InputError(f"alphabet size q must be a positive integer, got {q!r}")
        self.q = int(q)
        self.variables = tuple(variables)
        self.factors = tuple(factors)

        self.var_index: dict[Hashable, int] = {}
        for k, v in enumerate(self.variables):
            if v.id in self.var_index:
                raise InputError(f"duplicate variable id {v.id!r}")
            if len(v.h) != self.q:
                raise InputError(f"variable {v.id}: h has length {len(v.h)}, expected q={self.q}")
            self.var_index[v.id] = k
        self.factor_index: dict[Hashable, int] = {}
        for k, f in enumerate(self.factors):
            if f.id in self.factor_index:
                raise InputError(f"duplicate factor id {f.id!r}")
            self.factor_index[f.id] = k

        h = np.array([v.h for v in self.variables], dtype=float).reshape(len(self.variables), self.q)
        h.setflags(write=False)
        self.h = h

        scopes = []
        tables = []
        for f in self.factors:
            try:
                scope = tuple(self.var_index[v] for v in f.neighbors)
            except KeyError as exc:
                raise InputError(f"factor {f.id}: unknown variable {exc.args[0]!r}") from None
            table = np.zeros((self.q,) * len(scope))
            for x, val in f.entries.items():
                if len(x) != len(scope):
                    raise InputError(f"factor {f.id}: assignment {x} has arity {len(x)}, expected {len(scope)}")
                if any(not 0 <= s < self.q for s in x):
                    raise InputError(f"factor {f.id}: assignment {x} has symbols outside 0..{self.q - 1}")
                if not val >= 0 or not math.isfinite(val):
                    raise InputError(f"factor {f.id}: weight {val} at {x} is not a finite nonnegative number")
                table[tuple(x)] = val
            table.setflags(write=False)
            scopes.append(scope)
            tables.append(table)
        self.scopes: tuple[tuple[int, ...], ...] = tuple(scopes)
        self.tables: tuple[np.ndarray, ...] = tuple(tables)

        # edge e = (variable position, factor position), ordered by factor then scope slot
        self.edges: tuple[tuple[int, int], ...] = tuple(
            (i, a) for a, scope in enumerate(self.scopes) for i in scope
        )
        var_edges: list[list[int]] = [[] for _ in self.variables]
        fac_edges: list[list[int]] = [[] for _ in self.factors]
        for e, (i, a) in enumerate(self.edges):
            var_edges[i].append(e)
            fac_edges[a].append(e)
        self.var_edges = tuple(tuple(es) for es in var_edges)
        self.fac_edges = tuple(tuple(es) for es in fac_edges)

    # ----------------------------------------------------------------- basics
    @property
    def n_vars(self) -> int:
        return len(self.variables)

    @property
    def n_factors(self) -> int:
        return len(self.factors)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def var_degree(self, i: int) -> int:
        return len(self.var_edges[i])

    def factor_degree(self, a: int) -> int:
        return len(self.scopes[a])

    def edge_id(self, e: int) -> tuple[Hashable, Hashable]:
        i, a = self.edges[e]
        return (self.variables[i].id, self.factors[a].id)

    def slot(self, e: int) -> int:
        """Axis of the factor table that edge ``e`` attaches to."""
        i, a = self.edges[e]
        return self.fac_edges[a].index(e)

    def max_weight(self) -> float:
        m = float(self.h.max()) if self.n_vars else 0.0
        for t in self.tables:
            if t.size:
                m = max(m, float(t.max()))
        return m

    def use_log_domain(self) -> bool:
        return self.max_weight() > 1e3 or self.n_factors > 20

    # ------------------------------------------------------------- validation
    def validate(self) -> list[str]:
        """Return human-readable invariant violations; empty when the model is well formed."""
        problems = []
        if self.q < 2:
            problems.append(f"alphabet: q={self.q} < 2")
        for i, v in enumerate(self.variables):
            bad = [x for x in range(self.q) if not self.h[i, x] > 0]
            if bad:
                problems.append(f"variable {v.id}: h not strictly positive at {bad}")
        seen = set()
        for a, f in enumerate(self.factors):
            if f.degree < 2:
                problems.append(f"factor {f.id}: d_a={f.degree} < 2")
            for v in f.neighbors:
                if (v, f.id) in seen:
                    problems.append(f"edge ({v}, {f.id}): duplicate edge")
                seen.add((v, f.id))
            table = self.tables[a]
            for slot, v in enumerate(f.neighbors):
                other = tuple(k for k in range(table.ndim) if k != slot)
                covered = table.sum(axis=other) > 0 if other else table > 0
                missing = [z for z in range(self.q) if not covered[z]]
                if missing:
                    problems.append(
                        f"edge ({v}, {f.id}): support S_a has no assignment with x_{v} in {missing}"
                    )
        return problems

    def require_valid(self) -> None:
        problems = self.validate()
        if problems:
            raise InputError("invalid factor graph: " + "; ".join(problems))

    # -------------------------------------------------------------- structure
    def is_forest(self) -> bool:
        """True when the bipartite incidence graph has no cycle."""
        parent = list(range(self.n_vars + self.n_factors))

        def find(u):
            while parent[u] != u:
                parent[u] = parent[parent[u]]
                u = parent[u]
            return u

        for i, a in self.edges:
            ri, ra = find(i), find(self.n_vars + a)
            if ri == ra:
                return False
            parent[ri] = ra
        return True

    def interaction_neighbors(self) -> list[set[int]]:
        nbrs: list[set[int]] = [set() for _ in range(self.n_vars)]
        for scope in self.scopes:
            for u in scope:
                nbrs[u].update(v for v in scope if v != u)
        return nbrs

    # --------------------------------------------------------------- factory
    @classmethod
    def from_arrays(
        cls,
        h: np.ndarray | Sequence[Sequence[float]],
        factors: Iterable[tuple[Sequence[int], np.ndarray]],
    ) -> FactorGraph:
        """Build a graph with integer ids from dense arrays.

        ``h`` has shape ``(N, q)``; each factor is ``(scope, table)`` with
        ``table.shape == (q,) * len(scope)``.
        """
        h = np.asarray(h, dtype=float)
        n, q = h.shape
        variables = [VariableNode(i, tuple(float(v) for v in h[i])) for i in range(n)]
        fnodes = []
        for a, (scope, table) in enumerate(factors):
            table = np.asarray(table, dtype=float)
            entries = {
                tuple(int(s) for s in x): float(table[x])
                for x in itertools.product(range(q), repeat=len(scope))
                if table[x] != 0
            }
            fnodes.append(FactorNode(a, tuple(int(s) for s in scope), entries))
        return cls(q, variables, fnodes)

    @classmethod
    def from_dict(cls, doc: Mapping) -> FactorGraph:
        try:
            q = doc["q"]
            variables = [VariableNode(v["id"], tuple(float(x) for x in v["h"])) for v in doc["variables"]]
            factors = []
            for f in doc.get("factors", []):
                entries: dict[tuple[int, ...], float] = {}
                for ent in f["entries"]:
                    x = tuple(int(s) for s in ent["x"])
                    if x in entries:
                        raise InputError(f"factor {f['id']}: assignment {list(x)} listed twice")
                    val = float(ent["f"])
                    if val != 0:
                        entries[x] = val
                factors.append(FactorNode(f["id"], tuple(f["neighbors"]), entries))
        except (KeyError, TypeError) as exc:
            raise InputError(f"malformed model document: missing or invalid field {exc}") from None
        if not isinstance(q, int):
            raise InputError(f"q must be an integer, got {q!r}")
        return cls(q, variables, factors)

    def to_dict(self) -> dict:
        return {
            "q": self.q,
            "variables": [{"id": v.id, "h": list(v.h)} for v in self.variables],
            "factors": [
                {
                    "id": f.id,
                    "neighbors": list(f.neighbors),
                    "entries": [{"x": list(x), "f": val} for x, val in sorted(f.entries.items())],
                }
                for f in self.factors
            ],
        }

    @classmethod
    def load(cls, path: str | Path) -> FactorGraph:
        text = Path(path).read_text()
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}: JSON parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
        return cls.from_dict(doc)

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    def digest(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()

    def __repr__(self) -> str:
        return f"FactorGraph(q={self.q}, N={self.n_vars}, M={self.n_factors}, |E|={self.n_edges})"


# --------------------------------------------------------------------------
# pseudo-marginals
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PseudoMarginals:
    """Beliefs ``b_i`` (array ``(N, q)``) and dense factor beliefs ``b_a`` (zero outside ``S_a``)."""

    var: np.ndarray
    fac: tuple[np.ndarray, ...]

    def consistency_violation(self, g: FactorGraph) -> tuple[float, str]:
        """Largest local-constraint violation and a description of where it occurs."""
        worst, where = 0.0, ""
        for i, b in enumerate(self.var):
            dev = abs(b.sum() - 1.0)
            if dev > worst:
                worst, where = dev, f"b_{g.variables[i].id} sums to {b.sum():.12g}"
        for a, ba in enumerate(self.fac):
            dev = abs(ba.sum() - 1.0)
            if dev > worst:
                worst, where = dev, f"b_{g.factors[a].id} sums to {ba.sum():.12g}"
            outside = np.abs(ba[g.tables[a] == 0]).max(initial=0.0)
            if outside > worst:
                worst, where = outside, f"b_{g.factors[a].id} has mass outside S_a"
            for slot, i in enumerate(g.scopes[a]):
                marg = ba.sum(axis=tuple(k for k in range(ba.ndim) if k != slot))
                dev = float(np.abs(marg - self.var[i]).max())
                if dev > worst:
                    worst = dev
                    where = (
                        f"sum of b_{g.factors[a].id} over the other variables differs from "
                        f"b_{g.variables[i].id} by {dev:.3g}"
                    )
        neg = min([float(self.var.min(initial=0.0))] + [float(ba.min(initial=0.0)) for ba in self.fac])
        if -neg > worst:
            worst, where = -neg, "negative belief entry"
        return worst, where

    def check(self, g: FactorGraph, tol: float = 1e-9) -> None:
        worst, where = self.consistency_violation(g)
        if worst > tol:
            raise PolytopeError(f"beliefs outside the local marginal polytope (tol {tol:g}): {where}")

    def min_interior_mass(self, g: FactorGraph) -> float:
        m = float(self.var.min())
        for a, ba in enumerate(self.fac):
            sup = g.tables[a] > 0
            if sup.any():
                m = min(m, float(ba[sup].min()))
        return m

    def to_dict(self, g: FactorGraph) -> dict:
        return {
            "variables": {str(v.id): [float(x) for x in self.var[i]] for i, v in enumerate(g.variables)},
            "factors": {
                str(f.id): [
                    {"x": list(x), "b": float(self.fac[a][x])} for x in sorted(f.entries)
                ]
                for a, f in enumerate(g.factors)
            },
        }


# --------------------------------------------------------------------------
# brute force
# --------------------------------------------------------------------------


def _check_state_budget(g: FactorGraph, budget: float) -> int:
    n_states = g.q**g.n_vars
    if n_states > budget:
        raise BudgetError(
            f"q^N = {g.q}^{g.n_vars} = {n_states:.3g} states exceeds the enumeration budget {budget:.3g}; "
            "use variable elimination instead"
        )
    return n_states


def _decode(start: int, stop: int, n: int, q: int) -> np.ndarray:
    """Assignments with flat indices in ``[start, stop)``; variable 0 is the most significant digit."""
    idx = np.arange(start, stop, dtype=np.int64)
    # column-major so that each variable's column is contiguous
    x = np.empty((stop - start, n), dtype=np.int64, order="F")
    for k in range(n - 1, -1, -1):
        x[:, k] = idx % q
        idx //= q
    return x


def _flat_index(x: np.ndarray, scope: Sequence[int], q: int) -> np.ndarray:
    idx = x[:, scope[0]].copy()
    for k in scope[1:]:
        idx *= q
        idx += x[:, k]
    return idx


def _chunk_weights(g: FactorGraph, x: np.ndarray, log: bool) -> np.ndarray:
    with np.errstate(divide="ignore"):
        hs = [np.log(h) if log else h for h in g.h]
        tables = [(np.log(t) if log else t).ravel() for t in g.tables]
    w = np.zeros(len(x)) if log else np.ones(len(x))
    acc = np.add if log else np.multiply
    for i in range(g.n_vars):
        acc(w, np.take(hs[i], x[:, i]), out=w)
    for scope, table in zip(g.scopes, tables):
        acc(w, np.take(table, _flat_index(x, scope, g.q)), out=w)
    return w


def _brute_force(g: FactorGraph, budget: float, chunk: int) -> tuple[float, bool]:
    """Exhaustive sum; returns ``(value, is_log)``."""
    n_states = _check_state_budget(g, budget)
    log = g.use_log_domain()
    parts = []
    for start in range(0, n_states, chunk):
        x = _decode(start, min(start + chunk, n_states), g.n_vars, g.q)
        w = _chunk_weights(g, x, log)
        parts.append(float(logsumexp(w)) if log else math.fsum(w))
    if log:
        return float(logsumexp(parts)), True
    return math.fsum(parts), False


def brute_force_log_partition(
    g: FactorGraph, budget: float = DEFAULT_STATE_BUDGET, chunk: int = 1 << 20
) -> float:
    """``log Z(G)`` by exhaustive enumeration of all ``q^N`` assignments."""
    value, is_log = _brute_force(g, budget, chunk)
    if is_log:
        return value
    return math.log(value) if value > 0 else -math.inf


def brute_force_partition(g: FactorGraph, budget: float = DEFAULT_STATE_BUDGET, chunk: int = 1 << 20) -> float:
    """``Z(G) = sum_x prod_a f_a prod_i h_i`` by exhaustive enumeration."""
    value, is_log = _brute_force(g, budget, chunk)
    return math.exp(value) if is_log else value


def joint_table(g: FactorGraph, budget: float = DEFAULT_TABLE_BUDGET) -> np.ndarray:
    """Unnormalized joint as a dense array of shape ``(q,) * N``. Small models only."""
    n_states = _check_state_budget(g, budget)
    x = _decode(0, n_states, g.n_vars, g.q)
    return _chunk_weights(g, x, log=False).reshape((g.q,) * g.n_vars)


# --------------------------------------------------------------------------
# variable elimination
# --------------------------------------------------------------------------


def min_fill_order(g: FactorGraph, keep: Iterable[int] = ()) -> list[int]:
    """Greedy min-fill elimination order (ties: fewer neighbours, then lower index)."""
    keep = set(keep)
    nbrs = g.interaction_neighbors()
    remaining = [v for v in range(g.n_vars) if v not in keep]
    order = []
    while remaining:
        best, best_key = None, None
        for v in remaining:
            ns = list(nbrs[v])
            fill = sum(1 for s, t in itertools.combinations(ns, 2) if t not in nbrs[s])
            key = (fill, len(ns), v)
            if best_key is None or key < best_key:
                best, best_key = v, key
        for s, t in itertools.combinations(list(nbrs[best]), 2):
            nbrs[s].add(t)
            nbrs[t].add(s)
        for u in nbrs[best]:
            nbrs[u].discard(best)
        nbrs[best] = set()
        remaining.remove(best)
        order.append(best)
    return order


def _multiply(factors: list[tuple[tuple[int, ...], np.ndarray]], out: tuple[int, ...]) -> np.ndarray:
    labels = {v: k for k, v in enumerate(sorted({v for s, _ in factors for v in s} | set(out)))}
    args: list = []
    for scope, table in factors:
        args += [table, [labels[v] for v in scope]]
    args.append([labels[v] for v in out])
    return np.einsum(*args, optimize=len(factors) > 2)


def _eliminate(
    g: FactorGraph, order: Sequence[int], keep: tuple[int, ...], table_budget: float
) -> tuple[float, np.ndarray]:
    """Sum out every variable in ``order``; return ``(log scale, table over keep)``."""
    factors: list[tuple[tuple[int, ...], np.ndarray]] = [((i,), np.asarray(g.h[i])) for i in range(g.n_vars)]
    factors += list(zip(g.scopes, g.tables))
    log_scale = 0.0
    for v in order:
        bucket = [f for f in factors if v in f[0]]
        if not bucket:
            continue
        factors = [f for f in factors if v not in f[0]]
        scope = tuple(sorted({u for s, _ in bucket for u in s}))
        if g.q ** len(scope) > table_budget:
            raise BudgetError(
                f"eliminating variable {g.variables[v].id} builds a clique of {len(scope)} variables "
                f"(q^{len(scope)} = {g.q ** len(scope):.3g} entries) over the memory budget {table_budget:.3g}"
            )
        out = tuple(u for u in scope if u != v)
        msg = _multiply(bucket, out)
        peak = float(np.max(msg)) if msg.size else 0.0
        if peak <= 0:
            raise DegenerateError(f"partition function is zero (eliminating {g.variables[v].id})")
        log_scale += math.log(peak)
        factors.append((out, msg / peak))
    table = _multiply(factors, keep) if factors else np.ones(())
    return log_scale, table


@dataclass(frozen=True)
class VEResult:
    log_z: float
    marginals: np.ndarray | None
    scope_marginals: dict[tuple[int, ...], np.ndarray]

    @property
    def z(self) -> float:
        return math.exp(self.log_z)


def exact_inference_ve(
    g: FactorGraph,
    elimination_order: Sequence[int] | None = None,
    scopes: Iterable[Sequence[int]] = (),
    marginals: bool = True,
    table_budget: float = DEFAULT_TABLE_BUDGET,
) -> VEResult:
    """Exact ``log Z``, single-variable marginals and marginals over requested scopes.

    ``elimination_order`` must be a permutation of ``range(N)``; by default a
    min-fill order is used.  Every query reruns the elimination with the
    queried variables kept, which is fine at the sizes this package targets.
    """
    if elimination_order is not None:
        order = [int(v) for v in elimination_order]
        if sorted(order) != list(range(g.n_vars)):
            raise InputError("elimination order must be a permutation of the variable positions")
    else:
        order = min_fill_order(g)
    log_scale, table = _eliminate(g, order, (), table_budget)
    total = float(table)
    if total <= 0:
        raise DegenerateError("partition function is zero")
    log_z = log_scale + math.log(total)

    def query(keep: tuple[int, ...]) -> np.ndarray:
        sub = [v for v in order if v not in keep]
        _, t = _eliminate(g, sub, keep, table_budget)
        return t / t.sum()

    margs = None
    if marginals:
        margs = np.array([query((i,)) for i in range(g.n_vars)]).reshape(g.n_vars, g.q)
    scope_margs = {tuple(s): query(tuple(s)) for s in scopes}
    return VEResult(log_z, margs, scope_margs)


def exact_pseudo_marginals(g: FactorGraph, **kw) -> PseudoMarginals:
    """Exact variable and factor marginals packaged as pseudo-marginals."""
    res = exact_inference_ve(g, scopes=g.scopes, **kw)
    return PseudoMarginals(res.marginals, tuple(res.scope_marginals[s] for s in g.scopes))


# --------------------------------------------------------------------------
# tree reconstruction
# --------------------------------------------------------------------------


class TreeJoint:
    """Evaluator of ``p'(x) = prod_a [b_a / prod_{i in a} b_i] prod_i b_i``."""

    def __init__(self, g: FactorGraph, beliefs: PseudoMarginals):
        self.g = g
        self.beliefs = beliefs
        with np.errstate(divide="ignore", invalid="ignore"):
            self._ratios = []
            for a, scope in enumerate(g.scopes):
                denom = functools.reduce(np.multiply.outer, [beliefs.var[i] for i in scope])
                self._ratios.append(np.where(beliefs.fac[a] > 0, beliefs.fac[a] / denom, 0.0))

    def __call__(self, x: Sequence[int] | np.ndarray) -> np.ndarray | float:
        x = np.asarray(x, dtype=np.int64)
        single = x.ndim == 1
        x = np.atleast_2d(x)
        p = np.ones(len(x))
        for i in range(self.g.n_vars):
            p *= self.beliefs.var[i][x[:, i]]
        for scope, r in zip(self.g.scopes, self._ratios):
            p *= r[tuple(x[:, k] for k in scope)]
        return float(p[0]) if single else p

    def table(self, budget: float = DEFAULT_TABLE_BUDGET) -> np.ndarray:
        n_states = _check_state_budget(self.g, budget)
        return self(_decode(0, n_states, self.g.n_vars, self.g.q)).reshape((self.g.q,) * self.g.n_vars)


def tree_joint_from_marginals(g: FactorGraph, beliefs: PseudoMarginals, tol: float = 1e-9) -> TreeJoint:
    """Global distribution consistent with locally consistent beliefs on a cycle-free graph."""
    if not g.is_forest():
        raise NotATreeError("tree_joint_from_marginals needs a cycle-free factor graph")
    beliefs.check(g, tol)
    for a, ba in enumerate(beliefs.fac):
        if np.any(ba[g.tables[a] > 0] <= 0):
            raise PolytopeError(f"b_{g.factors[a].id} is not strictly positive on S_a")
    return TreeJoint(g, beliefs)
