"""Weighted graph q-coloring on regular graphs: symmetric BP fixed point and loop-corrected partition functions.

The model is ``Z = sum_x prod_i w^{[x_i = 0]} prod_{(i,j)} [x_i != x_j]``.
On a ``k``-regular graph the symmetric ansatz gives every message the same
form: a variable-to-factor message puts mass ``eta_vf`` on color 0 and
spreads the rest evenly, and a factor-to-variable message puts ``eta_fv``
on color 0.  With ``eta(th) = e^th / (q - 1 + e^th)`` and its inverse
``theta(eta) = log((q - 1) eta / (1 - eta))``::

    theta_vf = log w + (k - 1) theta(eta_fv)
    eta_fv   = (1 - eta(theta_vf)) / (q - 1)
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Literal

import numpy as np

from .bp import BetheResult, MessageSet, bethe_result_from_messages, check_stationarity
from .errors import ConvergenceError, InputError
from .factor_graph import FactorGraph, brute_force_partition, exact_inference_ve
from .loops import truncated_series_estimates

FIG6_RESOURCE = "fig6.edges"


@dataclass(frozen=True)
class ColoringModel:
    edges: tuple[tuple[int, int], ...]
    q: int
    w: float
    n_nodes: int | None = None

    def __post_init__(self):
        edges = tuple((int(u), int(v)) for u, v in self.edges)
        if self.q < 2:
            raise InputError("q must be at least 2")
        if not self.w > 0:
            raise InputError("w must be positive")
        seen = set()
        for u, v in edges:
            if u == v:
                raise InputError(f"self-loop at node {u}")
            if u < 0 or v < 0:
                raise InputError("node ids must be nonnegative")
            key = (min(u, v), max(u, v))
            if key in seen:
                raise InputError(f"duplicate edge {key}")
            seen.add(key)
        n = max((max(e) for e in edges), default=-1) + 1
        if self.n_nodes is not None and self.n_nodes < n:
            raise InputError(f"n_nodes = {self.n_nodes} but edges mention node {n - 1}")
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "n_nodes", n if self.n_nodes is None else self.n_nodes)

    def degrees(self) -> list[int]:
        deg = [0] * self.n_nodes
        for u, v in self.edges:
            deg[u] += 1
            deg[v] += 1
        return deg

    def regular_degree(self) -> int:
        degs = set(self.degrees())
        if len(degs) != 1:
            raise InputError(f"graph is not regular (degrees {sorted(degs)})")
        return degs.pop()


def parse_edge_list(text: str, source: str = "<edges>") -> list[tuple[int, int]]:
    """``u v`` per line, 0-indexed; blank lines and ``#`` comments ignored."""
    edges = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            if len(parts) != 2:
                raise ValueError
            edges.append((int(parts[0]), int(parts[1])))
        except ValueError:
            raise InputError(f"{source}: line {lineno}: expected two integers, got {line!r}") from None
    return edges


def load_edge_list(path: str | Path) -> list[tuple[int, int]]:
    return parse_edge_list(Path(path).read_text(), str(path))


def fig6_edges() -> list[tuple[int, int]]:
    """The bundled 16-node 3-regular graph."""
    text = resources.files("loopcalc").joinpath("data", FIG6_RESOURCE).read_text()
    return parse_edge_list(text, FIG6_RESOURCE)


def build_coloring_factor_graph(model: ColoringModel) -> FactorGraph:
    q = model.q
    h = np.ones((model.n_nodes, q))
    h[:, 0] = model.w
    table = 1.0 - np.eye(q)
    g = FactorGraph.from_arrays(h, [((u, v), table) for u, v in model.edges])
    g.require_valid()
    return g


# --------------------------------------------------------------------------
# symmetric fixed point
# --------------------------------------------------------------------------


def eta_of_theta(theta: float, q: int) -> float:
    # stable for large |theta|
    if theta > 0:
        return 1.0 / (1.0 + (q - 1) * math.exp(-theta))
    e = math.exp(theta)
    return e / (q - 1 + e)


def theta_of_eta(eta: float, q: int) -> float:
    return math.log((q - 1) * eta) - math.log1p(-eta)


@dataclass(frozen=True)
class SymmetricFixedPoint:
    q: int
    k: int
    w: float
    theta_v2f: float
    eta_f2v: float
    residual: float
    method: str
    iterations: int

    @property
    def eta_v2f(self) -> float:
        return eta_of_theta(self.theta_v2f, self.q)

    def to_dict(self) -> dict:
        return {
            "theta_v2f": self.theta_v2f,
            "eta_v2f": self.eta_v2f,
            "eta_f2v": self.eta_f2v,
            "residual": self.residual,
            "method": self.method,
            "iterations": self.iterations,
        }


def _forward(eta_vf: float, q: int, k: int, w: float) -> float:
    """One round trip ``eta_vf -> eta_fv -> eta_vf``."""
    eta_fv = (1 - eta_vf) / (q - 1)
    return eta_of_theta(math.log(w) + (k - 1) * theta_of_eta(eta_fv, q), q)


def _backward(eta_vf: float, q: int, k: int, w: float) -> float:
    """Inverse of :func:`_forward`."""
    eta_fv = eta_of_theta((theta_of_eta(eta_vf, q) - math.log(w)) / (k - 1), q)
    return 1 - (q - 1) * eta_fv


def _residual(theta_vf: float, eta_fv: float, q: int, k: int, w: float) -> float:
    r1 = abs(theta_vf - math.log(w) - (k - 1) * theta_of_eta(eta_fv, q))
    r2 = abs(eta_fv - (1 - eta_of_theta(theta_vf, q)) / (q - 1))
    return max(r1, r2)


def _residual_at(eta_vf: float, q: int, k: int, w: float) -> float:
    eta_fv = (1 - eta_vf) / (q - 1)
    return _residual(math.log(w) + (k - 1) * theta_of_eta(eta_fv, q), eta_fv, q, k, w)


def symmetric_fixed_point(
    q: int,
    k: int,
    w: float,
    method: Literal["bisection", "backward", "forward"] = "bisection",
    tol: float = 1e-12,
    max_iterations: int = 10_000,
) -> SymmetricFixedPoint:
    """Solve the scalar fixed-point system.

    ``bisection`` brackets ``eta_vf`` in ``[1e-12, 1 - 1e-12]`` for 200 steps;
    the round-trip map is decreasing so the root is unique.  ``backward``
    iterates the inverse map, ``forward`` the map itself; the latter raises
    :class:`ConvergenceError` when it fails to settle (it oscillates once the
    fixed point is unstable).
    """
    if q < 2 or k < 2 or not w > 0:
        raise InputError("need q >= 2, k >= 2 and w > 0")
    if method == "bisection":
        lo, hi = 1e-12, 1 - 1e-12
        f_lo = _forward(lo, q, k, w) - lo
        f_hi = _forward(hi, q, k, w) - hi
        if f_lo * f_hi > 0:
            raise ConvergenceError(f"no sign change on the bracket: f(lo) = {f_lo:.3g}, f(hi) = {f_hi:.3g}")
        its = 0
        for its in range(1, 201):
            mid = 0.5 * (lo + hi)
            f_mid = _forward(mid, q, k, w) - mid
            if f_mid == 0:
                lo = hi = mid
                break
            if (f_mid > 0) == (f_lo > 0):
                lo, f_lo = mid, f_mid
            else:
                hi = mid
            if hi - lo <= 4 * np.finfo(float).eps * hi:
                break
        eta_vf = 0.5 * (lo + hi)
    elif method in ("backward", "forward"):
        step = _backward if method == "backward" else _forward
        eta_vf, its = 1.0 / q, 0
        for its in range(1, max_iterations + 1):
            try:
                new = step(eta_vf, q, k, w)
            except (ValueError, OverflowError):
                raise ConvergenceError(f"{method} substitution left the domain after {its} steps") from None
            if not 0 < new < 1:
                raise ConvergenceError(f"{method} substitution left (0, 1) after {its} steps")
            # rounding can leave a few-ulp two-cycle, so also stop on the residual
            done = abs(new - eta_vf) <= tol * 1e-3 or _residual_at(new, q, k, w) <= tol * 1e-2
            eta_vf = new
            if done:
                break
        else:
            raise ConvergenceError(f"{method} substitution did not converge in {max_iterations} steps")
    else:
        raise InputError(f"unknown method {method!r}")
    eta_fv = (1 - eta_vf) / (q - 1)
    theta_vf = math.log(w) + (k - 1) * theta_of_eta(eta_fv, q)
    res = _residual(theta_vf, eta_fv, q, k, w)
    if res > tol:
        raise ConvergenceError(f"fixed-point residual {res:.3g} exceeds {tol:g}")
    return SymmetricFixedPoint(q, k, w, theta_vf, eta_fv, res, method, its)


def symmetric_messages(g: FactorGraph, fp: SymmetricFixedPoint) -> MessageSet:
    q = g.q
    vf = np.full((g.n_edges, q), (1 - fp.eta_v2f) / (q - 1))
    vf[:, 0] = fp.eta_v2f
    fv = np.full((g.n_edges, q), (1 - fp.eta_f2v) / (q - 1))
    fv[:, 0] = fp.eta_f2v
    return MessageSet(vf, fv)


def symmetric_bethe(model: ColoringModel, fp: SymmetricFixedPoint | None = None) -> tuple[FactorGraph, BetheResult]:
    k = model.regular_degree()
    if fp is None:
        fp = symmetric_fixed_point(model.q, k, model.w)
    g = build_coloring_factor_graph(model)
    return g, bethe_result_from_messages(g, symmetric_messages(g, fp))


# --------------------------------------------------------------------------
# table
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Table1Row:
    q: int
    w: float
    z: float
    z_bethe: float
    z_bethe_plus_loops: float
    z_bethe_times_loops: float
    n_simple_loops: int
    stationarity: float
    fixed_point: SymmetricFixedPoint
    z_method: str

    @property
    def ratios(self) -> tuple[float, float, float]:
        return (self.z_bethe / self.z, self.z_bethe_plus_loops / self.z, self.z_bethe_times_loops / self.z)

    def to_dict(self) -> dict:
        r = self.ratios
        return {
            "q": self.q,
            "w": self.w,
            "Z": self.z,
            "Z_method": self.z_method,
            "Z_Bethe": self.z_bethe,
            "Z_Bethe/Z": r[0],
            "Z_Bethe+loops/Z": r[1],
            "Z_Bethe*loops/Z": r[2],
            "n_simple_loops": self.n_simple_loops,
            "stationarity_violation": self.stationarity,
            "fixed_point": self.fixed_point.to_dict(),
        }


def table1_row(model: ColoringModel, exact: Literal["ve", "brute"] = "ve") -> Table1Row:
    fp = symmetric_fixed_point(model.q, model.regular_degree(), model.w)
    g, res = symmetric_bethe(model, fp)
    stat = check_stationarity(g, res.messages).max_violation
    z = brute_force_partition(g) if exact == "brute" else exact_inference_ve(g, marginals=False).z
    est = truncated_series_estimates(g, res, method="trace")
    return Table1Row(
        model.q, model.w, z, est.z_bethe, est.z_bethe_plus_loops, est.z_bethe_times_loops,
        len(est.ledger), stat, fp, exact,
    )


def table1_report(edges=None, qs=(3, 4, 9), ws=(1.0, 1.5), exact: Literal["ve", "brute"] = "ve") -> list[Table1Row]:
    """Rows ordered by ``(w, q)``; ``edges`` defaults to the bundled 16-node graph."""
    edges = fig6_edges() if edges is None else edges
    return [table1_row(ColoringModel(tuple(edges), q, w), exact) for w in sorted(ws) for q in sorted(qs)]
