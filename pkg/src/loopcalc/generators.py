"""Seeded random model generators used by the test suites."""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np

from .errors import InputError
from .factor_graph import FactorGraph


def random_factor_graph(
    rng: np.random.Generator,
    n_vars: int,
    scopes: Sequence[Sequence[int]],
    q: int,
    low: float = 0.2,
    high: float = 2.0,
) -> FactorGraph:
    """Strictly positive tables and weights drawn uniformly from ``[low, high]``."""
    h = rng.uniform(low, high, size=(n_vars, q))
    factors = [(tuple(s), rng.uniform(low, high, size=(q,) * len(s))) for s in scopes]
    return FactorGraph.from_arrays(h, factors)


def random_tree_scopes(rng: np.random.Generator, n_vars: int, max_arity: int = 3) -> list[tuple[int, ...]]:
    """Scopes of a connected cycle-free factor graph; each new factor joins one old variable with fresh ones."""
    scopes = []
    placed = 1
    while placed < n_vars:
        arity = int(rng.integers(2, max_arity + 1))
        fresh = list(range(placed, min(n_vars, placed + arity - 1)))
        anchor = int(rng.integers(0, placed))
        scopes.append(tuple([anchor] + fresh))
        placed += len(fresh)
    return scopes


def cycle_scopes(n_vars: int) -> list[tuple[int, int]]:
    return [(i, (i + 1) % n_vars) for i in range(n_vars)]


def random_loopy_scopes(
    rng: np.random.Generator, n_vars: int, max_edges: int, max_arity: int = 3
) -> list[tuple[int, ...]]:
    """Connected scopes with at least one cycle and at most ``max_edges`` incidence edges."""
    if n_vars < 3:
        raise InputError("a loopy graph with distinct scopes needs at least 3 variables")
    max_arity = min(max_arity, n_vars)
    while True:
        scopes = [tuple(s) for s in random_tree_scopes(rng, n_vars, max_arity)]
        used = sum(len(s) for s in scopes)
        extra = 0
        for _ in range(20):
            arity = int(rng.integers(2, max_arity + 1))
            if used + arity > max_edges:
                arity = 2
            if used + arity > max_edges:
                break
            s = tuple(sorted(rng.choice(n_vars, size=arity, replace=False).tolist()))
            if s in scopes:
                continue
            scopes.append(s)
            used += arity
            extra += 1
            if rng.random() < 0.4:
                break
        if extra:
            return scopes
