"""Exact, Bethe and loop-series partition functions for discrete and Gaussian factor graphs."""

from .errors import (
    BudgetError,
    ConvergenceError,
    DegenerateError,
    InputError,
    LoopCalcError,
    NotATreeError,
    PolytopeError,
)
from .factor_graph import (
    FactorGraph,
    FactorNode,
    PseudoMarginals,
    VariableNode,
    brute_force_partition,
    exact_inference_ve,
    tree_joint_from_marginals,
)

__version__ = "0.1.0"

__all__ = [
    "BudgetError",
    "ConvergenceError",
    "DegenerateError",
    "FactorGraph",
    "FactorNode",
    "InputError",
    "LoopCalcError",
    "NotATreeError",
    "PolytopeError",
    "PseudoMarginals",
    "VariableNode",
    "brute_force_partition",
    "exact_inference_ve",
    "tree_joint_from_marginals",
]
