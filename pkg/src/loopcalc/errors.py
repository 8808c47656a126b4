"""Exception hierarchy.

The CLI maps these onto exit codes: ``InputError`` -> 2, ``BudgetError`` -> 3,
``DegenerateError`` -> 4.
"""


class LoopCalcError(Exception):
    """Base class for every error raised by this package."""


class InputError(LoopCalcError, ValueError):
    """Malformed model, bad arguments, or a violated precondition."""


class NotATreeError(InputError):
    pass


class PolytopeError(InputError):
    """Pseudo-marginals violate a local-marginal-polytope constraint."""


class BudgetError(LoopCalcError):
    """An enumeration or memory budget would be exceeded."""


class DegenerateError(LoopCalcError, ArithmeticError):
    """Numerical degeneracy: zero normalizers, boundary beliefs, singular matrices."""


class ConvergenceError(DegenerateError):
    pass
