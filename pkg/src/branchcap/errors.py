"""Exception taxonomy shared across modules.

The CLI maps these onto process exit codes: validation failures exit 1,
numerical non-convergence exits 2, exhausted budgets exit 3.
"""


class BranchcapError(Exception):
    """Base class for all package errors."""


class ValidationError(BranchcapError):
    """Bad inputs: malformed laws, geometry violations, unparseable config."""


class NonConvergenceError(BranchcapError):
    """An iterative solver or quadrature failed to reach its tolerance."""


class BudgetExceededError(BranchcapError):
    """A compute budget (iterations, samples, vertices) ran out."""
