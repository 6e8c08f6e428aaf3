"""Structure-aware parameter fitting for symbolic-regression candidates."""

__version__ = "0.1.0"

from .expr import CandidateExpression, Dataset, evaluate, parse_expression  # noqa: E402
from .evaluator import (  # noqa: E402
    EvaluationResult,
    SolverConfig,
    baseline_evaluate,
    refit,
    sage_fit_evaluate,
)

__all__ = [
    "CandidateExpression",
    "Dataset",
    "EvaluationResult",
    "SolverConfig",
    "baseline_evaluate",
    "evaluate",
    "parse_expression",
    "refit",
    "sage_fit_evaluate",
]
