"""Variable projection for separable candidate equations.

Parameters that enter the model affinely are certified from the tree and
eliminated by a linear least-squares solve at every value of the remaining
nonlinear parameters, so the fit only searches over the nonlinear set.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .expr import (
    Binary,
    CandidateExpression,
    Dataset,
    Node,
    compile_nodes,
    depth_of,
    derivative,
    evaluate,
    evaluate_nodes,
    fold,
    references,
    substitute,
)

PENALTY_LOSS = 1e12
MIN_VALID_FRACTION = 0.5
COND_LIMIT = 1e12
TIKHONOV_SEED = 1e-10
REFINE_STEPS = 60

_PROBE_ROWS = 16
_PROBE_PAIRS = 8
_PROBE_TOL = 1e-9


class InvalidRegionError(RuntimeError):
    """Raised when no usable rows remain at a parameter point."""


class AffinityError(RuntimeError):
    """The separable decomposition does not reproduce the expression."""


@dataclass(frozen=True)
class LinearSolveReport:
    alpha_star: np.ndarray
    effective_rank: int
    tikhonov_lambda_used: float
    residual_norm: float
    n_excluded: int = 0


@dataclass(frozen=True)
class SeparableForm:
    """``f(X; alpha, beta) = offset(X; beta) + basis(X; beta) @ alpha``."""

    expr: CandidateExpression
    linear_indices: tuple[int, ...]
    nonlinear_indices: tuple[int, ...]
    basis_columns: tuple[Node, ...]
    offset: Node
    _fn: object = field(default=None, init=False, repr=False, compare=False)

    @property
    def m(self) -> int:
        return len(self.basis_columns)

    @property
    def d_beta(self) -> int:
        return len(self.nonlinear_indices)

    @property
    def linear_names(self) -> tuple[str, ...]:
        return tuple(self.expr.parameters[i] for i in self.linear_indices)

    @property
    def nonlinear_names(self) -> tuple[str, ...]:
        return tuple(self.expr.parameters[i] for i in self.nonlinear_indices)

    def compiled(self):
        fn = self._fn
        if fn is None:
            fn = compile_nodes((self.offset,) + self.basis_columns, self.expr.variables, self.nonlinear_names)
            object.__setattr__(self, "_fn", fn)
        return fn

    def parts(self, dataset: Dataset, beta) -> tuple[np.ndarray, np.ndarray]:
        """Evaluate the offset vector and the n x m basis matrix at ``beta``."""
        beta = np.asarray(beta, dtype=np.float64).ravel()
        if beta.shape[0] != self.d_beta:
            raise ValueError(f"beta has length {beta.shape[0]}, form needs {self.d_beta}")
        cols = dataset.columns_for(self.expr.variables)
        out = evaluate_nodes(self.compiled(), cols, beta, dataset.n)
        c = out[0]
        Phi = np.column_stack(out[1:]) if self.m else np.empty((dataset.n, 0))
        return c, Phi

    def merge(self, alpha, beta) -> np.ndarray:
        """Scatter ``alpha`` and ``beta`` back into full parameter order."""
        theta = np.empty(self.expr.n_params)
        theta[list(self.linear_indices)] = np.asarray(alpha, dtype=float)
        theta[list(self.nonlinear_indices)] = np.asarray(beta, dtype=float)
        return theta

    def split(self, theta) -> tuple[np.ndarray, np.ndarray]:
        theta = np.asarray(theta, dtype=float)
        return theta[list(self.linear_indices)], theta[list(self.nonlinear_indices)]


def plain_form(expr: CandidateExpression) -> SeparableForm:
    """Form with every parameter treated as nonlinear (no projection)."""
    return SeparableForm(expr, (), tuple(range(expr.n_params)), (), expr.root)


# -- classification ----------------------------------------------------------


def _separable_trees(expr: CandidateExpression, linear_names: Sequence[str]) -> tuple[Node, list[Node]]:
    zeros = {name: 0.0 for name in linear_names}
    offset = fold(substitute(expr.root, zeros))
    columns = []
    for name in linear_names:
        unit = dict(zeros)
        unit[name] = 1.0
        columns.append(fold(Binary("-", fold(substitute(expr.root, unit)), offset)))
    return offset, columns


def _probe_ok(expr: CandidateExpression, linear_names: Sequence[str], offset: Node, columns: Sequence[Node]) -> bool:
    if not linear_names:
        return True
    rng = np.random.default_rng(20240531)
    d = len(expr.variables)
    X = [rng.uniform(0.25, 2.0, _PROBE_ROWS) for _ in range(d)]
    names = expr.parameters
    lin = [names.index(p) for p in linear_names]
    nonlin = [i for i in range(len(names)) if names[i] not in linear_names]
    full_fn = expr.compiled()
    part_fn = compile_nodes([offset, *columns], expr.variables, [names[i] for i in nonlin])
    for _ in range(_PROBE_PAIRS):
        theta = rng.uniform(0.5, 1.5, len(names))
        theta[lin] = rng.uniform(-2.0, 2.0, len(lin))
        (f,) = evaluate_nodes(full_fn, X, theta, _PROBE_ROWS)
        parts = evaluate_nodes(part_fn, X, theta[nonlin], _PROBE_ROWS)
        recon = parts[0] + np.column_stack(parts[1:]) @ theta[lin]
        ok = np.isfinite(f) & np.isfinite(recon)
        if np.any(np.abs(f[ok] - recon[ok]) > _PROBE_TOL * (1.0 + np.abs(f[ok]))):
            return False
    return True


def is_conditionally_linear(expr: CandidateExpression, index: int) -> bool:
    """Per-parameter certificate: derivative free of the parameter, and the
    parameter vanishes from the tree when set to zero."""
    name = expr.parameters[index]
    if references(derivative(expr.root, name), name):
        return False
    return not references(fold(substitute(expr.root, {name: 0.0})), name)


def classify_parameters(expr: CandidateExpression) -> tuple[list[int], list[int]]:
    """Split parameter indices into (linear, nonlinear) sets."""
    linear = [k for k in range(expr.n_params) if is_conditionally_linear(expr, k)]
    while linear:
        names = [expr.parameters[k] for k in linear]
        offset, columns = _separable_trees(expr, names)
        if _probe_ok(expr, names, offset, columns):
            break
        # individually linear but not jointly: drop the deepest one (later index on ties)
        drop = max(linear, key=lambda k: (depth_of(expr.root, expr.parameters[k]), k))
        linear.remove(drop)
    nonlinear = [k for k in range(expr.n_params) if k not in linear]
    return linear, nonlinear


def build_separable_form(expr: CandidateExpression, linear: Sequence[int], nonlinear: Sequence[int]) -> SeparableForm:
    linear, nonlinear = tuple(linear), tuple(nonlinear)
    if sorted(linear + nonlinear) != list(range(expr.n_params)):
        raise ValueError("linear and nonlinear index sets must partition the parameters")
    names = [expr.parameters[k] for k in linear]
    offset, columns = _separable_trees(expr, names)
    if not _probe_ok(expr, names, offset, columns):
        raise AffinityError(f"parameters {names} are not jointly affine in {expr}")
    return SeparableForm(expr, linear, nonlinear, tuple(columns), offset)


def separate(expr: CandidateExpression) -> SeparableForm:
    return build_separable_form(expr, *classify_parameters(expr))


# -- linear subproblem -------------------------------------------------------


def solve_alpha_star(Phi, c, y, cond_limit: float = COND_LIMIT, tikhonov_seed: float = TIKHONOV_SEED) -> LinearSolveReport:
    """Least-squares ``alpha`` for ``y - c ~ Phi @ alpha``.

    Rows with non-finite entries are dropped first. Well-conditioned systems
    are solved exactly by QR on column-equilibrated ``Phi``; otherwise a ridge
    term ``lam * I`` with ``lam = tikhonov_seed * trace / m`` (on the
    equilibrated columns) is added, raised tenfold until the factorization is
    usable, and refined by iterated Tikhonov steps. Directions well above the
    ridge are fitted exactly; near-null directions stay suppressed, which
    tends to the minimum-norm solution.
    """
    y = np.asarray(y, dtype=float).ravel()
    c = np.asarray(c, dtype=float).ravel()
    Phi = np.asarray(Phi, dtype=float).reshape(y.shape[0], -1)
    m = Phi.shape[1]
    ok = np.isfinite(y) & np.isfinite(c) & np.all(np.isfinite(Phi), axis=1)
    n_excluded = int(y.shape[0] - ok.sum())
    if not ok.any():
        raise InvalidRegionError("every row is non-finite")
    b = y[ok] - c[ok]
    A = Phi[ok]
    if m == 0:
        return LinearSolveReport(np.zeros(0), 0, 0.0, float(np.linalg.norm(b)), n_excluded)

    norms = np.sqrt(np.einsum("ij,ij->j", A, A))
    if not np.all(np.isfinite(norms)):
        raise InvalidRegionError("basis columns overflow")
    scale = np.where(norms > 0, norms, 1.0)
    As = A / scale
    if A.shape[0] >= m:
        Q, R = np.linalg.qr(As)
        sv = np.linalg.svd(R, compute_uv=False)
    else:
        Q = R = None
        sv = np.linalg.svd(As, compute_uv=False)
    gram_cond = np.inf if sv[-1] == 0 else (sv[0] / sv[-1]) ** 2
    rank = int(np.sum(sv**2 * cond_limit > sv[0] ** 2)) if sv[0] > 0 else 0

    lam = 0.0
    if R is not None and gram_cond <= cond_limit:
        alpha = np.linalg.solve(R, Q.T @ b) / scale
    else:
        trace = float(np.sum(As**2))
        if trace == 0.0:
            alpha = np.zeros(m)
        else:
            lam = tikhonov_seed * trace / m
            while True:
                Qa, Ra = np.linalg.qr(np.vstack([As, np.sqrt(lam) * np.eye(m)]))
                diag = np.abs(np.diag(Ra))
                if np.all(np.isfinite(Ra)) and diag.min() > diag.max() * 1e-14:
                    break
                lam *= 10.0
            # iterated Tikhonov: repeated ridge corrections on the residual
            # remove the ridge bias in every direction well above sqrt(lam)
            Qn = Qa[: As.shape[0]]  # the ridge rows of the right-hand side are zero
            alpha = np.zeros(m)
            best = np.inf
            for _ in range(REFINE_STEPS):
                r = b - As @ alpha
                norm = float(r @ r)
                if norm >= best * (1.0 - 1e-15):
                    break
                best = norm
                alpha = alpha + np.linalg.solve(Ra, Qn.T @ r)
            alpha = alpha / scale
    resid = b - A @ alpha
    return LinearSolveReport(alpha, rank, lam, float(np.linalg.norm(resid)), n_excluded)


# -- projected objective -----------------------------------------------------


@dataclass(frozen=True)
class Projection:
    """Everything known about one nonlinear point after re-solving ``alpha``."""

    beta: np.ndarray
    alpha: np.ndarray
    prediction: np.ndarray
    residual: np.ndarray  # invalid rows carry sqrt(penalty)
    row_mask: np.ndarray
    loss: float
    valid: bool


def project(form: SeparableForm, dataset: Dataset, beta, penalty: float = PENALTY_LOSS,
            min_valid_fraction: float = MIN_VALID_FRACTION) -> Projection:
    beta = np.asarray(beta, dtype=float).ravel()
    n = dataset.n
    y = dataset.targets
    c, Phi = form.parts(dataset, beta)
    mask = np.isfinite(c) & np.all(np.isfinite(Phi), axis=1)
    alpha = np.full(form.m, np.nan)
    bad_resid = np.full(n, np.sqrt(penalty))
    if mask.sum() < min_valid_fraction * n:
        return Projection(beta, alpha, np.full(n, np.nan), bad_resid, mask, penalty, False)
    try:
        report = solve_alpha_star(Phi[mask], c[mask], y[mask])
    except InvalidRegionError:
        return Projection(beta, alpha, np.full(n, np.nan), bad_resid, mask, penalty, False)
    alpha = report.alpha_star
    with np.errstate(all="ignore"):
        pred = c + Phi @ alpha if form.m else c.copy()
        resid = np.where(mask, y - pred, np.sqrt(penalty))
        loss = float(np.mean(resid[mask] ** 2))
    if not np.isfinite(loss) or loss >= penalty:
        return Projection(beta, alpha, pred, bad_resid, mask, penalty, False)
    return Projection(beta, alpha, pred, resid, mask, loss, True)


def projected_loss(form: SeparableForm, dataset: Dataset, beta, penalty: float = PENALTY_LOSS) -> float:
    """Mean squared residual over valid rows after optimal ``alpha``; ``penalty``
    when fewer than half of the rows are usable."""
    return project(form, dataset, beta, penalty).loss


def projected_residual(form: SeparableForm, dataset: Dataset, beta, penalty: float = PENALTY_LOSS) -> np.ndarray:
    p = project(form, dataset, beta, penalty)
    if not p.valid:
        raise InvalidRegionError(f"no valid fit at beta={p.beta}")
    return p.residual


def full_mse(expr: CandidateExpression, dataset: Dataset, theta, penalty: float = PENALTY_LOSS) -> float:
    """Plain MSE of the full model under the same row-validity convention."""
    pred, mask = evaluate(expr, dataset, theta)
    if mask.sum() < MIN_VALID_FRACTION * dataset.n:
        return penalty
    with np.errstate(all="ignore"):
        loss = float(np.mean((dataset.targets[mask] - pred[mask]) ** 2))
    return loss if np.isfinite(loss) and loss < penalty else penalty
