"""End-to-end fitting of a candidate structure, plus baseline fitters.

``sage_fit_evaluate`` runs the structure-aware pipeline: classify and
project out the linear parameters, oversample and fingerprint nonlinear
starts, pick diverse starts in function space, run a local LM solve from
each, and keep the best. The baselines fit the full parameter vector
directly and exist for fidelity comparisons.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping

import numpy as np

from .expr import CandidateExpression, Dataset, compile_nodes, derivative, evaluate_nodes
from .fsfps import DEFAULT_BOUNDS, NoViableStartError, SamplingConfig, fingerprint, fs_fps_select, oversample
from .lm import LocalSolveConfig, LocalSolveResult, solve_local
from .varpro import PENALTY_LOSS, MIN_VALID_FRACTION, SeparableForm, full_mse, plain_form, project, separate

STRATEGIES = ("sage", "single_start_lm", "lm_trf_multi", "gd_multi")


def default_threads() -> int:
    raw = os.environ.get("SAGEFIT_THREADS")
    if raw is None or raw.strip() == "":
        return 1
    n = int(raw)
    return (os.cpu_count() or 1) if n == 0 else max(n, 1)


@dataclass(frozen=True)
class SolverConfig:
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    local: LocalSolveConfig = field(default_factory=LocalSolveConfig)
    bounds: Mapping[str, tuple[float, float]] | None = None
    default_bounds: tuple[float, float] = DEFAULT_BOUNDS
    time_budget: float | None = None
    penalty_loss: float = PENALTY_LOSS
    threads: int | None = None
    gd_max_iterations: int = 200
    baseline_strategy: str | None = None

    def __post_init__(self):
        lo, hi = self.default_bounds
        if not lo < hi:
            raise ValueError("default_bounds must satisfy lower < upper")
        for name, (lo, hi) in (self.bounds or {}).items():
            if not lo <= hi:
                raise ValueError(f"bounds for {name!r} are inverted")
        if self.penalty_loss <= 0:
            raise ValueError("penalty_loss must be positive")

    def bounds_for(self, names) -> tuple[np.ndarray, np.ndarray]:
        table = dict(self.bounds or {})
        pairs = [table.get(n, self.default_bounds) for n in names]
        lower = np.array([float(p[0]) for p in pairs])
        upper = np.array([float(p[1]) for p in pairs])
        return lower, upper

    def with_seed(self, seed: int) -> "SolverConfig":
        return replace(self, sampling=replace(self.sampling, seed=seed))

    def snapshot(self) -> dict:
        out = asdict(self)
        out["bounds"] = {k: list(v) for k, v in (self.bounds or {}).items()}
        return out


@dataclass
class EvaluationResult:
    score: float
    theta: np.ndarray
    parameters: tuple[str, ...]
    alpha_hat: np.ndarray
    beta_hat: np.ndarray
    linear_names: tuple[str, ...]
    nonlinear_names: tuple[str, ...]
    per_start: list[LocalSolveResult]
    wall_time: float
    evaluator_tag: str
    valid: bool = True
    flags: list[str] = field(default_factory=list)

    def to_dict(self, timing: bool = True) -> dict:
        out = {
            "evaluator": self.evaluator_tag,
            "score": float(self.score),
            "valid": self.valid,
            "theta": {p: float(v) for p, v in zip(self.parameters, self.theta)},
            "linear": list(self.linear_names),
            "nonlinear": list(self.nonlinear_names),
            "flags": list(self.flags),
            "starts": [r.summary() for r in self.per_start],
        }
        if timing:
            out["wall_time"] = self.wall_time
        return out


def _run_starts(form, dataset, starts, config: SolverConfig, lower, upper, deadline) -> list[LocalSolveResult]:
    def one(beta0):
        return solve_local(form, dataset, beta0, config.local, lower, upper, deadline, config.penalty_loss)

    threads = config.threads if config.threads is not None else default_threads()
    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, starts))
    return [one(b) for b in starts]


def _best(results: list[LocalSolveResult]) -> int:
    # lowest loss, then lowest start index
    return min(range(len(results)), key=lambda i: (results[i].final_loss, i))


def _check_dims(expr: CandidateExpression, dataset: Dataset):
    dataset.columns_for(expr.variables)


def _penalty_result(expr, form, tag, t0, per_start, flags, penalty) -> EvaluationResult:
    theta = np.full(expr.n_params, np.nan)
    return EvaluationResult(penalty, theta, expr.parameters, np.full(form.m, np.nan),
                            np.full(form.d_beta, np.nan), form.linear_names, form.nonlinear_names,
                            per_start, time.perf_counter() - t0, tag, False, flags + ["invalid"])


def _finish(expr, form, dataset, beta, per_start, tag, t0, flags, config) -> EvaluationResult:
    p = project(form, dataset, beta, config.penalty_loss)
    if not p.valid:
        return _penalty_result(expr, form, tag, t0, per_start, flags, config.penalty_loss)
    theta = form.merge(p.alpha, p.beta)
    return EvaluationResult(p.loss, theta, expr.parameters, p.alpha, p.beta, form.linear_names,
                            form.nonlinear_names, per_start, time.perf_counter() - t0, tag, True, flags)


def _warm_beta(form: SeparableForm, warm_start, lower, upper, flags) -> np.ndarray:
    if warm_start is None:
        return 0.5 * (lower + upper)
    theta = np.asarray(warm_start, dtype=float).ravel()
    if theta.shape[0] != form.expr.n_params:
        raise ValueError(f"warm start has length {theta.shape[0]}, expression needs {form.expr.n_params}")
    _, beta = form.split(theta)
    clipped = np.clip(beta, lower, upper)
    if np.any(clipped != beta):
        flags.append("warm-start-clipped")
    return clipped


def _widen(lower, upper, factor: float = 10.0):
    """Scale each bound's magnitude by ``factor`` away from the box, never
    crossing zero, so a sign restriction on a parameter survives."""
    lower = np.where(lower > 0, lower / factor, lower * factor)
    upper = np.where(upper < 0, upper / factor, upper * factor)
    return lower, upper


def sage_fit_evaluate(expr: CandidateExpression, dataset: Dataset, config: SolverConfig | None = None,
                      warm_start=None) -> EvaluationResult:
    """Fit ``expr`` to ``dataset`` and return the best score found.

    ``warm_start`` is a full parameter vector; only its nonlinear slice is
    used. Without one, sampling centres on the midpoint of the bounds.
    """
    config = config or SolverConfig()
    t0 = time.perf_counter()
    _check_dims(expr, dataset)
    deadline = None if config.time_budget is None else t0 + config.time_budget
    form = separate(expr)
    flags: list[str] = []
    lower, upper = config.bounds_for(form.nonlinear_names)
    if form.d_beta == 0:
        return _finish(expr, form, dataset, np.zeros(0), [], "sage", t0, flags, config)

    warm = _warm_beta(form, warm_start, lower, upper, flags)
    rng = np.random.default_rng(config.sampling.seed)
    selected = None
    for attempt in range(2):
        cand = oversample(warm, lower, upper, config.sampling, rng)
        # the warm point itself is always a candidate
        cand[0] = np.clip(warm, lower, upper)
        pool = fingerprint(cand, form, dataset, config.penalty_loss)
        try:
            selected = fs_fps_select(pool, config.sampling.K, dataset.targets, config.sampling.distance_epsilon)
            break
        except NoViableStartError:
            if attempt == 0:
                lower, upper = _widen(lower, upper)
                flags.append("bounds-widened")
    if selected is None:
        return _penalty_result(expr, form, "sage", t0, [], flags + ["no-viable-start"], config.penalty_loss)
    if len(selected) < config.sampling.K:
        flags.append(f"start-shortfall:{len(selected)}")

    results = _run_starts(form, dataset, [c.beta for c in selected], config, lower, upper, deadline)
    best = results[_best(results)]
    return _finish(expr, form, dataset, best.beta_hat, results, "sage", t0, flags, config)


def refit(expr: CandidateExpression, dataset: Dataset, theta_initial, config: SolverConfig | None = None) -> EvaluationResult:
    """Structure-aware fit warm-started from ``theta_initial`` (clipped into bounds)."""
    config = config or SolverConfig()
    theta = np.asarray(theta_initial, dtype=float).ravel()
    lower, upper = config.bounds_for(expr.parameters)
    clipped = np.clip(theta, lower, upper)
    res = sage_fit_evaluate(expr, dataset, config, warm_start=clipped)
    if np.any(clipped != theta) and "warm-start-clipped" not in res.flags:
        res.flags.append("warm-start-clipped")
    return res


# -- baselines ---------------------------------------------------------------


def _full_starts(expr, config: SolverConfig, warm_start, n_starts, lower, upper, flags) -> list[np.ndarray]:
    rng = np.random.default_rng(config.sampling.seed)
    starts = []
    if warm_start is not None:
        theta = np.asarray(warm_start, dtype=float).ravel()
        if theta.shape[0] != expr.n_params:
            raise ValueError(f"warm start has length {theta.shape[0]}, expression needs {expr.n_params}")
        clipped = np.clip(theta, lower, upper)
        if np.any(clipped != theta):
            flags.append("warm-start-clipped")
        starts.append(clipped)
    while len(starts) < n_starts:
        starts.append(rng.uniform(lower, upper))
    return starts


def gradient_descent(expr: CandidateExpression, dataset: Dataset, theta0, lower, upper, max_iterations: int = 200,
                     deadline: float | None = None, penalty: float = PENALTY_LOSS) -> LocalSolveResult:
    """Projected gradient descent on the full-parameter MSE with Armijo backtracking."""
    names = expr.parameters
    fn = compile_nodes([expr.root] + [derivative(expr.root, p) for p in names], expr.variables, names)
    loss_fn = expr.compiled()
    cols = dataset.columns_for(expr.variables)
    y, n = dataset.targets, dataset.n

    def loss_grad(theta, need_grad=True):
        out = evaluate_nodes(fn if need_grad else loss_fn, cols, theta, n)
        pred = out[0]
        mask = np.isfinite(pred)
        if mask.sum() < MIN_VALID_FRACTION * n:
            return penalty, None
        with np.errstate(all="ignore"):
            r = y[mask] - pred[mask]
            loss = float(np.mean(r**2))
            if not need_grad:
                return (loss if np.isfinite(loss) and loss < penalty else penalty), None
            G = np.column_stack([o[mask] for o in out[1:]])
            grad = -2.0 / mask.sum() * (G.T @ r)
        if not np.isfinite(loss) or loss >= penalty:
            return penalty, None
        if not np.all(np.isfinite(grad)):
            grad = np.where(np.isfinite(grad), grad, 0.0)
        return loss, grad

    theta = np.clip(np.asarray(theta0, dtype=float), lower, upper)
    loss, grad = loss_grad(theta)
    res = LocalSolveResult(theta, loss, 0, "max-iter", start_loss=loss, trace=[loss])
    if grad is None:
        res.termination_reason = "invalid-start"
        return res
    step = 1.0
    for it in range(max_iterations):
        if deadline is not None and time.perf_counter() > deadline:
            res.termination_reason = "time-budget"
            break
        gnorm = np.linalg.norm(grad)
        if gnorm <= 1e-12:
            res.termination_reason = "gradient"
            break
        accepted = False
        for _ in range(60):
            trial = np.clip(theta - step * grad, lower, upper)
            moved = trial - theta
            if np.linalg.norm(moved) <= 1e-14 * (1 + np.linalg.norm(theta)):
                break
            tl, _ = loss_grad(trial, need_grad=False)
            if tl <= loss + 1e-4 * float(grad @ moved):
                accepted = True
                break
            step *= 0.5
            res.rejected_steps += 1
        res.iterations = it + 1
        if not accepted:
            res.termination_reason = "step"
            break
        theta = trial
        loss, grad = loss_grad(theta)
        res.accepted_steps += 1
        res.trace.append(loss)
        step *= 2.0
        if grad is None:  # pragma: no cover - accepted steps stay valid
            break
    res.beta_hat = theta
    res.final_loss = loss
    return res


def baseline_evaluate(expr: CandidateExpression, dataset: Dataset, strategy: str, config: SolverConfig | None = None,
                      warm_start=None) -> EvaluationResult:
    """Full-parameter fitters used as comparison points.

    ``single_start_lm`` runs the LM solver once from ``warm_start`` (or the
    bounds midpoint); ``lm_trf_multi`` runs it from K starts; ``gd_multi``
    runs gradient descent with backtracking from K starts. Multi-start
    strategies use ``warm_start`` as the first start when given and uniform
    draws over the bounds for the rest.
    """
    if strategy == "sage":
        return sage_fit_evaluate(expr, dataset, config, warm_start)
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    config = config or SolverConfig()
    t0 = time.perf_counter()
    _check_dims(expr, dataset)
    deadline = None if config.time_budget is None else t0 + config.time_budget
    form = plain_form(expr)
    lower, upper = config.bounds_for(expr.parameters)
    flags: list[str] = []
    if strategy == "single_start_lm":
        start = warm_start if warm_start is not None else 0.5 * (lower + upper)
        starts = _full_starts(expr, config, start, 1, lower, upper, flags)
    else:
        starts = _full_starts(expr, config, warm_start, config.sampling.K, lower, upper, flags)

    if strategy == "gd_multi":
        results = [gradient_descent(expr, dataset, s, lower, upper, config.gd_max_iterations, deadline,
                                    config.penalty_loss) for s in starts]
    else:
        results = _run_starts(form, dataset, starts, config, lower, upper, deadline)
    best = results[_best(results)]
    theta = best.beta_hat
    score = full_mse(expr, dataset, theta, config.penalty_loss)
    if score >= config.penalty_loss:
        return _penalty_result(expr, form, strategy, t0, results, flags, config.penalty_loss)
    return EvaluationResult(score, theta.copy(), expr.parameters, np.zeros(0), theta.copy(), (),
                            expr.parameters, results, time.perf_counter() - t0, strategy, True, flags)


def evaluate_with(expr: CandidateExpression, dataset: Dataset, strategy: str, config: SolverConfig | None = None,
                  warm_start=None) -> EvaluationResult:
    if strategy == "sage":
        return sage_fit_evaluate(expr, dataset, config, warm_start)
    return baseline_evaluate(expr, dataset, strategy, config, warm_start)
