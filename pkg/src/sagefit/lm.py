"""Damped Gauss-Newton (Levenberg-Marquardt) on the projected objective.

The residual is the variable-projection residual, so the linear coefficients
are re-solved at every nonlinear point, including each finite-difference
probe of the Jacobian.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .expr import Dataset
from .varpro import PENALTY_LOSS, Projection, SeparableForm, project

TERMINATION_REASONS = ("gradient", "step", "loss-plateau", "max-iter", "invalid-start", "time-budget")


@dataclass(frozen=True)
class LocalSolveConfig:
    max_iterations: int = 100
    initial_damping: float = 1e-3
    damping_factor: float = 2.0
    diagonal_floor: float = 1e-10
    fd_scale: float = 1e-6
    gradient_tol: float = 1e-10
    step_tol: float = 1e-12
    loss_tol: float = 1e-14
    plateau_window: int = 3
    max_fd_shrinks: int = 3
    invalid_start_attempts: int = 5
    max_damping: float = 1e20

    def __post_init__(self):
        if self.damping_factor <= 1:
            raise ValueError("damping_factor must exceed 1")
        for name in ("diagonal_floor", "fd_scale", "gradient_tol", "step_tol", "loss_tol"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class LocalSolveResult:
    beta_hat: np.ndarray
    final_loss: float
    iterations: int
    termination_reason: str
    accepted_steps: int = 0
    rejected_steps: int = 0
    start_loss: float = np.nan
    trace: list = field(default_factory=list)
    zero_jacobian_columns: int = 0

    def summary(self) -> dict:
        return {
            "beta": [float(b) for b in self.beta_hat],
            "loss": float(self.final_loss),
            "start_loss": float(self.start_loss),
            "iterations": self.iterations,
            "termination": self.termination_reason,
            "accepted": self.accepted_steps,
            "rejected": self.rejected_steps,
        }


def _column(form, dataset, beta, j, center: Projection, lower, upper, fd_scale, max_shrinks, penalty):
    h = fd_scale * max(1.0, abs(beta[j]))
    for _ in range(max_shrinks + 1):
        up = upper is None or beta[j] + h <= upper[j]
        down = lower is None or beta[j] - h >= lower[j]
        if not (up or down):
            h /= 10.0
            continue
        plus = minus = center
        if up:
            bp = beta.copy()
            bp[j] += h
            plus = project(form, dataset, bp, penalty)
        if down:
            bm = beta.copy()
            bm[j] -= h
            minus = project(form, dataset, bm, penalty)
        if not (plus.valid and minus.valid):
            h /= 10.0
            continue
        width = (2.0 if up and down else 1.0) * h
        usable = center.row_mask & plus.row_mask & minus.row_mask
        with np.errstate(all="ignore"):
            col = np.where(usable, (plus.residual - minus.residual) / width, 0.0)
        if np.all(np.isfinite(col)):
            return col, True
        h /= 10.0
    return np.zeros(dataset.n), False


def jacobian(form: SeparableForm, dataset: Dataset, beta, center: Projection | None = None,
             lower=None, upper=None, fd_scale: float = 1e-6, max_shrinks: int = 3,
             penalty: float = PENALTY_LOSS) -> tuple[np.ndarray, list[int]]:
    """Finite-difference Jacobian of the projected residual plus the indices
    of columns that had to be zeroed after repeated invalid probes."""
    beta = np.asarray(beta, dtype=float).ravel()
    if center is None:
        center = project(form, dataset, beta, penalty)
    J = np.zeros((dataset.n, beta.shape[0]))
    zeroed = []
    for j in range(beta.shape[0]):
        J[:, j], ok = _column(form, dataset, beta, j, center, lower, upper, fd_scale, max_shrinks, penalty)
        if not ok:
            zeroed.append(j)
    return J, zeroed


def projected_jacobian(form: SeparableForm, dataset: Dataset, beta, lower=None, upper=None,
                       fd_scale: float = 1e-6) -> np.ndarray:
    """Central differences with step ``fd_scale * max(1, |beta_j|)``; one-sided
    next to a bound. Each probe re-solves the linear coefficients."""
    J, _ = jacobian(form, dataset, beta, lower=lower, upper=upper, fd_scale=fd_scale)
    return J


def lm_step(J, r, damping: float, floor: float = 1e-10, factor: float = 2.0, max_retries: int = 12) -> np.ndarray:
    """Solve ``(J'J + damping * (diag(J'J) + floor * I)) step = -J'r``."""
    J = np.asarray(J, dtype=float)
    r = np.asarray(r, dtype=float)
    d = J.shape[1]
    if d == 0:
        return np.zeros(0)
    JtJ = J.T @ J
    g = J.T @ r
    scale = np.diag(JtJ) + floor
    lam = damping
    for _ in range(max_retries + 1):
        A = JtJ + lam * np.diag(scale)
        try:
            cho = scipy.linalg.cho_factor(A)
            step = -scipy.linalg.cho_solve(cho, g)
            if np.all(np.isfinite(step)):
                return step
        except (np.linalg.LinAlgError, ValueError):
            pass
        lam = lam * factor if lam > 0 else floor
    raise np.linalg.LinAlgError("damped normal equations stayed singular")


def reflect_into(x, lower, upper) -> np.ndarray:
    x = np.array(x, dtype=float)
    if lower is not None:
        x = np.where(x < lower, 2 * lower - x, x)
    if upper is not None:
        x = np.where(x > upper, 2 * upper - x, x)
    if lower is not None or upper is not None:
        x = np.clip(x, lower, upper)
    return x


def solve_local(form: SeparableForm, dataset: Dataset, beta0, config: LocalSolveConfig | None = None,
                lower=None, upper=None, deadline: float | None = None,
                penalty: float = PENALTY_LOSS) -> LocalSolveResult:
    """Minimize the projected loss from ``beta0`` inside ``[lower, upper]``.

    Steps are accepted only on strict loss decrease (damping divided by the
    factor), otherwise the damping grows and the step is recomputed from the
    same Jacobian. Trial points outside the box are reflected, then clipped.
    """
    cfg = config or LocalSolveConfig()
    lower = None if lower is None else np.asarray(lower, dtype=float)
    upper = None if upper is None else np.asarray(upper, dtype=float)
    beta = np.asarray(beta0, dtype=float).ravel().copy()
    if lower is not None or upper is not None:
        beta = np.clip(beta, lower, upper)
    cur = project(form, dataset, beta, penalty)
    res = LocalSolveResult(beta, cur.loss, 0, "gradient", start_loss=cur.loss, trace=[cur.loss])
    if form.d_beta == 0:
        return res

    lam = cfg.initial_damping
    history = [cur.loss]
    reason = "max-iter"
    zero_cols: set[int] = set()
    while res.iterations < cfg.max_iterations:
        if deadline is not None and time.perf_counter() > deadline:
            reason = "time-budget"
            break
        J, zeroed = jacobian(form, dataset, beta, cur, lower, upper, cfg.fd_scale, cfg.max_fd_shrinks, penalty)
        zero_cols.update(zeroed)
        g = J.T @ cur.residual
        if cur.valid and (cur.loss == 0.0 or np.max(np.abs(g)) <= cfg.gradient_tol):
            reason = "gradient"
            break
        if not cur.valid and not np.any(g):
            reason = "invalid-start"
            break
        res.iterations += 1
        stop = None
        failures = 0
        while True:
            try:
                delta = lm_step(J, cur.residual, lam, cfg.diagonal_floor, cfg.damping_factor)
            except np.linalg.LinAlgError:
                stop = "step"
                break
            trial_beta = reflect_into(beta + delta, lower, upper)
            moved = np.linalg.norm(trial_beta - beta)
            if moved <= cfg.step_tol * (np.linalg.norm(beta) + cfg.step_tol):
                stop = "step"
                break
            trial = project(form, dataset, trial_beta, penalty)
            if cur.valid and cur.loss - cfg.loss_tol * cur.loss <= trial.loss < cur.loss:
                # decrease below the loss's floating-point resolution: converged
                stop = "loss-plateau"
                break
            if trial.loss < cur.loss:
                beta, cur = trial_beta, trial
                lam /= cfg.damping_factor
                res.accepted_steps += 1
                break
            res.rejected_steps += 1
            failures += 1
            lam = lam * cfg.damping_factor if lam > 0 else cfg.diagonal_floor
            if not cur.valid and failures >= cfg.invalid_start_attempts:
                stop = "invalid-start"
                break
            if lam > cfg.max_damping:
                stop = "step"
                break
        if stop is not None:
            reason = "invalid-start" if not cur.valid else stop
            break
        history.append(cur.loss)
        res.trace.append(cur.loss)
        w = cfg.plateau_window
        if len(history) > w and history[-1 - w] - history[-1] <= cfg.loss_tol * history[-1 - w]:
            reason = "loss-plateau"
            break
    res.beta_hat = beta
    res.final_loss = cur.loss
    res.termination_reason = reason
    res.zero_jacobian_columns = len(zero_cols)
    return res
