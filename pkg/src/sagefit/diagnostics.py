"""Fidelity metrics, lost-rate analyses, and loss-landscape diagnostics."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .expr import CandidateExpression, Dataset, ExpressionError, parse_expression
from .varpro import PENALTY_LOSS, full_mse

# -- scalar metrics ----------------------------------------------------------


def nmse(predictions, targets) -> float:
    """Squared error normalized by the target variance (1 for the mean predictor)."""
    pred = np.asarray(predictions, dtype=float).ravel()
    y = np.asarray(targets, dtype=float).ravel()
    if pred.shape != y.shape:
        raise ValueError("predictions and targets differ in length")
    denom = float(np.sum((y - y.mean()) ** 2))
    if denom == 0.0:
        raise ValueError("targets have zero variance; NMSE undefined")
    if not np.all(np.isfinite(pred)):
        return math.inf
    return float(np.sum((pred - y) ** 2)) / denom


def acc_tau_counts(predictions, targets, tau: float) -> tuple[int, int, int]:
    """(passed, included, excluded) for relative error within ``tau``; rows
    with a zero target are excluded."""
    pred = np.asarray(predictions, dtype=float).ravel()
    y = np.asarray(targets, dtype=float).ravel()
    if pred.shape != y.shape:
        raise ValueError("predictions and targets differ in length")
    keep = y != 0
    with np.errstate(all="ignore"):
        rel = np.abs((pred[keep] - y[keep]) / y[keep])
    passed = int(np.sum(rel <= tau))
    return passed, int(keep.sum()), int((~keep).sum())


def acc_tau(predictions, targets, tau: float) -> float:
    passed, included, _ = acc_tau_counts(predictions, targets, tau)
    if included == 0:
        raise ValueError("every target is zero; relative accuracy undefined")
    return passed / included


def log_ratio(nmse_baseline: float, nmse_treated: float) -> float:
    if nmse_baseline <= 0 or nmse_treated <= 0:
        raise ValueError("log-ratio needs positive NMSE values")
    return math.log10(nmse_baseline / nmse_treated)


def score_distortion(hat_score: float, reference_score: float) -> float:
    """Empirical distortion: fitted score minus a best-known reference score."""
    if not (math.isfinite(hat_score) and math.isfinite(reference_score)):
        raise ValueError("scores must be finite")
    return hat_score - reference_score


@dataclass
class MetricsReport:
    nmse: float
    acc_tau: dict[float, float]
    log_nmse: float
    score_distortion: float | None
    n_rows: int
    n_excluded_zero_target: int

    def to_dict(self) -> dict:
        return {
            "nmse": self.nmse,
            "acc_tau": {str(k): v for k, v in self.acc_tau.items()},
            "log_nmse": self.log_nmse,
            "empirical_distortion": self.score_distortion,
            "n_rows": self.n_rows,
            "n_excluded_zero_target": self.n_excluded_zero_target,
        }


def metrics_report(predictions, targets, taus: Sequence[float] = (0.1,), score: float | None = None,
                   reference_score: float | None = None) -> MetricsReport:
    value = nmse(predictions, targets)
    accs = {}
    excluded = 0
    for tau in taus:
        passed, included, excluded = acc_tau_counts(predictions, targets, tau)
        accs[float(tau)] = passed / included if included else math.nan
    dist = None
    if score is not None and reference_score is not None:
        dist = score_distortion(score, reference_score)
    log_value = math.log10(value) if value > 0 else -math.inf
    return MetricsReport(value, accs, log_value, dist, len(np.ravel(targets)), excluded)


# -- trajectory lost rate ----------------------------------------------------


@dataclass
class TrajectoryCandidate:
    index: int
    expression: str
    variables: list[str]
    parameters: list[str]
    loss: float
    theta: list[float] | None
    parsed: CandidateExpression | None = None
    error: str | None = None


@dataclass
class TrajectoryRecord:
    candidates: list[TrajectoryCandidate]
    updates: list[int] = field(default_factory=list)  # positions into candidates
    intervals: list[list[int]] = field(default_factory=list)  # discarded positions per update
    unassigned: list[int] = field(default_factory=list)

    def __post_init__(self):
        best = math.inf
        for pos, cand in enumerate(self.candidates):
            if math.isfinite(cand.loss) and cand.loss < best:
                best = cand.loss
                self.updates.append(pos)
                self.intervals.append([])
            elif self.intervals:
                self.intervals[-1].append(pos)
            else:
                self.unassigned.append(pos)


def _parse_candidate(obj: dict, fallback_index: int) -> TrajectoryCandidate:
    loss = obj.get("loss")
    loss = float(loss) if loss is not None else math.inf
    cand = TrajectoryCandidate(
        index=int(obj.get("index", fallback_index)),
        expression=str(obj.get("expression", "")),
        variables=list(obj.get("variables") or []),
        parameters=list(obj.get("parameters") or []),
        loss=loss if math.isfinite(loss) else math.inf,
        theta=obj.get("theta"),
    )
    try:
        cand.parsed = parse_expression(cand.expression, cand.variables, cand.parameters)
        if cand.theta is not None and len(cand.theta) != cand.parsed.n_params:
            raise ExpressionError("theta length does not match parameters")
    except (ExpressionError, TypeError) as exc:
        cand.parsed = None
        cand.error = str(exc)
    return cand


def read_trajectory(lines: Iterable[str]) -> TrajectoryRecord:
    """Parse JSONL candidates ``{index, expression, variables, parameters, loss, theta}``.

    Lines that are not valid JSON become unparseable candidates (kept in
    order, never refitted)."""
    cands = []
    for i, line in enumerate(lines):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            if not isinstance(obj, dict):
                raise ValueError("not an object")
        except ValueError as exc:
            cands.append(TrajectoryCandidate(i, line.strip(), [], [], math.inf, None, None, f"bad json: {exc}"))
            continue
        cands.append(_parse_candidate(obj, i))
    return TrajectoryRecord(cands)


@dataclass
class LostRateReport:
    rate: float
    mean_interval_rate: float
    n_lost: int
    n_compared: int
    n_discarded: int
    table: list[dict]

    def to_dict(self) -> dict:
        return {
            "lost_rate": self.rate,
            "mean_interval_rate": self.mean_interval_rate,
            "n_lost": self.n_lost,
            "n_compared": self.n_compared,
            "n_discarded": self.n_discarded,
            "table": self.table,
        }


def trajectory_lost_rate(record: TrajectoryRecord, dataset: Dataset, refitter: Callable | None = None,
                         config=None) -> LostRateReport:
    """Refit every reference update and every candidate it discarded, and
    count discarded candidates that strictly beat their reference.

    Only pairs where both refits succeed enter the denominator.
    """
    if refitter is None:
        from .evaluator import refit

        def refitter(expr, data, theta):
            return refit(expr, data, theta, config)

    if not record.updates:
        raise ValueError("trajectory has no reference updates")

    cache: dict[int, float | None] = {}

    def refit_loss(pos: int) -> float | None:
        if pos in cache:
            return cache[pos]
        cand = record.candidates[pos]
        value = None
        if cand.parsed is not None:
            theta = cand.theta if cand.theta is not None else np.ones(cand.parsed.n_params)
            try:
                res = refitter(cand.parsed, dataset, np.asarray(theta, dtype=float))
                if res.valid and math.isfinite(res.score):
                    value = float(res.score)
            except (ValueError, ExpressionError):
                value = None
        cache[pos] = value
        return value

    table = []
    n_lost = n_compared = n_discarded = 0
    interval_rates = []
    for k, (upos, discarded) in enumerate(zip(record.updates, record.intervals)):
        ref_loss = refit_loss(upos)
        lost_k = compared_k = 0
        for pos in discarded:
            n_discarded += 1
            cand_loss = refit_loss(pos)
            row = {
                "interval": k,
                "reference_index": record.candidates[upos].index,
                "candidate_index": record.candidates[pos].index,
                "reference_refit_loss": ref_loss,
                "candidate_refit_loss": cand_loss,
                "original_loss": record.candidates[pos].loss if math.isfinite(record.candidates[pos].loss) else None,
            }
            if ref_loss is None or cand_loss is None:
                row["status"] = "refit-failed"
                row["lost"] = None
            else:
                lost = cand_loss < ref_loss
                row["status"] = "compared"
                row["lost"] = lost
                compared_k += 1
                lost_k += int(lost)
            table.append(row)
        n_lost += lost_k
        n_compared += compared_k
        if compared_k:
            interval_rates.append(lost_k / compared_k)
    if n_compared == 0:
        raise ValueError("no discarded candidate could be compared; lost rate undefined")
    return LostRateReport(n_lost / n_compared, float(np.mean(interval_rates)), n_lost, n_compared, n_discarded, table)


# -- structure-progress bank -------------------------------------------------


@dataclass
class BankEntry:
    index: int
    expression: str
    variables: list[str]
    parameters: list[str]
    data: str
    problem: int = 0
    provenance: str = ""

    @property
    def n_params(self) -> int:
        return len(self.parameters)

    def parse(self) -> CandidateExpression:
        return parse_expression(self.expression, self.variables, self.parameters)

    def to_dict(self) -> dict:
        return {
            "index": self.index, "problem": self.problem, "expression": self.expression,
            "variables": self.variables, "parameters": self.parameters, "n_params": self.n_params,
            "data": self.data, "provenance": self.provenance,
        }


@dataclass
class CandidateBank:
    entries: list[BankEntry]
    cold_start: bool = True
    skipped: int = 0


def spb_lost_rates(scores: dict[str, Sequence[float]], tau: float = 3.0) -> dict[str, float]:
    """Fraction of entries where an evaluator's NMSE exceeds ``tau`` times the
    best NMSE any evaluator reached on that entry."""
    names = list(scores)
    table = np.array([np.asarray(scores[n], dtype=float) for n in names])
    if table.size == 0:
        raise ValueError("empty score table")
    reference = table.min(axis=0)
    return {n: float(np.mean(table[i] > tau * reference)) for i, n in enumerate(names)}


@dataclass
class BankScores:
    evaluators: list[str]
    entries: list[BankEntry]
    nmse: dict[str, list[float]]
    times: dict[str, list[float]]
    tau: float = 3.0

    def reference(self) -> np.ndarray:
        return np.min(np.array([self.nmse[e] for e in self.evaluators]), axis=0)

    def summary(self) -> dict[str, dict]:
        rates = spb_lost_rates(self.nmse, self.tau)
        out = {}
        for e in self.evaluators:
            logs = np.log10(np.maximum(np.asarray(self.nmse[e]), 1e-300))
            out[e] = {
                "lost_rate": rates[e],
                "mean_log_nmse": float(np.mean(logs)),
                "median_log_nmse": float(np.median(logs)),
                "mean_time": float(np.mean(self.times[e])),
            }
        return out

    def rows(self) -> list[dict]:
        ref = self.reference()
        rows = []
        for i, entry in enumerate(self.entries):
            row = {"index": entry.index, "problem": entry.problem, "n_params": entry.n_params,
                   "expression": entry.expression, "reference_nmse": float(ref[i])}
            for e in self.evaluators:
                row[f"{e}_nmse"] = float(self.nmse[e][i])
                row[f"{e}_missed"] = bool(self.nmse[e][i] > self.tau * ref[i])
            rows.append(row)
        return rows


def score_bank(bank: CandidateBank, datasets: dict[str, Dataset], evaluators: Sequence[str], config=None,
               tau: float = 3.0, progress: Callable | None = None) -> BankScores:
    """Run each evaluator on every bank entry (cold start theta0 = 1 when the
    bank says so) and record NMSE and wall time."""
    from .evaluator import SolverConfig, evaluate_with

    config = config or SolverConfig()
    nmse_table = {e: [] for e in evaluators}
    times = {e: [] for e in evaluators}
    for entry in bank.entries:
        data = datasets[entry.data]
        var_y = float(np.mean((data.targets - data.targets.mean()) ** 2))
        try:
            expr = entry.parse()
        except ExpressionError:
            expr = None
        for e in evaluators:
            score, elapsed = config.penalty_loss, 0.0
            if expr is not None:
                warm = np.ones(expr.n_params) if bank.cold_start else None
                try:
                    res = evaluate_with(expr, data, e, config, warm_start=warm)
                    score, elapsed = res.score, res.wall_time
                except (ValueError, ArithmeticError, np.linalg.LinAlgError):
                    score = config.penalty_loss
            nmse_table[e].append(score / var_y if var_y > 0 else math.inf)
            times[e].append(elapsed)
        if progress is not None:
            progress(entry)
    return BankScores(list(evaluators), list(bank.entries), nmse_table, times, tau)


def spb_lost_rate(bank: CandidateBank, datasets: dict[str, Dataset], evaluators: Sequence[str], tau: float = 3.0,
                  config=None) -> tuple[dict[str, dict], BankScores]:
    scores = score_bank(bank, datasets, evaluators, config, tau)
    return scores.summary(), scores


# -- landscapes --------------------------------------------------------------


@dataclass
class LandscapeGrid:
    values: np.ndarray  # shape (len(axis_i_values), len(axis_j_values))
    axis_i: str
    axis_j: str | None
    axis_i_values: np.ndarray
    axis_j_values: np.ndarray
    center: np.ndarray
    sentinel: float = PENALTY_LOSS

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            label = f"{self.axis_i}\\{self.axis_j}" if self.axis_j else self.axis_i
            writer.writerow([label] + [repr(float(v)) for v in self.axis_j_values])
            for a, row in zip(self.axis_i_values, self.values):
                writer.writerow([repr(float(a))] + [repr(float(v)) for v in row])


def landscape_slice(expr: CandidateExpression, dataset: Dataset, theta_center, axis_i: int, axis_j: int | None,
                    range_i: tuple[float, float], range_j: tuple[float, float] | None, grid_n: int,
                    penalty: float = PENALTY_LOSS) -> LandscapeGrid:
    """Full-parameter MSE on a grid through ``theta_center`` along two axes
    (one axis when ``axis_j`` is None). Invalid cells hold ``penalty``."""
    center = np.asarray(theta_center, dtype=float).ravel()
    if center.shape[0] != expr.n_params:
        raise ValueError(f"center has length {center.shape[0]}, expression needs {expr.n_params}")
    if grid_n < 2:
        raise ValueError("grid needs at least 2 points per axis")
    axes = [axis_i] + ([] if axis_j is None else [axis_j])
    for ax in axes:
        if not 0 <= ax < expr.n_params:
            raise ValueError(f"axis {ax} out of range")
    if axis_j is not None and axis_i == axis_j:
        raise ValueError("axes must be distinct")
    ranges = [range_i] + ([] if axis_j is None else [range_j])
    for lo, hi in ranges:
        if not lo < hi:
            raise ValueError(f"degenerate range ({lo}, {hi})")
    ai = np.linspace(range_i[0], range_i[1], grid_n)
    aj = np.linspace(range_j[0], range_j[1], grid_n) if axis_j is not None else np.array([np.nan])
    values = np.empty((ai.shape[0], aj.shape[0]))
    theta = center.copy()
    for p, a in enumerate(ai):
        theta[axis_i] = a
        for q, b in enumerate(aj):
            if axis_j is not None:
                theta[axis_j] = b
            values[p, q] = full_mse(expr, dataset, theta, penalty)
    name_j = expr.parameters[axis_j] if axis_j is not None else None
    return LandscapeGrid(values, expr.parameters[axis_i], name_j, ai, aj, center, penalty)


@dataclass
class BasinReport:
    count: int
    labels: np.ndarray
    floors: np.ndarray
    floor_cells: list[tuple[int, int]]
    saddles: list[tuple[int, int, float]]  # (basin, basin, merge level)
    escape_saddle: np.ndarray
    escape_height: np.ndarray
    barriers: np.ndarray | None

    def barrier(self, a: int, b: int) -> float:
        """Lowest possible maximum loss along any grid path joining the basins."""
        if a == b:
            return float(self.floors[a])
        if self.barriers is not None:
            return float(self.barriers[a, b])
        raise ValueError("pairwise barriers not stored for this many basins")

    def to_dict(self) -> dict:
        return {
            "basins": self.count,
            "floors": [float(f) for f in self.floors],
            "floor_cells": [list(c) for c in self.floor_cells],
            "saddles": [[int(a), int(b), float(v)] for a, b, v in self.saddles],
            "escape_height": [float(h) for h in self.escape_height],
        }


_NEIGHBOURS = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


class _UnionFind:
    def __init__(self, n):
        self.parent = list(range(n))

    def find(self, a):
        root = a
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[a] != root:
            self.parent[a], a = root, self.parent[a]
        return root


def detect_basins(grid, sentinel: float = PENALTY_LOSS, max_pairwise: int = 500) -> BasinReport:
    """Basins of a loss grid by steepest-descent assignment (8-neighbour).

    Connected flat regions with no lower neighbour count as one minimum.
    Barriers come from a threshold sweep: cells are added in increasing
    loss order and two basins' barrier is the level at which they join.
    The deepest basin reports an escape height of 0.
    """
    V = np.array(grid.values if isinstance(grid, LandscapeGrid) else grid, dtype=float)
    if V.ndim == 1:
        V = V[:, None]
    V = np.where(np.isfinite(V), V, sentinel)
    if np.all(V >= sentinel):
        raise ValueError("grid is entirely invalid")
    R, C = V.shape
    N = R * C
    flat = V.ravel()

    def nbrs(idx):
        r, c = divmod(idx, C)
        for dr, dc in _NEIGHBOURS:
            rr, cc = r + dr, c + dc
            if 0 <= rr < R and 0 <= cc < C:
                yield rr * C + cc

    # steepest strictly-lower neighbour (ties to lowest index)
    down = np.full(N, -1)
    for i in range(N):
        best, best_v = -1, flat[i]
        for j in nbrs(i):
            if flat[j] < best_v or (flat[j] == best_v and best != -1 and j < best):
                best, best_v = j, flat[j]
        down[i] = best

    # flat components of equal value
    uf = _UnionFind(N)
    for i in range(N):
        for j in nbrs(i):
            if flat[j] == flat[i]:
                ri, rj = uf.find(i), uf.find(j)
                if ri != rj:
                    uf.parent[max(ri, rj)] = min(ri, rj)
    comp = np.array([uf.find(i) for i in range(N)])
    exit_of: dict[int, int] = {}
    for i in range(N):
        if down[i] >= 0 and comp[i] not in exit_of:
            exit_of[comp[i]] = i
    basin_of_comp: dict[int, int] = {}
    for i in range(N):
        if comp[i] not in exit_of and comp[i] not in basin_of_comp:
            basin_of_comp[comp[i]] = len(basin_of_comp)
    for i in range(N):
        if down[i] < 0 and comp[i] in exit_of:
            down[i] = exit_of[comp[i]]

    labels = np.full(N, -1)
    for i in range(N):
        path = []
        j = i
        while labels[j] < 0 and down[j] >= 0:
            path.append(j)
            j = down[j]
        lab = labels[j] if labels[j] >= 0 else basin_of_comp[comp[j]]
        labels[j] = lab
        for p in path:
            labels[p] = lab
    K = len(basin_of_comp)
    floors = np.full(K, np.inf)
    floor_cells = [(0, 0)] * K
    for i in range(N):
        b = labels[i]
        if flat[i] < floors[b]:
            floors[b] = flat[i]
            floor_cells[b] = divmod(i, C)

    # threshold sweep for barriers
    order = np.lexsort((np.arange(N), flat))
    sweep = _UnionFind(N)
    active = np.zeros(N, bool)
    members: dict[int, list[int]] = {}
    deepest: dict[int, int] = {}
    barriers = np.full((K, K), np.inf) if K <= max_pairwise else None
    if barriers is not None:
        np.fill_diagonal(barriers, floors)
    escape = np.full(K, np.nan)
    saddles = []
    for i in order:
        active[i] = True
        level = flat[i]
        root = i
        lab = labels[i]
        own = [lab] if floor_cells[lab] == divmod(int(i), C) else []
        members[root] = own
        deepest[root] = lab if own else -1
        for j in nbrs(i):
            if not active[j]:
                continue
            ra, rb = sweep.find(root), sweep.find(j)
            if ra == rb:
                continue
            ma, mb = members[ra], members[rb]
            if ma and mb:
                da, db = deepest[ra], deepest[rb]
                saddles.append((da, db, float(level)))
                loser = db if (floors[da], da) < (floors[db], db) else da
                escape[loser] = level
                if barriers is not None:
                    for a in ma:
                        for b in mb:
                            barriers[a, b] = barriers[b, a] = level
            new_root, old = (ra, rb) if ra < rb else (rb, ra)
            sweep.parent[old] = new_root
            merged = members[ra] + members[rb]
            cand = [d for d in (deepest[ra], deepest[rb]) if d >= 0]
            members[new_root] = merged
            deepest[new_root] = min(cand, key=lambda b: (floors[b], b)) if cand else -1
            members.pop(old, None)
            deepest.pop(old, None)
            root = new_root
    escape_height = np.where(np.isnan(escape), 0.0, escape - floors)
    return BasinReport(K, labels.reshape(R, C), floors, floor_cells, saddles,
                       np.where(np.isnan(escape), floors, escape), escape_height, barriers)
