"""Function-space farthest-point start selection.

Candidate nonlinear parameter vectors are oversampled, mapped to the
prediction vectors they induce on the training inputs, and a small set of
starts is picked greedily so the predictions are as far apart as possible.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .expr import Dataset
from .varpro import PENALTY_LOSS, SeparableForm, project

DEFAULT_BOUNDS = (-10.0, 10.0)


class NoViableStartError(RuntimeError):
    pass


@dataclass(frozen=True)
class SamplingConfig:
    M: int = 100
    K: int = 8
    distance_epsilon: float = 1e-12
    seed: int = 0
    gaussian_share: float = 0.4
    log_share: float = 0.2
    sigma_fraction: float = 0.25
    log_range: tuple[float, float] = (1e-2, 1e2)

    def __post_init__(self):
        if not 1 <= self.K <= self.M:
            raise ValueError(f"need 1 <= K <= M, got K={self.K}, M={self.M}")
        if self.distance_epsilon <= 0:
            raise ValueError("distance_epsilon must be positive")


@dataclass(frozen=True)
class StartCandidate:
    index: int
    beta: np.ndarray
    fingerprint: np.ndarray
    loss: float
    valid: bool
    row_mask: np.ndarray


def oversample(warm_start, lower, upper, config: SamplingConfig, rng: np.random.Generator) -> np.ndarray:
    """Draw ``config.M`` vectors inside ``[lower, upper]``.

    Mix: Gaussian perturbations of ``warm_start`` (sigma a quarter of the box
    width), uniform draws over the box, and sign-symmetric log-uniform
    magnitudes. Without a warm start its share goes to the uniform leg.
    """
    lower = np.asarray(lower, dtype=float).ravel()
    upper = np.asarray(upper, dtype=float).ravel()
    d = lower.shape[0]
    if d == 0:
        return np.zeros((1, 0))
    if not (np.all(np.isfinite(lower)) and np.all(np.isfinite(upper))):
        raise ValueError("bounds must be finite")
    if np.any(lower > upper):
        raise ValueError("lower bound exceeds upper bound")
    M = config.M
    n_gauss = int(round(config.gaussian_share * M))
    n_log = int(round(config.log_share * M))
    if warm_start is None:
        n_gauss = 0
    n_uni = M - n_gauss - n_log

    parts = []
    if n_gauss:
        warm = np.clip(np.asarray(warm_start, dtype=float).ravel(), lower, upper)
        sigma = config.sigma_fraction * (upper - lower)
        parts.append(np.clip(warm + sigma * rng.standard_normal((n_gauss, d)), lower, upper))
    parts.append(rng.uniform(lower, upper, size=(n_uni, d)))
    if n_log:
        lo, hi = np.log10(config.log_range[0]), np.log10(config.log_range[1])
        mags = 10.0 ** rng.uniform(lo, hi, size=(n_log, d))
        signs = rng.choice([-1.0, 1.0], size=(n_log, d))
        parts.append(np.clip(signs * mags, lower, upper))
    return np.vstack(parts)


def fingerprint(candidates, form: SeparableForm, dataset: Dataset, penalty: float = PENALTY_LOSS) -> list[StartCandidate]:
    out = []
    for i, beta in enumerate(np.atleast_2d(np.asarray(candidates, dtype=float))):
        p = project(form, dataset, beta, penalty)
        mask = p.row_mask & np.isfinite(p.prediction)
        out.append(StartCandidate(i, p.beta, p.prediction, p.loss, p.valid, mask))
    return out


def function_distance(fi, fj, y, epsilon: float = 1e-12, mask_i=None, mask_j=None) -> float:
    """Normalized distance ``|fi - fj| / (|y| + eps)`` over shared valid rows,
    with the squared sum rescaled by ``n / n_shared``."""
    fi, fj = np.asarray(fi, dtype=float), np.asarray(fj, dtype=float)
    n = fi.shape[0]
    both = np.ones(n, bool) if mask_i is None else np.asarray(mask_i, bool)
    if mask_j is not None:
        both = both & np.asarray(mask_j, bool)
    shared = int(both.sum())
    if shared == 0:
        return 0.0
    sq = float(np.sum((fi[both] - fj[both]) ** 2)) * n / shared
    return np.sqrt(sq) / (np.linalg.norm(y) + epsilon)


def _distances_to(F: np.ndarray, masks: np.ndarray, j: int, denom: float) -> np.ndarray:
    both = masks & masks[j]
    shared = both.sum(axis=1)
    diff = np.where(both, F - np.where(masks[j], F[j], 0.0), 0.0)
    sq = np.einsum("ij,ij->i", diff, diff)
    with np.errstate(divide="ignore", invalid="ignore"):
        sq = np.where(shared > 0, sq * F.shape[1] / shared, 0.0)
    return np.sqrt(sq) / denom


def fs_fps_select(candidates: Sequence[StartCandidate], K: int, y, epsilon: float = 1e-12) -> list[StartCandidate]:
    """Greedy farthest-point selection in prediction space.

    The first pick is the valid candidate with the lowest loss; each later
    pick maximizes its minimum distance to the picks so far. Ties go to the
    lower index. Returns fewer than ``K`` when fewer are valid.
    """
    valid = [c for c in candidates if c.valid]
    if not valid:
        raise NoViableStartError("no valid start candidate")
    F = np.vstack([np.where(c.row_mask, c.fingerprint, 0.0) for c in valid])
    masks = np.vstack([c.row_mask for c in valid])
    denom = float(np.linalg.norm(np.asarray(y, dtype=float))) + epsilon
    losses = np.array([c.loss for c in valid])
    first = int(np.argmin(losses))
    picked = [first]
    min_d = _distances_to(F, masks, first, denom)
    taken = np.zeros(len(valid), bool)
    taken[first] = True
    while len(picked) < min(K, len(valid)):
        score = np.where(taken, -np.inf, min_d)
        j = int(np.argmax(score))
        picked.append(j)
        taken[j] = True
        min_d = np.minimum(min_d, _distances_to(F, masks, j, denom))
    return [valid[j] for j in picked]
