"""Synthetic structure-progress banks.

Each problem has a ground-truth equation built from one of four
scientific archetypes. A scripted mutation search, scored by a deliberately
weak single-start fitter, walks through candidate structures; candidates
that improve the search's best-so-far score are kept as bank entries.
"""

from __future__ import annotations

import csv
import json
import math
import os
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .diagnostics import BankEntry, CandidateBank
from .evaluator import SolverConfig, baseline_evaluate
from .expr import Dataset, ExpressionError, evaluate, parse_expression
from .lm import LocalSolveConfig

# placeholders: A amplitude, k rate, w frequency, h phase, e exponent, m midpoint
ARCHETYPES: dict[str, list[str]] = {
    "kinetics": ["A*exp(-k*x)", "A*x*exp(-k*x)", "A/(1 + k*x)", "A*x", "A", "A*exp(-k*x^2)"],
    "growth": ["A/(1 + exp(-k*(x - m)))", "A*x", "A", "A*log(x)", "A*exp(-k*x)", "A*x/(m + x)"],
    "oscillator": ["A*exp(-k*x)*sin(w*x + h)", "A*sin(w*x)", "A*cos(w*x)", "A*x", "A", "A*exp(-k*x)"],
    "stress": ["A*x^e", "A*log(x)", "A*x", "A", "A*exp(-k*x)", "A*(1 - exp(-k*x))"],
}

_RANGES = {"A": (0.5, 4.0), "k": (0.3, 2.5), "w": (1.0, 5.0), "h": (-1.5, 1.5), "e": (0.3, 2.2), "m": (1.0, 4.0)}
_SLOT = re.compile(r"\b([Akwhem])\b")

X_RANGE = (0.2, 5.0)
N_ROWS = 64
NOISE_FRACTION = 0.01
PARAM_RANGE = (2, 11)


@dataclass
class Structure:
    archetype: str
    terms: tuple[int, ...]  # indices into the archetype library

    def render(self) -> tuple[str, list[str]]:
        """Sum of terms with parameters renamed p0, p1, ... in order of use."""
        names: list[str] = []
        pieces = []
        for t in self.terms:
            template = ARCHETYPES[self.archetype][t]

            def fresh(match):
                name = f"p{len(names)}"
                names.append(name)
                return name

            pieces.append(_SLOT.sub(fresh, template))
        return " + ".join(pieces), names

    def slots(self) -> list[str]:
        out = []
        for t in self.terms:
            out.extend(_SLOT.findall(ARCHETYPES[self.archetype][t]))
        return out

    @property
    def n_params(self) -> int:
        return len(self.slots())


def _draw_value(slot: str, rng) -> float:
    lo, hi = _RANGES[slot]
    v = rng.uniform(lo, hi)
    if slot == "A" and rng.random() < 0.5:
        v = -v
    return float(v)


def ground_truth(archetype: str, rng, target_params: int) -> Structure:
    lib = ARCHETYPES[archetype]
    best = None
    for _ in range(200):
        n_terms = int(rng.integers(2, 5))
        terms = tuple(sorted(rng.choice(len(lib), size=n_terms, replace=False).tolist()))
        s = Structure(archetype, terms)
        gap = abs(s.n_params - target_params)
        if best is None or gap < best[0]:
            best = (gap, s)
        if gap == 0:
            break
    return best[1]


def make_dataset(structure: Structure, rng) -> tuple[Dataset, dict]:
    text, names = structure.render()
    expr = parse_expression(text, ["x"], names)
    values = [_draw_value(slot, rng) for slot in structure.slots()]
    x = np.sort(rng.uniform(*X_RANGE, N_ROWS))
    clean = Dataset(x[:, None], np.zeros(N_ROWS), ("x",))
    y, mask = evaluate(expr, clean, values)
    if not mask.all():
        raise ValueError("ground truth not finite on the sampled inputs")
    y = y + NOISE_FRACTION * np.std(y) * rng.standard_normal(N_ROWS)
    truth = {"expression": text, "parameters": names, "theta": values, "archetype": structure.archetype}
    return Dataset(x[:, None], y, ("x",)), truth


def mutate(structure: Structure, truth: Structure, rng) -> Structure:
    lib = ARCHETYPES[structure.archetype]
    terms = list(structure.terms)
    move = rng.random()
    if move < 0.3:
        # borrow a term the incumbent lacks, biased toward useful ones
        pool = [t for t in truth.terms if t not in terms] or [t for t in range(len(lib)) if t not in terms]
        if pool:
            terms.append(int(rng.choice(pool)))
    elif move < 0.55 and len(terms) > 1:
        terms.pop(int(rng.integers(len(terms))))
    elif move < 0.85:
        i = int(rng.integers(len(terms)))
        terms[i] = int(rng.integers(len(lib)))
    else:
        terms.append(int(rng.integers(len(lib))))
    return Structure(structure.archetype, tuple(sorted(set(terms))))


def weak_config(seed: int) -> SolverConfig:
    return SolverConfig(local=LocalSolveConfig(max_iterations=15), threads=1).with_seed(seed)


def search_problem(problem: int, archetype: str, truth: Structure, dataset: Dataset, per_problem: int, rng,
                   max_steps: int = 400) -> list[BankEntry]:
    """Scripted search: keep candidates that strictly improve the weak
    evaluator's best-so-far score. Restarts from a fresh random seed
    structure when a trajectory stalls."""
    lib = ARCHETYPES[archetype]
    entries: list[BankEntry] = []
    seen: set[str] = set()
    cache: dict[tuple, float] = {}
    config = weak_config(problem)

    def score(s: Structure) -> float:
        if s.terms not in cache:
            text, names = s.render()
            expr = parse_expression(text, ["x"], names)
            res = baseline_evaluate(expr, dataset, "single_start_lm", config, warm_start=np.ones(len(names)))
            cache[s.terms] = res.score if res.valid else math.inf
        return cache[s.terms]

    steps = 0
    while len(entries) < per_problem and steps < max_steps:
        # seed structure as large as the truth, sharing part of its terms
        keep = [t for t in truth.terms if rng.random() < 0.5]
        others = [t for t in range(len(lib)) if t not in keep]
        extra = rng.choice(others, size=max(len(truth.terms) - len(keep), 1), replace=False).tolist()
        start = Structure(archetype, tuple(sorted(set(keep + extra))))
        incumbent, best = start, math.inf
        stall = 0
        proposal = start
        while len(entries) < per_problem and stall < 12 and steps < max_steps:
            steps += 1
            if PARAM_RANGE[0] <= proposal.n_params <= PARAM_RANGE[1]:
                s = score(proposal)
                if s < best:
                    best, incumbent, stall = s, proposal, 0
                    text, names = proposal.render()
                    if text not in seen:
                        seen.add(text)
                        entries.append(BankEntry(0, text, ["x"], names, "", problem, f"{archetype}:step{steps}"))
                else:
                    stall += 1
            proposal = mutate(incumbent, truth, rng)
    return entries


def generate_bank(n_problems: int, per_problem: int, seed: int, out_dir) -> tuple[CandidateBank, dict[str, Dataset], list[dict]]:
    """Build ``n_problems`` problems and up to ``per_problem`` entries each,
    writing ``bank.jsonl``, ``problems.json`` and one CSV per problem."""
    rng = np.random.default_rng(seed)
    out = Path(out_dir)
    (out / "data").mkdir(parents=True, exist_ok=True)
    names = list(ARCHETYPES)
    entries: list[BankEntry] = []
    datasets: dict[str, Dataset] = {}
    problems = []
    for p in range(n_problems):
        archetype = names[p % len(names)]
        target = int(np.clip(np.round(rng.normal(7.5, 1.5)), 4, 10))
        for _ in range(50):
            truth = ground_truth(archetype, rng, target)
            try:
                data, info = make_dataset(truth, rng)
                break
            except (ValueError, ExpressionError):
                continue
        rel = f"data/problem_{p:03d}.csv"
        write_dataset_csv(out / rel, data)
        datasets[rel] = data
        info.update({"problem": p, "data": rel})
        problems.append(info)
        found = search_problem(p, archetype, truth, data, per_problem, rng)
        for e in found:
            e.data = rel
        entries.extend(found)
    for i, e in enumerate(entries):
        e.index = i
    bank = CandidateBank(entries, cold_start=True)
    write_bank(out / "bank.jsonl", bank)
    with open(out / "problems.json", "w") as fh:
        json.dump({"schema": 1, "seed": seed, "problems": problems}, fh, indent=2)
    return bank, datasets, problems


def write_dataset_csv(path, dataset: Dataset, target: str = "y") -> None:
    names = dataset.column_names or tuple(f"x{j}" for j in range(dataset.d))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(names) + [target])
        for row, t in zip(dataset.inputs, dataset.targets):
            w.writerow([repr(float(v)) for v in row] + [repr(float(t))])


def write_bank(path, bank: CandidateBank) -> None:
    with open(path, "w") as fh:
        for e in bank.entries:
            fh.write(json.dumps({"schema": 1, "cold_start": bank.cold_start, **e.to_dict()}) + "\n")


def read_bank(path) -> CandidateBank:
    """Read a bank JSONL file; malformed lines are skipped and counted."""
    entries = []
    skipped = 0
    cold = True
    with open(path) as fh:
        for i, line in enumerate(fh):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                entry = BankEntry(int(obj.get("index", i)), str(obj["expression"]), list(obj["variables"]),
                                  list(obj["parameters"]), str(obj["data"]), int(obj.get("problem", 0)),
                                  str(obj.get("provenance", "")))
                entry.parse()
                cold = bool(obj.get("cold_start", cold))
            except (ValueError, KeyError, TypeError, ExpressionError):
                skipped += 1
                continue
            entries.append(entry)
    return CandidateBank(entries, cold_start=cold, skipped=skipped)


def load_bank_datasets(bank: CandidateBank, bank_path) -> dict[str, Dataset]:
    from .io import read_dataset_csv

    base = Path(bank_path).parent
    out = {}
    for e in bank.entries:
        if e.data not in out:
            path = e.data if os.path.isabs(e.data) else base / e.data
            out[e.data] = read_dataset_csv(path)
    return out
