"""Command-line interface: ``sagefit fit|bench|lostrate|landscape|gen-bank``.

Exit codes: 0 success (penalty-score fits included), 2 usage error,
3 data error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from .bank import generate_bank, load_bank_datasets, read_bank
from .diagnostics import detect_basins, landscape_slice, read_trajectory, score_bank, trajectory_lost_rate
from .evaluator import SolverConfig, evaluate_with
from .expr import ExpressionError, parse_expression
from .fsfps import SamplingConfig
from .io import DataError, dump_json, manifest, read_dataset_csv
from .lm import LocalSolveConfig

EVALUATORS = {
    "sage": "sage",
    "lm-multi": "lm_trf_multi",
    "lm_trf_multi": "lm_trf_multi",
    "gd-multi": "gd_multi",
    "gd_multi": "gd_multi",
    "single": "single_start_lm",
    "single_start_lm": "single_start_lm",
}


class UsageError(Exception):
    pass


def _names(text: str | None) -> list[str]:
    if not text:
        return []
    return [t.strip() for t in text.split(",") if t.strip()]


def _floats(text: str | None) -> list[float] | None:
    if text is None:
        return None
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from None


def _interval(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(v) for v in text.split(":"))
    except ValueError:
        raise UsageError(f"expected LO:HI, got {text!r}") from None
    if not lo < hi:
        raise UsageError(f"empty interval {text!r}")
    return lo, hi


def _bounds(text: str | None) -> dict[str, tuple[float, float]]:
    """``a=-5:5,b=0:12`` -> {'a': (-5, 5), 'b': (0, 12)}"""
    out = {}
    for item in _names(text):
        if "=" not in item:
            raise UsageError(f"bounds entries look like name=lo:hi, got {item!r}")
        name, rng = item.split("=", 1)
        out[name.strip()] = _interval(rng)
    return out


def _evaluator(name: str) -> str:
    try:
        return EVALUATORS[name]
    except KeyError:
        raise UsageError(f"unknown evaluator {name!r}; choose from {sorted(EVALUATORS)}") from None


def _config(args) -> SolverConfig:
    sampling = SamplingConfig(M=args.m, K=args.k, seed=args.seed)
    local = LocalSolveConfig(max_iterations=args.max_iter)
    return SolverConfig(sampling=sampling, local=local, bounds=_bounds(getattr(args, "bounds", None)) or None,
                        time_budget=args.time_budget)


def _expression(args):
    try:
        return parse_expression(args.expr, _names(args.vars), _names(args.params))
    except ExpressionError as exc:
        raise UsageError(str(exc)) from None


def _emit(args, report: dict, human: str, wall_time: float, inputs=()) -> None:
    text = dump_json(report)
    if args.out:
        Path(args.out).write_text(text + "\n")
        side = dict(report.get("manifest", {}))
        side["wall_time"] = wall_time
        dump_json({"manifest": side}, str(args.out) + ".manifest.json")
    if args.json:
        sys.stdout.write(text + "\n")
    else:
        sys.stdout.write(human.rstrip() + "\n")


def cmd_fit(args) -> int:
    t0 = time.perf_counter()
    expr = _expression(args)
    data = read_dataset_csv(args.data, args.target, expr.variables)
    config = _config(args)
    warm = _floats(args.warm_start)
    if warm is not None and len(warm) != expr.n_params:
        raise UsageError(f"--warm-start needs {expr.n_params} values")
    strategy = _evaluator(args.evaluator)
    result = evaluate_with(expr, data, strategy, config, warm_start=warm)
    report = {
        "manifest": manifest("fit", config.snapshot(), args.seed, [args.data]),
        "expression": expr.serialize(),
        **result.to_dict(timing=args.timing),
    }
    human = (f"score {result.score:.6g} ({result.evaluator_tag}, {'valid' if result.valid else 'invalid'})\n"
             + "\n".join(f"  {k} = {v:.10g}" for k, v in zip(expr.parameters, result.theta)))
    _emit(args, report, human, time.perf_counter() - t0, [args.data])
    return 0


def cmd_bench(args) -> int:
    t0 = time.perf_counter()
    bank = read_bank(args.bank)
    if bank.skipped:
        print(f"warning: skipped {bank.skipped} malformed bank line(s)", file=sys.stderr)
    if not bank.entries:
        raise DataError(f"{args.bank}: no usable entries")
    if args.cold_start is not None:
        bank.cold_start = args.cold_start
    datasets = load_bank_datasets(bank, args.bank)
    evaluators = [_evaluator(e) for e in _names(args.evaluators)]
    if not evaluators:
        raise UsageError("--evaluators is empty")
    config = _config(args)
    scores = score_bank(bank, datasets, evaluators, config, args.tau)
    summary = scores.summary()
    if not args.timing:
        for row in summary.values():
            row.pop("mean_time")
    rows = scores.rows()
    report = {
        "manifest": manifest("bench", config.snapshot(), args.seed, [args.bank]),
        "tau": args.tau,
        "cold_start": bank.cold_start,
        "n_entries": len(bank.entries),
        "skipped_lines": bank.skipped,
        "summary": summary,
        "entries": rows,
    }
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "scores.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
        dump_json(report, out / "scores.json")
    lines = [f"{'evaluator':<16}{'lost rate':>10}{'mean logNMSE':>14}{'median logNMSE':>16}"]
    for e, row in summary.items():
        lines.append(f"{e:<16}{row['lost_rate']:>10.3f}{row['mean_log_nmse']:>14.3f}{row['median_log_nmse']:>16.3f}")
    _emit(args, report, "\n".join(lines), time.perf_counter() - t0, [args.bank])
    return 0


def cmd_lostrate(args) -> int:
    t0 = time.perf_counter()
    try:
        with open(args.trajectory) as fh:
            record = read_trajectory(fh)
    except OSError as exc:
        raise DataError(f"cannot read {args.trajectory}: {exc}") from None
    if not record.updates:
        raise DataError("trajectory has no reference updates")
    variables = None
    for c in record.candidates:
        if c.parsed is not None:
            variables = c.parsed.variables
            break
    data = read_dataset_csv(args.data, args.target, variables)
    config = _config(args)
    try:
        rep = trajectory_lost_rate(record, data, config=config)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    report = {
        "manifest": manifest("lostrate", config.snapshot(), args.seed, [args.trajectory, args.data]),
        "n_candidates": len(record.candidates),
        "n_updates": len(record.updates),
        "unparseable": sum(1 for c in record.candidates if c.parsed is None),
        **rep.to_dict(),
    }
    human = f"lost rate {rep.rate:.4f} ({rep.n_lost}/{rep.n_compared}); mean per-interval {rep.mean_interval_rate:.4f}"
    _emit(args, report, human, time.perf_counter() - t0, [args.trajectory, args.data])
    return 0


def _axis(expr, token: str) -> int:
    token = token.strip()
    if token in expr.parameters:
        return expr.parameters.index(token)
    try:
        return int(token)
    except ValueError:
        raise UsageError(f"unknown axis {token!r}") from None


def cmd_landscape(args) -> int:
    t0 = time.perf_counter()
    expr = _expression(args)
    if args.grid < 2:
        raise UsageError("--grid must be at least 2")
    data = read_dataset_csv(args.data, args.target, expr.variables)
    center = _floats(args.center)
    if center is None or len(center) != expr.n_params:
        raise UsageError(f"--center needs {expr.n_params} values")
    axes = [_axis(expr, t) for t in args.axes.split(",")]
    ranges = [_interval(r) for r in args.range.split(",")]
    if len(axes) not in (1, 2) or len(ranges) != len(axes):
        raise UsageError("--axes and --range need one or two matching entries")
    try:
        grid = landscape_slice(expr, data, center, axes[0], axes[1] if len(axes) > 1 else None,
                               ranges[0], ranges[1] if len(ranges) > 1 else None, args.grid)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    grid.write_csv(args.csv)
    report = {
        "manifest": manifest("landscape", {"center": center, "axes": axes, "ranges": ranges, "grid": args.grid},
                             args.seed, [args.data]),
        "csv": str(args.csv),
        "min_loss": float(grid.values.min()),
        "argmin": [int(v) for v in np.unravel_index(np.argmin(grid.values), grid.values.shape)],
    }
    if args.basins:
        report["basins"] = detect_basins(grid).to_dict()
    dump_json({"manifest": {**report["manifest"], "wall_time": time.perf_counter() - t0}},
              str(args.csv) + ".manifest.json")
    human = f"wrote {args.csv}; min loss {report['min_loss']:.6g} at cell {report['argmin']}"
    if args.basins:
        human += f"; {report['basins']['basins']} basin(s)"
    _emit(args, report, human, time.perf_counter() - t0, [args.data])
    return 0


def cmd_gen_bank(args) -> int:
    t0 = time.perf_counter()
    bank, _, problems = generate_bank(args.problems, args.per_problem, args.seed, args.out_dir)
    counts = [e.n_params for e in bank.entries]
    report = {
        "manifest": manifest("gen-bank", {"problems": args.problems, "per_problem": args.per_problem}, args.seed),
        "bank": str(Path(args.out_dir) / "bank.jsonl"),
        "n_entries": len(bank.entries),
        "n_params": {"min": min(counts), "max": max(counts), "median": float(np.median(counts))} if counts else {},
    }
    human = f"wrote {report['n_entries']} entries to {report['bank']}"
    _emit(args, report, human, time.perf_counter() - t0)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sagefit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, solver=True):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--json", action="store_true", help="print the JSON report to stdout")
        p.add_argument("--out", help="also write the JSON report here (plus a .manifest.json sidecar)")
        p.add_argument("--timing", action="store_true", help="include wall-clock fields in the report")
        if solver:
            p.add_argument("--m", type=int, default=100, help="oversampled candidates")
            p.add_argument("--k", type=int, default=8, help="local solves")
            p.add_argument("--max-iter", type=int, default=100)
            p.add_argument("--time-budget", type=float, default=None, help="seconds per evaluation")
            p.add_argument("--bounds", help="per-parameter bounds, e.g. a=-5:5,b=0:12")

    def expression(p):
        p.add_argument("--expr", required=True)
        p.add_argument("--vars", required=True, help="comma-separated variable names")
        p.add_argument("--params", default="", help="comma-separated parameter names")
        p.add_argument("--data", required=True, help="CSV with a header row")
        p.add_argument("--target", default="y")

    p = sub.add_parser("fit", help="fit one candidate expression")
    expression(p)
    p.add_argument("--evaluator", default="sage", choices=["sage", "lm-multi", "gd-multi", "single"])
    p.add_argument("--warm-start", help="comma-separated full parameter vector")
    common(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("bench", help="score evaluators on a candidate bank")
    p.add_argument("--bank", required=True)
    p.add_argument("--evaluators", default="sage,lm-multi,gd-multi")
    p.add_argument("--tau", type=float, default=3.0)
    p.add_argument("--cold-start", dest="cold_start", action="store_true", default=None)
    p.add_argument("--no-cold-start", dest="cold_start", action="store_false")
    p.add_argument("--out-dir")
    common(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("lostrate", help="refit-based lost rate of a search trajectory")
    p.add_argument("--trajectory", required=True, help="JSONL, one candidate per line")
    p.add_argument("--data", required=True)
    p.add_argument("--target", default="y")
    common(p)
    p.set_defaults(func=cmd_lostrate)

    p = sub.add_parser("landscape", help="emit a 2-D loss grid as CSV")
    expression(p)
    p.add_argument("--center", required=True, help="comma-separated parameter vector")
    p.add_argument("--axes", required=True, help="i,j as indices or parameter names")
    p.add_argument("--range", required=True, help="lo:hi[,lo:hi]")
    p.add_argument("--grid", type=int, default=41)
    p.add_argument("--csv", required=True, help="output grid path")
    p.add_argument("--basins", action="store_true")
    common(p, solver=False)
    p.set_defaults(func=cmd_landscape)

    p = sub.add_parser("gen-bank", help="generate a synthetic candidate bank")
    p.add_argument("--problems", type=int, default=20)
    p.add_argument("--per-problem", type=int, default=10)
    p.add_argument("--out-dir", required=True)
    common(p, solver=False)
    p.set_defaults(func=cmd_gen_bank)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"sagefit: error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"sagefit: data error: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        # remaining ValueErrors come from dataset/config validation
        print(f"sagefit: data error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
