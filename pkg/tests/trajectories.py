"""Synthetic search trajectories with planted lost candidates."""

import json

import numpy as np

from sagefit.expr import Dataset

TRUE_TEXT = "a*sin(b*x) + c"


def sine_dataset(n=80):
    x = np.linspace(0.0, 4.0, n)
    return Dataset(x[:, None], 2.5 * np.sin(1.3 * x) + 0.5, ("x",))


def line(expr, params, loss, theta=None):
    return json.dumps({"expression": expr, "variables": ["x"], "parameters": params, "loss": loss,
                       "theta": theta if theta is not None else [1.0] * len(params)})


def honest(n_intervals=3, per_interval=3):
    """Each update is followed by nested sub-models of itself, which can never
    refit better than the incumbent."""
    out = [line("a", ["a"], 100.0)]
    loss = 50.0
    for k in range(n_intervals):
        out.append(line("a*x + b", ["a", "b"], loss))
        for j in range(per_interval):
            out.append(line("a*x" if j % 2 else "b + 0*x", ["a"] if j % 2 else ["b"], loss + 10 + j))
        loss /= 2
    return out


def planted(k, n_intervals=3, per_interval=3):
    """Like :func:`honest` but ``k`` discarded candidates carry the true
    structure with sabotaged parameters and a terrible recorded loss."""
    lines = honest(n_intervals, per_interval)
    slots = [i for i, ln in enumerate(lines) if json.loads(ln)["expression"] in ("a*x", "b + 0*x")]
    assert k <= len(slots)
    for i in slots[:k]:
        lines[i] = line(TRUE_TEXT, ["a", "b", "c"], 1e6, [0.01, 9.0, -3.0])
    return lines, len(slots)
