"""Dataset files and run manifests."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .expr import Dataset


class DataError(ValueError):
    """Input data that cannot be turned into a valid dataset."""


def read_dataset_csv(path, target: str = "y", variables: Sequence[str] | None = None) -> Dataset:
    """Read a headed CSV; ``target`` names the output column and the other
    columns (or ``variables``, in that order) become inputs."""
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    rows = [r for r in rows if r and any(cell.strip() for cell in r)]
    if len(rows) < 2:
        raise DataError(f"{path}: need a header and at least one data row")
    header = [h.strip() for h in rows[0]]
    if target not in header:
        raise DataError(f"{path}: no target column {target!r} in header {header}")
    inputs = list(variables) if variables is not None else [h for h in header if h != target]
    missing = [v for v in inputs if v not in header]
    if missing:
        raise DataError(f"{path}: missing columns {missing}")
    idx = [header.index(v) for v in inputs]
    t = header.index(target)
    try:
        table = np.array([[float(r[j]) for j in range(len(header))] for r in rows[1:]], dtype=float)
    except (ValueError, IndexError) as exc:
        raise DataError(f"{path}: malformed row ({exc})") from None
    if not np.all(np.isfinite(table)):
        raise DataError(f"{path}: non-finite values")
    return Dataset(table[:, idx].reshape(len(table), len(idx)), table[:, t], tuple(inputs))


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def manifest(command: str, config: dict, seed: int | None, inputs: Sequence[str] = ()) -> dict:
    return {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": {str(p): file_digest(p) for p in inputs},
        "version": __version__,
    }


def _clean(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None if math.isnan(obj) else ("inf" if obj > 0 else "-inf")
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.generic):
        return _clean(obj.item())
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    return obj


def dump_json(obj, path=None) -> str:
    text = json.dumps({"schema": 1, **_clean(obj)}, indent=2, sort_keys=False)
    if path is not None:
        Path(path).write_text(text + "\n")
    return text
