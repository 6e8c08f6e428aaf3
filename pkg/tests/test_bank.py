import json

import numpy as np
import pytest

from sagefit.bank import (
    ARCHETYPES, Structure, generate_bank, load_bank_datasets, make_dataset, read_bank, write_bank,
)
from sagefit.diagnostics import BankEntry, CandidateBank
from sagefit.expr import parse_expression


def test_structure_render():
    s = Structure("oscillator", (0, 3))
    text, names = s.render()
    assert text == "p0*exp(-p1*x)*sin(p2*x + p3) + p4*x"
    assert names == ["p0", "p1", "p2", "p3", "p4"] and s.n_params == 5


def test_make_dataset_is_noisy_truth():
    rng = np.random.default_rng(0)
    data, truth = make_dataset(Structure("kinetics", (0, 3)), rng)
    assert data.n == 64 and truth["archetype"] == "kinetics"
    assert len(truth["theta"]) == 3


def test_generate_small_bank(tmp_path):
    bank, datasets, problems = generate_bank(2, 4, seed=1, out_dir=tmp_path)
    assert 0 < len(bank.entries) <= 8
    assert all(2 <= e.n_params <= 11 for e in bank.entries)
    assert [e.index for e in bank.entries] == list(range(len(bank.entries)))
    back = read_bank(tmp_path / "bank.jsonl")
    assert [e.expression for e in back.entries] == [e.expression for e in bank.entries]
    assert back.cold_start
    loaded = load_bank_datasets(back, tmp_path / "bank.jsonl")
    for key, d in datasets.items():
        np.testing.assert_array_equal(loaded[key].targets, d.targets)
    assert len(json.loads((tmp_path / "problems.json").read_text())["problems"]) == 2


def test_generation_reproducible(tmp_path):
    generate_bank(2, 3, seed=4, out_dir=tmp_path / "a")
    generate_bank(2, 3, seed=4, out_dir=tmp_path / "b")
    assert (tmp_path / "a" / "bank.jsonl").read_bytes() == (tmp_path / "b" / "bank.jsonl").read_bytes()
    assert (tmp_path / "a" / "data" / "problem_001.csv").read_bytes() == \
        (tmp_path / "b" / "data" / "problem_001.csv").read_bytes()


def test_default_size_parameter_counts(tmp_path):
    bank, _, _ = generate_bank(20, 10, seed=0, out_dir=tmp_path)
    counts = [e.n_params for e in bank.entries]
    assert len(counts) == 200
    assert min(counts) >= 2 and max(counts) <= 11
    assert abs(np.median(counts) - 7) <= 1


def test_read_bank_skips_malformed(tmp_path):
    good = BankEntry(0, "a*x", ["x"], ["a"], "d.csv")
    write_bank(tmp_path / "b.jsonl", CandidateBank([good]))
    with open(tmp_path / "b.jsonl", "a") as fh:
        fh.write("{broken\n")
        fh.write(json.dumps({"expression": "a*(x", "variables": ["x"], "parameters": ["a"], "data": "d.csv"}) + "\n")
        fh.write(json.dumps({"variables": ["x"]}) + "\n")
    bank = read_bank(tmp_path / "b.jsonl")
    assert len(bank.entries) == 1 and bank.skipped == 3


def test_archetype_templates_parse():
    for name, lib in ARCHETYPES.items():
        s = Structure(name, tuple(range(len(lib))))
        text, names = s.render()
        assert len(names) == s.n_params
        assert parse_expression(text, ["x"], names).n_params == len(names)
