import json
import math

import numpy as np
import pytest

from sagefit.io import DataError, dump_json, file_digest, manifest, read_dataset_csv


def write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_read_basic(tmp_path):
    p = write(tmp_path, "x,z,y\n1,2,3\n4,5,6\n")
    d = read_dataset_csv(p)
    assert d.column_names == ("x", "z")
    np.testing.assert_array_equal(d.inputs, [[1, 2], [4, 5]])
    np.testing.assert_array_equal(d.targets, [3, 6])


def test_read_selects_variables(tmp_path):
    p = write(tmp_path, "x,z,out\n1,2,3\n")
    d = read_dataset_csv(p, target="out", variables=["z"])
    assert d.column_names == ("z",) and d.inputs[0, 0] == 2


@pytest.mark.parametrize("text", [
    "x,y\n",
    "x,q\n1,2\n",
    "x,y\n1,abc\n",
    "x,y\n1,nan\n",
    "x,y\n1\n",
])
def test_read_errors(tmp_path, text):
    with pytest.raises(DataError):
        read_dataset_csv(write(tmp_path, text))


def test_missing_file(tmp_path):
    with pytest.raises(DataError):
        read_dataset_csv(tmp_path / "nope.csv")


def test_missing_variable_column(tmp_path):
    with pytest.raises(DataError):
        read_dataset_csv(write(tmp_path, "x,y\n1,2\n"), variables=["t"])


def test_manifest_and_digest(tmp_path):
    p = write(tmp_path, "x,y\n1,2\n")
    m = manifest("fit", {"k": 1}, 3, [str(p)])
    assert m["inputs"][str(p)] == file_digest(p)
    assert "wall_time" not in m and m["seed"] == 3


def test_dump_json_cleans_values(tmp_path):
    text = dump_json({"a": np.float64(1.5), "b": math.inf, "c": math.nan, "d": np.arange(2)}, tmp_path / "o.json")
    obj = json.loads(text)
    assert obj == {"schema": 1, "a": 1.5, "b": "inf", "c": None, "d": [0, 1]}
    assert json.loads((tmp_path / "o.json").read_text()) == obj
