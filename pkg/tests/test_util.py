"""Canonical JSON, config hashing, and CSV round-trips."""

import json

import pytest

from g3dpack import util


def test_canonical_json_is_key_order_independent():
    a = util.canonical_json({"b": 1, "a": [1, 2], "c": {"y": 0, "x": 1}})
    b = util.canonical_json({"c": {"x": 1, "y": 0}, "a": [1, 2], "b": 1})
    assert a == b
    assert json.loads(a) == {"a": [1, 2], "b": 1, "c": {"x": 1, "y": 0}}


def test_canonical_json_rejects_nan():
    with pytest.raises(ValueError):
        util.canonical_json({"x": float("nan")})


def test_config_hash_stable_and_sensitive():
    base = {"seed": 3, "layout": "grid"}
    assert util.config_hash(base) == util.config_hash(dict(reversed(base.items())))
    assert util.config_hash(base) != util.config_hash({**base, "seed": 4})
    assert len(util.config_hash(base)) == 12


def test_float_formatting_round_trips():
    for v in (0.1, 1e-17, 1.6e-2, 123456.789, -0.0):
        assert float(util.fmt(v)) == v


def test_csv_round_trip(tmp_path):
    rows = [[0, "W", 0.25], [1, "P", 1e-9]]
    comments = (util.provenance_comment("abc123def456", 7),)
    path = tmp_path / "log.csv"
    util.write_csv(path, ("iter", "stage", "loss"), rows, comments)
    fields, got, got_comments = util.read_csv(path)
    assert fields == ["iter", "stage", "loss"]
    assert [[int(r[0]), r[1], float(r[2])] for r in got] == rows
    assert got_comments and "config_hash=abc123def456" in got_comments[0]
    assert "seed=7" in got_comments[0]


def test_write_csv_is_byte_stable(tmp_path):
    rows = [[1, 2.5], [2, 3.5]]
    p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
    util.write_csv(p1, ("x", "y"), rows)
    util.write_csv(p2, ("x", "y"), [list(r) for r in rows])
    assert p1.read_bytes() == p2.read_bytes()


def test_json_round_trip(tmp_path):
    obj = {"z": [1, 2, 3], "a": {"nested": 0.125}}
    path = tmp_path / "out.json"
    util.write_json(path, obj)
    assert util.read_json(path) == obj
    text = path.read_text()
    assert text.index('"a"') < text.index('"z"')


def test_fmt_coerces_numpy_scalars():
    import numpy as np

    assert util.fmt(np.float64(0.1)) == "0.1"
    assert util.fmt(np.int64(42)) == "42"
    assert util.fmt(np.float64(1.6e-2)) == "0.016"
