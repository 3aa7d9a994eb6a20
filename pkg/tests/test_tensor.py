import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from mergeforge.tensor import (CheckpointError, NamedTensorMap, TensorError, ew, fingerprint, load_checkpoint,
                               save_checkpoint)

from conftest import random_map


def test_values_are_float32_and_read_only():
    m = NamedTensorMap({"a": [1, 2, 3]})
    assert m["a"].dtype == np.float32
    with pytest.raises(ValueError):
        m["a"][0] = 5


def test_scalar_becomes_length_one():
    assert NamedTensorMap({"s": 3.0})["s"].shape == (1,)


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_non_finite_rejected_with_name(bad):
    with pytest.raises(TensorError, match="w"):
        NamedTensorMap({"w": [1.0, bad]})


def test_duplicate_and_empty_names_rejected():
    with pytest.raises(TensorError):
        NamedTensorMap([("a", [1.0]), ("a", [2.0])])
    with pytest.raises(TensorError):
        NamedTensorMap([("", [1.0])])


def test_equality_is_bit_exact():
    a = NamedTensorMap({"x": [0.0]})
    b = NamedTensorMap({"x": [-0.0]})
    assert a != b
    assert a == NamedTensorMap({"x": [0.0]})
    assert a != a.with_metadata(k="v")


def test_replace_checks_shape_and_names():
    m = NamedTensorMap({"x": np.zeros((2, 2))})
    with pytest.raises(TensorError):
        m.replace({"x": np.zeros(3)})
    with pytest.raises(TensorError):
        m.replace({"y": np.zeros((2, 2))})
    assert np.all(m.replace({"x": np.ones((2, 2))})["x"] == 1)


def test_fingerprint_tracks_content_not_metadata(rng):
    m = random_map(rng)
    assert fingerprint(m) == fingerprint(m.with_metadata(task_id="x"))
    bumped = m.replace({"t0.weight": m["t0.weight"] + 1})
    assert fingerprint(bumped) != fingerprint(m)


class TestElementwise:
    def test_add_identity_with_zero(self, rng):
        a = rng.standard_normal((3, 4)).astype(np.float32)
        assert np.array_equal(ew("add", a, np.zeros_like(a)), a)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(TensorError, match=r"\[3, 4\] vs \[4, 3\]"):
            ew("add", np.zeros((3, 4)), np.zeros((4, 3)))

    def test_sign_of_zero_is_zero(self):
        assert ew("sign", np.array([0.0, -2.0, 3.0])).tolist() == [0.0, -1.0, 1.0]

    def test_compare_gt_is_strict(self):
        assert ew("compare_gt", np.array([1.0, 2.0]), np.array([1.0, 1.0])).tolist() == [0.0, 1.0]

    def test_overflow_is_reported(self):
        big = np.full(2, 3e38, dtype=np.float32)
        with pytest.raises(TensorError, match="non-finite"):
            ew("add", big, big)

    def test_unknown_op(self):
        with pytest.raises(TensorError):
            ew("div", np.ones(1), np.ones(1))


class TestCheckpoint:
    def test_round_trip_100_random_maps(self, tmp_path):
        for seed in range(100):
            m = random_map(np.random.default_rng(seed), n_tensors=1 + seed % 4).with_metadata(seed=seed)
            save_checkpoint(m, tmp_path / "m.ntm")
            assert load_checkpoint(tmp_path / "m.ntm") == m

    def test_empty_map(self, tmp_path):
        save_checkpoint(NamedTensorMap(), tmp_path / "e.ntm")
        assert len(load_checkpoint(tmp_path / "e.ntm")) == 0

    def test_layout(self, tmp_path):
        save_checkpoint(NamedTensorMap({"a": [1.0, 2.0], "b": [[3.0]]}), tmp_path / "x.ntm")
        raw = (tmp_path / "x.ntm").read_bytes()
        (n,) = struct.unpack_from("<Q", raw)
        manifest = json.loads(raw[8:8 + n])
        assert raw[8 + n - 1:8 + n] == b"\n"
        assert [t["offset"] for t in manifest["tensors"]] == [0, 8]
        assert np.frombuffer(raw[8 + n:], "<f4").tolist() == [1.0, 2.0, 3.0]

    def test_truncated_payload(self, tmp_path):
        p = tmp_path / "x.ntm"
        save_checkpoint(NamedTensorMap({"a": np.ones(4)}), p)
        p.write_bytes(p.read_bytes()[:-4])
        with pytest.raises(CheckpointError, match="length mismatch"):
            load_checkpoint(p)

    def test_trailing_bytes(self, tmp_path):
        p = tmp_path / "x.ntm"
        save_checkpoint(NamedTensorMap({"a": np.ones(4)}), p)
        p.write_bytes(p.read_bytes() + b"\0\0\0\0")
        with pytest.raises(CheckpointError, match="length mismatch"):
            load_checkpoint(p)

    def test_malformed_manifest_reports_byte(self, tmp_path):
        p = tmp_path / "x.ntm"
        body = b'{"tensors": [}\n'
        p.write_bytes(struct.pack("<Q", len(body)) + body)
        with pytest.raises(CheckpointError, match="byte 21"):
            load_checkpoint(p)

    def test_overlapping_offsets(self, tmp_path):
        p = tmp_path / "x.ntm"
        manifest = {"tensors": [{"name": "a", "shape": [1], "dtype": "float32", "offset": 0, "nbytes": 4},
                                {"name": "b", "shape": [1], "dtype": "float32", "offset": 0, "nbytes": 4}]}
        body = (json.dumps(manifest) + "\n").encode()
        p.write_bytes(struct.pack("<Q", len(body)) + body + b"\0" * 8)
        with pytest.raises(CheckpointError, match="overlaps"):
            load_checkpoint(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(OSError):
            load_checkpoint(tmp_path / "nope.ntm")


finite = st.floats(-1e6, 1e6, allow_nan=False, width=32)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=1, max_dims=3, max_side=4), elements=finite))
def test_round_trip_property(tmp_path_factory, arr):
    p = tmp_path_factory.mktemp("rt") / "x.ntm"
    m = NamedTensorMap({"x": arr})
    save_checkpoint(m, p)
    assert load_checkpoint(p) == m
