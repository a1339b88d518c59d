import json

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from hybridattn import tensorio


def test_round_trip_f64(tmp_path, rng):
    x = rng.standard_normal((3, 4, 5))
    tensorio.save_tensor(tmp_path, "x", x)
    assert_array_equal(tensorio.load_tensor(tmp_path, "x"), x)


def test_round_trip_f32(tmp_path, rng):
    x = rng.standard_normal((7,)).astype(np.float32)
    tensorio.save_tensor(tmp_path, "x", x)
    back = tensorio.load_tensor(tmp_path, "x")
    assert back.dtype == np.float32
    assert_array_equal(back, x)

def test_sidecar_schema(tmp_path, rng):
    tensorio.save_tensor(tmp_path, "q", rng.standard_normal((2, 3)))
    with open(tmp_path / "q.json") as fh:
        meta = json.load(fh)
    assert meta == {"dtype": "f64", "shape": [2, 3]}


def test_length_mismatch_detected(tmp_path, rng):
    tensorio.save_tensor(tmp_path, "x", rng.standard_normal(4))
    with open(tmp_path / "x.json", "w") as fh:
        json.dump({"dtype": "f64", "shape": [5]}, fh)
    with pytest.raises(ValueError, match="does not match shape"):
        tensorio.load_tensor(tmp_path, "x")


def test_group_round_trip(tmp_path, rng):
    tensors = {"a": rng.standard_normal((2, 2)), "b": rng.standard_normal(3)}
    tensorio.save_group(tmp_path / "grp", tensors, meta={"note": "test"})
    back, meta = tensorio.load_group(tmp_path / "grp")
    assert meta["note"] == "test"
    for name in tensors:
        assert_array_equal(back[name], tensors[name])
