import numpy as np
import pytest

from conftest import make_study, tiny_model
from sct.checkpoint import (
    CheckpointFormatError,
    deserialize_model,
    load_model,
    save_model,
    serialize_model,
)


def test_round_trip_bytes_identical():
    model = tiny_model(seed=7)
    blob = serialize_model(model)
    again = serialize_model(deserialize_model(blob))
    assert blob == again


def test_bad_magic_rejected():
    blob = serialize_model(tiny_model())
    with pytest.raises(CheckpointFormatError, match="magic"):
        deserialize_model(b"XXXX" + blob[4:])


def test_truncated_rejected():
    blob = serialize_model(tiny_model())
    with pytest.raises(CheckpointFormatError, match="truncated|missing"):
        deserialize_model(blob[: len(blob) // 2])


def test_loaded_model_forward_bit_exact(tmp_path):
    model = tiny_model(seed=3)
    rng = np.random.default_rng(0)
    study = make_study(rng, model.config, n_vert=3, n_chan=2)
    before = model.forward(study).logits["metastasis"].data

    path = tmp_path / "model.sct"
    save_model(model, path)
    loaded = load_model(path)
    after = loaded.forward(study).logits["metastasis"].data
    np.testing.assert_array_equal(before, after)


def test_wrong_version_rejected():
    blob = bytearray(serialize_model(tiny_model()))
    blob[4:8] = (99).to_bytes(4, "little")
    with pytest.raises(CheckpointFormatError, match="version"):
        deserialize_model(bytes(blob))
