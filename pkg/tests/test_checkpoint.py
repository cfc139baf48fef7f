import json
import struct

import numpy as np
import pytest

from checkpoint import (Checkpoint, CheckpointError, decode_checkpoint, encode_checkpoint, load_checkpoint,
                        save_checkpoint)


@pytest.fixture
def sample():
    rng = np.random.default_rng(0)
    return Checkpoint(tensors={"b": rng.normal(size=(2, 3)), "a": np.array(1.5), "c.weight": rng.normal(size=4)},
                      config={"lr": 0.001, "use_ral": True}, seed=7, extra={"best_epoch": 3})


def test_round_trip_is_bitwise(tmp_path, sample):
    path = save_checkpoint(sample, tmp_path / "nested" / "model.ckpt")
    loaded = load_checkpoint(path)
    assert set(loaded.tensors) == set(sample.tensors)
    for name, values in sample.tensors.items():
        assert loaded.tensors[name].shape == np.shape(values)
        assert loaded.tensors[name].tobytes() == np.asarray(values, dtype="<f8").tobytes()
    assert (loaded.config, loaded.seed, loaded.extra) == (sample.config, 7, {"best_epoch": 3})


def test_layout_starts_with_magic_and_sorted_names(sample):
    data = encode_checkpoint(sample)
    assert data[:5] == b"WEGA1"
    assert struct.unpack("<I", data[5:9]) == (3,)
    (length,) = struct.unpack("<H", data[9:11])
    assert data[11:11 + length] == b"a"
    assert encode_checkpoint(sample) == data


def test_metadata_trailer_is_optional(sample):
    data = encode_checkpoint(sample)
    trailer = json.dumps({"config": sample.config, "seed": sample.seed, "extra": sample.extra}, sort_keys=True)
    bare = data[:len(data) - 4 - len(trailer.encode("utf-8"))]
    loaded = decode_checkpoint(bare)
    assert loaded.config == {} and loaded.seed == 0
    np.testing.assert_array_equal(loaded.tensors["b"], sample.tensors["b"])


def test_truncation_and_bad_magic(sample):
    data = encode_checkpoint(sample)
    with pytest.raises(CheckpointError, match="truncated"):
        decode_checkpoint(data[:30])
    with pytest.raises(CheckpointError, match="magic"):
        decode_checkpoint(b"NOPE!" + data[5:])


def test_missing_file_is_a_checkpoint_error(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "absent.ckpt")
