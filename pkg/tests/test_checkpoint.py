import struct

import numpy as np
import pytest
import torch

from guidnoise import checkpoint as ckpt
from guidnoise.errors import CheckpointError


def test_round_trip(tmp_path):
    tensors = {
        "a": np.arange(6, dtype=np.float32).reshape(2, 3),
        "b": torch.tensor([1.5, -2.0], dtype=torch.float64),
        "scalar": np.float32(3.0),
        "ids": np.array([1, 2, 3], dtype=np.int32),
        "bytes": np.frombuffer(b"\x00\x07\xff", dtype=np.uint8),
    }
    ckpt.save(tmp_path / "x.gnck", tensors, {"k": [1, 2]})
    meta, out = ckpt.load(tmp_path / "x.gnck")
    assert meta == {"k": [1, 2]}
    np.testing.assert_array_equal(out["a"], tensors["a"])
    assert out["b"].dtype == np.float64 and out["ids"].dtype == np.int64
    assert out["scalar"].shape == ()
    assert out["bytes"].tobytes() == b"\x00\x07\xff"
    assert not (tmp_path / "x.gnck.tmp").exists()


def test_byte_layout():
    blob = ckpt.dumps({"w": np.array([1.0, 2.0], np.float32)}, {"a": 1})
    meta = b'{"a": 1}'
    expected = (b"GNCK" + struct.pack("<IQ", 1, len(meta)) + meta
                + struct.pack("<H", 1) + b"w" + struct.pack("<BB", 0, 1) + struct.pack("<Q", 2)
                + struct.pack("<2f", 1.0, 2.0))
    assert blob == expected


def test_deterministic_bytes():
    t = {"x": np.random.default_rng(0).random((3, 4)).astype(np.float32)}
    assert ckpt.dumps(t, {"b": 1, "a": 2}) == ckpt.dumps(t, {"a": 2, "b": 1})


def test_errors(tmp_path):
    with pytest.raises(CheckpointError, match="not found"):
        ckpt.load(tmp_path / "missing.gnck")
    with pytest.raises(CheckpointError, match="magic"):
        ckpt.loads(b"XXXX" + bytes(12))
    with pytest.raises(CheckpointError, match="version"):
        ckpt.loads(b"GNCK" + struct.pack("<IQ", 9, 0))
    blob = ckpt.dumps({"w": np.zeros(4, np.float32)})
    with pytest.raises(CheckpointError, match="truncated"):
        ckpt.loads(blob[:-3])
    code_pos = 16 + len(b"{}") + 2 + len(b"w")
    bad = bytearray(blob)
    bad[code_pos] = 42
    with pytest.raises(CheckpointError, match="dtype"):
        ckpt.loads(bytes(bad))
