"""Binary named-tensor checkpoint files.

Layout (all integers little-endian)::

    b"GNCK" | u32 version | u64 metadata length | UTF-8 JSON metadata
    then, repeated until EOF:
    u16 name length | name | u8 dtype code | u8 rank | u64 dim * rank | raw payload
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError

MAGIC = b"GNCK"
VERSION = 1

DTYPE_CODES = {
    0: np.dtype("<f4"),
    1: np.dtype("<f8"),
    2: np.dtype("<i8"),
    3: np.dtype("u1"),
}
_CODE_OF = {dt: code for code, dt in DTYPE_CODES.items()}


def _as_array(value) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu().numpy()
    arr = np.asarray(value)
    if arr.dtype.kind == "f" and arr.dtype.itemsize <= 4:
        arr = arr.astype("<f4")
    elif arr.dtype.kind == "f":
        arr = arr.astype("<f8")
    elif arr.dtype.kind in "iub" and arr.dtype != np.uint8:
        arr = arr.astype("<i8")
    return np.ascontiguousarray(arr).reshape(arr.shape)


def dumps(tensors: dict, metadata: dict | None = None) -> bytes:
    buf = io.BytesIO()
    meta = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<IQ", VERSION, len(meta)))
    buf.write(meta)
    for name, value in tensors.items():
        arr = _as_array(value)
        key = name.encode("utf-8")
        if len(key) > 0xFFFF or arr.ndim > 0xFF:
            raise CheckpointError(f"tensor {name!r} cannot be encoded")
        buf.write(struct.pack("<H", len(key)))
        buf.write(key)
        buf.write(struct.pack("<BB", _CODE_OF[arr.dtype], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    view = memoryview(blob)
    if bytes(view[:4]) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, meta_len = struct.unpack_from("<IQ", view, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 16
    metadata = json.loads(bytes(view[pos:pos + meta_len]).decode("utf-8"))
    pos += meta_len
    tensors = {}
    while pos < len(view):
        (name_len,) = struct.unpack_from("<H", view, pos)
        pos += 2
        name = bytes(view[pos:pos + name_len]).decode("utf-8")
        pos += name_len
        code, rank = struct.unpack_from("<BB", view, pos)
        pos += 2
        if code not in DTYPE_CODES:
            raise CheckpointError(f"tensor {name!r}: unknown dtype code {code}")
        shape = struct.unpack_from(f"<{rank}Q", view, pos)
        pos += 8 * rank
        dtype = DTYPE_CODES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if pos + nbytes > len(view):
            raise CheckpointError(f"tensor {name!r}: truncated payload")
        tensors[name] = np.frombuffer(view[pos:pos + nbytes], dtype=dtype).reshape(shape).copy()
        pos += nbytes
    return metadata, tensors


def save(path, tensors: dict, metadata: dict | None = None) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(dumps(tensors, metadata))
        tmp.replace(path)
    except OSError as exc:
        raise CheckpointError(f"could not write checkpoint {path}: {exc}") from exc


def load(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    return loads(path.read_bytes())
