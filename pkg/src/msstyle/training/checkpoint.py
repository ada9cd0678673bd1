"""Single-file checkpoint container.

Layout: an 8-byte magic, a little-endian ``u16`` format version, then a
sequence of records::

    u32 name_len | name (utf-8) | u8 kind | u64 payload_len | payload

Readers skip records whose kind they do not know, so newer writers can add
record types without breaking older readers. Array payloads carry their own
dtype and shape, so every tensor round-trips bit-exactly.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from msstyle.errors import InvariantError, MissingInputError

MAGIC = b"MSSTCKPT"
VERSION = 1

KIND_ARRAY = 1
KIND_JSON = 2
KIND_BYTES = 3

_DTYPES = {0: np.float32, 1: np.float64, 2: np.int64, 3: np.uint8, 4: np.bool_, 5: np.int32}
_DTYPE_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}


@dataclass
class Checkpoint:
    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict[str, dict] = field(default_factory=dict)
    blobs: dict[str, bytes] = field(default_factory=dict)


def _encode_array(a: np.ndarray) -> bytes:
    a = np.asarray(a).copy(order="C")
    code = _DTYPE_CODES.get(a.dtype)
    if code is None:
        raise InvariantError(f"cannot store dtype {a.dtype}")
    head = struct.pack("<BB", code, a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    return head + a.astype(a.dtype.newbyteorder("<"), copy=False).tobytes()


def _decode_array(buf: bytes) -> np.ndarray:
    code, ndim = struct.unpack_from("<BB", buf)
    shape = struct.unpack_from(f"<{ndim}Q", buf, 2)
    dtype = np.dtype(_DTYPES[code]).newbyteorder("<")
    data = np.frombuffer(buf, dtype=dtype, offset=2 + 8 * ndim)
    return data.reshape(shape).astype(dtype.newbyteorder("="), copy=True)


def _record(name: str, kind: int, payload: bytes) -> bytes:
    n = name.encode("utf-8")
    return struct.pack("<I", len(n)) + n + struct.pack("<BQ", kind, len(payload)) + payload


def write_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write atomically (temp file + rename) so an interrupted save never leaves a torn file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC + struct.pack("<H", VERSION))
        for name in sorted(ckpt.meta):
            f.write(_record(name, KIND_JSON, json.dumps(ckpt.meta[name], sort_keys=True).encode("utf-8")))
        for name in sorted(ckpt.arrays):
            f.write(_record(name, KIND_ARRAY, _encode_array(ckpt.arrays[name])))
        for name in sorted(ckpt.blobs):
            f.write(_record(name, KIND_BYTES, ckpt.blobs[name]))
    os.replace(tmp, path)


def read_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise MissingInputError(path, "checkpoint")
    buf = path.read_bytes()
    if buf[: len(MAGIC)] != MAGIC:
        raise InvariantError(f"{path} is not a checkpoint file")
    (version,) = struct.unpack_from("<H", buf, len(MAGIC))
    if version > VERSION:
        raise InvariantError(f"{path}: checkpoint version {version} is newer than supported ({VERSION})")
    pos = len(MAGIC) + 2
    ckpt = Checkpoint()
    while pos < len(buf):
        try:
            (n,) = struct.unpack_from("<I", buf, pos)
            name = buf[pos + 4: pos + 4 + n].decode("utf-8")
            kind, size = struct.unpack_from("<BQ", buf, pos + 4 + n)
        except struct.error as e:
            raise InvariantError(f"{path}: truncated record header") from e
        start = pos + 4 + n + 9
        payload = buf[start: start + size]
        if len(payload) != size:
            raise InvariantError(f"{path}: record {name!r} is truncated")
        if kind == KIND_ARRAY:
            ckpt.arrays[name] = _decode_array(payload)
        elif kind == KIND_JSON:
            ckpt.meta[name] = json.loads(payload.decode("utf-8"))
        elif kind == KIND_BYTES:
            ckpt.blobs[name] = bytes(payload)
        pos = start + size
    return ckpt
