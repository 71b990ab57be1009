"""Binary weight checkpoints (magic ``EPGW``).

A checkpoint is a named-tensor table: trainable parameters, persistent buffers
(batch-norm running statistics, input standardization constants) and one JSON
metadata blob describing how to rebuild the owning model.  Everything is
little-endian and CRC-guarded, and writing is bit-reproducible.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"EPGW"
END_MAGIC = b"EPGZ"
VERSION = 1

KIND_PARAM = 0
KIND_BUFFER = 1
KIND_META = 2

_DTYPES = {0: "<f4", 1: "<f8"}
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}

_HEADER = struct.Struct("<4sHHI")
_ENTRY_HEAD = struct.Struct("<HBB B".replace(" ", ""))  # name_len, kind, dtype, ndim
_FOOTER = struct.Struct("<I4s")


class CheckpointFormatError(ValueError):
    """The file is not a readable checkpoint for this tool."""


def _pack_entry(name: str, kind: int, arr: np.ndarray | bytes) -> bytes:
    name_b = name.encode("utf-8")
    if isinstance(arr, bytes):
        head = _ENTRY_HEAD.pack(len(name_b), kind, 0xFF, 1)
        dims = struct.pack("<I", len(arr))
        return head + name_b + dims + arr
    arr = np.ascontiguousarray(arr)
    code = _DTYPE_CODES.get(arr.dtype)
    if code is None:
        raise ValueError(f"entry {name!r}: unsupported dtype {arr.dtype}")
    head = _ENTRY_HEAD.pack(len(name_b), kind, code, arr.ndim)
    dims = b"".join(struct.pack("<I", d) for d in arr.shape)
    return head + name_b + dims + arr.astype(_DTYPES[code]).tobytes()


def save_checkpoint(
    path: str | Path,
    params: dict[str, np.ndarray],
    buffers: dict[str, np.ndarray],
    meta: dict,
) -> None:
    entries = [_pack_entry("__meta__", KIND_META, json.dumps(meta, sort_keys=True).encode())]
    for name, arr in params.items():
        entries.append(_pack_entry(name, KIND_PARAM, np.asarray(arr)))
    for name, arr in buffers.items():
        entries.append(_pack_entry(name, KIND_BUFFER, np.asarray(arr)))
    body = b"".join(entries)
    blob = (
        _HEADER.pack(MAGIC, VERSION, 0, len(entries))
        + body
        + _FOOTER.pack(zlib.crc32(body) & 0xFFFFFFFF, END_MAGIC)
    )
    Path(path).write_bytes(blob)


def load_checkpoint(
    path: str | Path,
) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray], dict]:
    """Returns (params, buffers, meta)."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size + _FOOTER.size:
        raise CheckpointFormatError(f"{path}: too short to be a checkpoint")
    magic, version, _reserved, n_entries = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise CheckpointFormatError(f"{path}: unsupported checkpoint version {version}")
    body = raw[_HEADER.size : -_FOOTER.size]
    crc_stored, end_magic = _FOOTER.unpack_from(raw, len(raw) - _FOOTER.size)
    if end_magic != END_MAGIC or zlib.crc32(body) & 0xFFFFFFFF != crc_stored:
        raise CheckpointFormatError(f"{path}: checksum or end marker mismatch")

    params: dict[str, np.ndarray] = {}
    buffers: dict[str, np.ndarray] = {}
    meta: dict = {}
    offset = 0
    for index in range(n_entries):
        try:
            name_len, kind, dtype_code, ndim = _ENTRY_HEAD.unpack_from(body, offset)
            offset += _ENTRY_HEAD.size
            name = body[offset : offset + name_len].decode("utf-8")
            offset += name_len
            dims = struct.unpack_from(f"<{ndim}I", body, offset)
            offset += 4 * ndim
            if kind == KIND_META:
                payload = body[offset : offset + dims[0]]
                if len(payload) != dims[0]:
                    raise struct.error("short meta payload")
                offset += dims[0]
                meta = json.loads(payload.decode())
                continue
            dtype = _DTYPES.get(dtype_code)
            if dtype is None:
                raise CheckpointFormatError(
                    f"{path}: entry {name!r} has unknown dtype code {dtype_code}"
                )
            nbytes = int(np.prod(dims, dtype=np.int64)) * int(dtype[-1])
            payload = body[offset : offset + nbytes]
            if len(payload) != nbytes:
                raise struct.error("short tensor payload")
            offset += nbytes
            arr = np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
            (params if kind == KIND_PARAM else buffers)[name] = arr
        except struct.error:
            raise CheckpointFormatError(
                f"{path}: entry {index} of {n_entries} is truncated"
            ) from None
    if offset != len(body):
        raise CheckpointFormatError(f"{path}: trailing bytes after last entry")
    return params, buffers, meta
