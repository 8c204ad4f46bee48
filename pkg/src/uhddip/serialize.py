"""Flat binary tensor records and named-parameter checkpoints.

Tensor record::

    8 bytes   magic b"UHDTNSR1"
    u32       rank
    u64 x r   extents
    f32 x n   little-endian payload

Checkpoint::

    8 bytes   magic b"UHDCKPT1"
    u32       header length in bytes
    header    UTF-8 JSON {"format": 1, "names": [...], "meta": {...}}
    records   one tensor record per name, in header order
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

from .errors import IngestError

TENSOR_MAGIC = b"UHDTNSR1"
CKPT_MAGIC = b"UHDCKPT1"
CKPT_FORMAT = 1


def write_tensor(f: BinaryIO, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    f.write(TENSOR_MAGIC)
    f.write(struct.pack("<I", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_tensor(f: BinaryIO) -> np.ndarray:
    magic = f.read(8)
    if magic != TENSOR_MAGIC:
        raise IngestError(f"bad tensor magic {magic!r}")
    (rank,) = struct.unpack("<I", _read_exact(f, 4))
    shape = struct.unpack(f"<{rank}Q", _read_exact(f, 8 * rank))
    count = int(np.prod(shape, dtype=np.int64))
    payload = _read_exact(f, 4 * count)
    return np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape)


def _read_exact(f: BinaryIO, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise IngestError("truncated tensor record")
    return buf


def save_tensor(path, arr: np.ndarray) -> None:
    with open(path, "wb") as f:
        write_tensor(f, arr)


def load_tensor(path) -> np.ndarray:
    try:
        f = open(path, "rb")
    except OSError as exc:
        raise IngestError(f"cannot open tensor file {path}: {exc}") from exc
    with f:
        return read_tensor(f)


def save_checkpoint(path, params: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    header = json.dumps({"format": CKPT_FORMAT, "names": list(params), "meta": meta or {}},
                        sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    for arr in params.values():
        write_tensor(buf, arr)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        f = open(path, "rb")
    except OSError as exc:
        raise IngestError(f"cannot open checkpoint {path}: {exc}") from exc
    with f:
        if f.read(8) != CKPT_MAGIC:
            raise IngestError(f"{path}: not a checkpoint")
        (hlen,) = struct.unpack("<I", _read_exact(f, 4))
        header = json.loads(_read_exact(f, hlen).decode("utf-8"))
        if header.get("format") != CKPT_FORMAT:
            raise IngestError(f"{path}: unsupported checkpoint format {header.get('format')}")
        params = {name: read_tensor(f) for name in header["names"]}
    return params, header.get("meta", {})
