"""SPCK1 checkpoint container.

Layout, all integers little-endian:

    b"SPCK1" | u32 header_len | header JSON (UTF-8, canonical) | u32 CRC32 of
    the header bytes | u32 tensor_count | tensor table

Each table entry: u16 name length, name (UTF-8), u8 dtype code (0 = f32),
u8 ndim, u32 per dimension, then the raw little-endian payload.  The header
carries ``tensors_sha256`` over the whole table region, so payload corruption
is detected on load; the CRC covers the header itself.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"SPCK1"
_DTYPES = {0: np.dtype("<f4")}


class CheckpointFormatError(ValueError):
    """Not an SPCK1 file, or structurally broken."""


class CheckpointChecksumError(CheckpointFormatError):
    """Stored digest does not match file contents."""


def _tensor_table(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BB", 0, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def save_checkpoint(path: str | Path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    table = _tensor_table(tensors)
    full_header = dict(header)
    full_header["format"] = "SPCK1"
    full_header["tensors_sha256"] = hashlib.sha256(table).hexdigest()
    raw = json.dumps(full_header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<I", zlib.crc32(raw)))
        fh.write(table)


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    blob = Path(path).read_bytes()
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic")
    off = len(MAGIC)
    try:
        (header_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        raw = blob[off : off + header_len]
        if len(raw) != header_len:
            raise CheckpointFormatError(f"{path}: truncated header")
        off += header_len
        (crc,) = struct.unpack_from("<I", blob, off)
        off += 4
    except struct.error as exc:
        raise CheckpointFormatError(f"{path}: truncated") from exc
    if zlib.crc32(raw) != crc:
        raise CheckpointChecksumError(f"{path}: header CRC mismatch")
    header = json.loads(raw.decode("utf-8"))
    table = blob[off:]
    if hashlib.sha256(table).hexdigest() != header.get("tensors_sha256"):
        raise CheckpointChecksumError(f"{path}: tensor table digest mismatch")

    tensors: dict[str, np.ndarray] = {}
    try:
        (count,) = struct.unpack_from("<I", table, 0)
        pos = 4
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", table, pos)
            pos += 2
            name = table[pos : pos + name_len].decode("utf-8")
            pos += name_len
            dtype_code, ndim = struct.unpack_from("<BB", table, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}I", table, pos)
            pos += 4 * ndim
            dtype = _DTYPES[dtype_code]
            nbytes = int(np.prod(shape)) * dtype.itemsize if ndim else dtype.itemsize
            arr = np.frombuffer(table[pos : pos + nbytes], dtype=dtype).reshape(shape)
            pos += nbytes
            tensors[name] = arr.copy()
    except (struct.error, KeyError, ValueError) as exc:
        raise CheckpointFormatError(f"{path}: corrupt tensor table") from exc
    return header, tensors
