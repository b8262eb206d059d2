"""Binary checkpoints: named float32 tensors with a trailing checksum.

Layout (little-endian)::

    b"SNK1" | u32 version | u32 count
    count x ( u16 name_len | name utf-8 | u8 rank | rank x u32 dim | float32 data )
    u64 checksum   # blake2b, 8-byte digest, over every preceding byte
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from .errors import CorruptionError, FormatError

MAGIC = b"SNK1"
VERSION = 1


def _digest(payload: bytes) -> bytes:
    return hashlib.blake2b(payload, digest_size=8).digest()


def dumps(weights: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(weights))]
    for name in sorted(weights):
        arr = np.array(weights[name], dtype="<f4", order="C")  # keeps 0-d arrays 0-d
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise FormatError(f"record {name!r} cannot be encoded")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    payload = b"".join(parts)
    return payload + _digest(payload)


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if len(blob) < len(MAGIC) + 8 + 8:
        raise FormatError("file too short to be a checkpoint")
    payload, stored = blob[:-8], blob[-8:]
    if _digest(payload) != stored:
        raise CorruptionError("checksum mismatch")
    if payload[:4] != MAGIC:
        raise FormatError("bad magic")
    version, count = struct.unpack_from("<II", payload, 4)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", payload, off)
            off += 2
            name = payload[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<B", payload, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", payload, off)
            off += 4 * rank
            size = int(np.prod(dims, dtype=np.int64)) if rank else 1
            if off + 4 * size > len(payload):
                raise FormatError(f"record {name!r} runs past end of file")
            out[name] = np.frombuffer(payload, dtype="<f4", count=size, offset=off).reshape(dims).astype(np.float32)
            off += 4 * size
    except (struct.error, UnicodeDecodeError) as e:
        raise FormatError(f"malformed record: {e}") from e
    if off != len(payload):
        raise FormatError("trailing bytes after last record")
    return out


def save_checkpoint(weights: dict[str, np.ndarray], path) -> Path:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(weights))
    tmp.replace(path)
    return path


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
