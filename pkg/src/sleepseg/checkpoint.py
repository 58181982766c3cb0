"""Flat binary container for named float32 arrays (model checkpoints, caches).

Layout, all integers little-endian:

    magic   4 bytes  b"UTWB"
    version u32      currently 1
    count   u64      number of entries
    entry   repeated count times:
        name_len u32, name UTF-8, rank u32, dims u64 * rank,
        values float32 * prod(dims)

Batch-norm running statistics are stored as ordinary entries.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"UTWB"
VERSION = 1


class CheckpointError(ValueError):
    """Container is malformed; the message carries the failing byte offset."""


def save_checkpoint(path, entries) -> None:
    """Write (name, array) pairs atomically (temp file + rename)."""
    path = Path(path)
    chunks = [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(entries))]
    for name, arr in entries:
        data = np.ascontiguousarray(arr, dtype=np.float32)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}Q", *data.shape))
        chunks.append(data.astype("<f4").tobytes())
    blob = b"".join(chunks)

    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> dict:
    """Read a container back as an ordered {name: float32 array} dict."""
    blob = Path(path).read_bytes()
    off = 0

    def need(n, what):
        nonlocal off
        if off + n > len(blob):
            raise CheckpointError(f"truncated container: {what} at byte {off} needs {n} bytes, "
                                  f"file has {len(blob) - off} left")
        piece = blob[off:off + n]
        off += n
        return piece

    if need(4, "magic") != MAGIC:
        raise CheckpointError("bad magic at byte 0 (not a UTWB container)")
    version = struct.unpack("<I", need(4, "version"))[0]
    if version != VERSION:
        raise CheckpointError(f"unsupported container version {version} at byte 4")
    count = struct.unpack("<Q", need(8, "entry count"))[0]

    out = {}
    for k in range(count):
        name_at = off
        (name_len,) = struct.unpack("<I", need(4, "name length"))
        if name_len > 1 << 20:
            raise CheckpointError(f"implausible name length {name_len} at byte {name_at}")
        name = need(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<I", need(4, "rank"))
        if rank > 64:
            raise CheckpointError(f"implausible rank {rank} for {name!r} at byte {off - 4}")
        dims = struct.unpack(f"<{rank}Q", need(8 * rank, "dims"))
        n = 1
        for d in dims:
            n *= d
        values = np.frombuffer(need(4 * n, f"values of {name!r}"), dtype="<f4")
        out[name] = values.reshape(dims).astype(np.float32)
    if off != len(blob):
        raise CheckpointError(f"{len(blob) - off} trailing bytes at byte {off}")
    return out
