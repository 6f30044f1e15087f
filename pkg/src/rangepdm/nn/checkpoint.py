"""Versioned binary parameter checkpoints.

Layout (little-endian)::

    magic    8 bytes  b"RPDMCKP\\0"
    version  u32      1
    meta_len u32      length of a UTF-8 JSON metadata blob
    meta     bytes
    count    u32      number of entries
    per entry:
        name_len u16, name (UTF-8)
        ndim     u8,  dims u32 * ndim
        data     f64 * prod(dims), row-major
"""

import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from rangepdm.errors import FormatError

MAGIC = b"RPDMCKP\x00"
VERSION = 1


def save_checkpoint(path, state, meta=None) -> None:
    meta_raw = json.dumps(meta or {}, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta_raw)), meta_raw, struct.pack("<I", len(state))]
    for name, arr in state.items():
        arr = np.asarray(arr, dtype="<f8")
        raw_name = name.encode()
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path):
    """Return ``(state, meta)``."""
    raw = Path(path).read_bytes()
    try:
        if raw[:8] != MAGIC:
            raise FormatError(f"{path}: not a checkpoint file")
        version, meta_len = struct.unpack_from("<II", raw, 8)
        if version != VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        off = 16
        meta = json.loads(raw[off:off + meta_len].decode())
        off += meta_len
        (count,) = struct.unpack_from("<I", raw, off)
        off += 4
        state = OrderedDict()
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off:off + nlen].decode()
            off += nlen
            (ndim,) = struct.unpack_from("<B", raw, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", raw, off)
            off += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            if off + 8 * size > len(raw):
                raise FormatError(f"{path}: truncated data for {name}")
            state[name] = np.frombuffer(raw, dtype="<f8", count=size, offset=off).reshape(shape).copy()
            off += 8 * size
    except struct.error as exc:
        raise FormatError(f"{path}: truncated checkpoint ({exc})") from None
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes")
    return state, meta
