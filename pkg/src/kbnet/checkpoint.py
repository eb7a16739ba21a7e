"""Flat binary container of named float64 arrays.

Layout (little-endian)::

    b"KBNETCKP"  u32 version  u32 count  u32 meta_len  meta (UTF-8 JSON)
    count x [u16 name_len, name, u8 ndim, ndim x u32 dim, u64 offset]
    data: the arrays back to back, offsets relative to the start of data
"""

import json
import struct
from collections import OrderedDict

import numpy as np

from kbnet.errors import CheckpointError

MAGIC = b"KBNETCKP"
VERSION = 1


def save_checkpoint(path, arrays, meta=None):
    """Write ``arrays`` (name -> array or Tensor) in iteration order."""
    blobs, index, offset = [], [], 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(getattr(arr, "data", arr), dtype="<f8")
        key = name.encode("utf-8")
        index.append(struct.pack("<H", len(key)) + key + struct.pack("<B", a.ndim)
                     + struct.pack(f"<{a.ndim}I", *a.shape) + struct.pack("<Q", offset))
        blobs.append(a.tobytes())
        offset += a.nbytes
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<III", VERSION, len(index), len(meta_bytes)) + meta_bytes)
        fh.write(b"".join(index))
        fh.write(b"".join(blobs))


def load_checkpoint(path):
    """Return (OrderedDict name -> float64 array, meta dict)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    try:
        version, count, meta_len = struct.unpack_from("<III", raw, 8)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        pos = 20
        meta = json.loads(raw[pos:pos + meta_len].decode("utf-8"))
        pos += meta_len
        entries = []
        for _ in range(count):
            (n,) = struct.unpack_from("<H", raw, pos)
            name = raw[pos + 2:pos + 2 + n].decode("utf-8")
            pos += 2 + n
            (ndim,) = struct.unpack_from("<B", raw, pos)
            shape = struct.unpack_from(f"<{ndim}I", raw, pos + 1)
            (offset,) = struct.unpack_from("<Q", raw, pos + 1 + 4 * ndim)
            pos += 1 + 4 * ndim + 8
            entries.append((name, shape, offset))
        out = OrderedDict()
        for name, shape, offset in entries:
            size = int(np.prod(shape, dtype=np.int64))
            start = pos + offset
            if start + 8 * size > len(raw):
                raise CheckpointError(f"{path}: array {name!r} runs past the end of the file")
            out[name] = np.frombuffer(raw, dtype="<f8", count=size, offset=start).reshape(shape).astype(np.float64)
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint ({exc})") from None
    return out, meta


def check_shapes(arrays, expected):
    """Every expected name must be present with exactly the expected shape."""
    for name, shape in expected.items():
        if name not in arrays:
            raise CheckpointError(f"checkpoint is missing parameter {name!r}")
        if tuple(arrays[name].shape) != tuple(shape):
            raise CheckpointError(f"parameter {name!r} has shape {tuple(arrays[name].shape)}, "
                                  f"configuration expects {tuple(shape)}")
