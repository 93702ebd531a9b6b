"""Single-file binary checkpoints with a versioned header.

Layout: magic string, format version, a key=value metadata block, then a
named parameter table where each entry stores its name, shape and raw
little-endian float32 data.
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

__all__ = ["save_checkpoint", "load_checkpoint", "MAGIC", "FORMAT_VERSION"]

MAGIC = b"HAIRANIM\x00"
FORMAT_VERSION = 1


def save_checkpoint(path, arrays, meta=None):
    """Write {name: ndarray} (stored as float32) plus optional {str: str} metadata."""
    meta_lines = []
    for key, val in (meta or {}).items():
        if "\n" in key or "=" in key or "\n" in str(val):
            raise ValueError(f"metadata entry {key!r} may not contain '=' in the key or newlines")
        meta_lines.append(f"{key}={val}")
    meta_blob = "\n".join(meta_lines).encode("utf-8")

    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", FORMAT_VERSION)
    blob += struct.pack("<I", len(meta_blob))
    blob += meta_blob
    blob += struct.pack("<I", len(arrays))
    for name, arr in arrays.items():
        data = np.ascontiguousarray(arr, dtype="<f4")
        name_b = name.encode("utf-8")
        if len(name_b) > 0xFFFF:
            raise ValueError(f"parameter name too long: {name[:32]}...")
        blob += struct.pack("<H", len(name_b))
        blob += name_b
        blob += struct.pack("<B", data.ndim)
        for d in data.shape:
            blob += struct.pack("<I", d)
        blob += data.tobytes()

    # atomic replace so a crashed writer never leaves a truncated checkpoint
    dir_ = os.path.dirname(os.path.abspath(path))
    os.makedirs(dir_, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=dir_, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


class _Reader:
    def __init__(self, blob, path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n):
        if self.pos + n > len(self.blob):
            raise ValueError(f"truncated checkpoint: {self.path}")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def u16(self):
        return struct.unpack("<H", self.take(2))[0]

    def u8(self):
        return struct.unpack("<B", self.take(1))[0]


def load_checkpoint(path):
    """Read a checkpoint back as ({name: float32 ndarray}, {str: str} metadata)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob, path)
    if r.take(len(MAGIC)) != MAGIC:
        raise ValueError(f"not a model checkpoint (bad magic): {path}")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format version {version} (expected {FORMAT_VERSION})")
    meta_blob = r.take(r.u32()).decode("utf-8")
    meta = {}
    for line in meta_blob.splitlines():
        key, _, val = line.partition("=")
        if key:
            meta[key] = val
    arrays = {}
    for _ in range(r.u32()):
        name = r.take(r.u16()).decode("utf-8")
        ndim = r.u8()
        shape = tuple(r.u32() for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(r.take(count * 4), dtype="<f4").reshape(shape).copy()
        arrays[name] = data
    if r.pos != len(blob):
        raise ValueError(f"trailing bytes after parameter table: {path}")
    return arrays, meta
