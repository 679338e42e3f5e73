"""Binary checkpoint container for named parameter arrays.

Layout, all integers little-endian:

    magic    4 bytes  b"PFBO"
    version  u32      currently 1
    meta     u32 length + canonical-JSON bytes (config hash, seed, stage)
    count    u32      number of arrays
    table    per array: u16 name length + UTF-8 name, u8 ndim,
             u32 per dimension, u64 payload offset
    payload  concatenated float32 arrays

Arrays are narrowed to 32-bit floats on save; loading widens back to 64-bit,
so values match the originals within 32-bit rounding and the stored payload
itself round-trips bit-exactly.  Files are written atomically (temp file in
the target directory, then rename).
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

MAGIC = b"PFBO"
VERSION = 1


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Write the arrays and metadata to path; deterministic for equal inputs."""
    path = os.fspath(path)
    names = sorted(arrays)
    payload_parts = []
    table = bytearray()
    offset = 0
    for name in names:
        arr = np.asarray(arrays[name], dtype="<f4")
        raw = arr.tobytes()
        encoded = name.encode("utf-8")
        table += struct.pack("<H", len(encoded)) + encoded
        table += struct.pack("<B", arr.ndim)
        for dim in arr.shape:
            table += struct.pack("<I", dim)
        table += struct.pack("<Q", offset)
        payload_parts.append(raw)
        offset += len(raw)
    meta_blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    blob += struct.pack("<I", len(meta_blob)) + meta_blob
    blob += struct.pack("<I", len(names))
    blob += table
    blob += b"".join(payload_parts)
    directory = os.path.dirname(path) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, blob: bytes, path: str):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise ValueError(f"checkpoint {self.path}: truncated file")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))[0]


def load_checkpoint(path, expected_hash: str | None = None,
                    override: bool = False):
    """Read (arrays, meta) back; verifies the embedded config hash if given."""
    path = os.fspath(path)
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob, path)
    if r.take(4) != MAGIC:
        raise ValueError(f"checkpoint {path}: not a checkpoint file")
    version = r.unpack("<I")
    if version != VERSION:
        raise ValueError(f"checkpoint {path}: unsupported version {version}")
    meta_len = r.unpack("<I")
    try:
        meta = json.loads(r.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"checkpoint {path}: corrupt metadata ({exc})") from exc
    count = r.unpack("<I")
    entries = []
    for _ in range(count):
        name = r.take(r.unpack("<H")).decode("utf-8")
        ndim = r.unpack("<B")
        shape = tuple(r.unpack("<I") for _ in range(ndim))
        offset = r.unpack("<Q")
        entries.append((name, shape, offset))
    payload = blob[r.pos:]
    spans = []
    arrays = {}
    for name, shape, offset in entries:
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4
        if offset + nbytes > len(payload):
            raise ValueError(f"checkpoint {path}: corrupt table entry {name!r}")
        spans.append((offset, offset + nbytes, name))
        raw = payload[offset:offset + nbytes]
        arrays[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)
    spans.sort()
    for (_, end, name), (start, _, other) in zip(spans, spans[1:]):
        if end > start:
            raise ValueError(f"checkpoint {path}: overlapping arrays "
                             f"{name!r} and {other!r}")
    if expected_hash is not None and meta.get("config_hash") != expected_hash:
        if not override:
            raise ValueError(
                f"checkpoint {path}: config hash mismatch "
                f"(expected {expected_hash}, found {meta.get('config_hash')}); "
                "pass the override flag to load anyway")
    return arrays, meta
