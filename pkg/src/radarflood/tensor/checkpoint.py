"""Self-describing parameter checkpoint.

Little-endian layout::

    4 bytes   magic b"RPCK"
    u32       format version (1)
    u32       descriptor length n, then n bytes of UTF-8 JSON
              (keys sorted, no whitespace) describing the architecture
    f64       input normalisation divisor
    u32       record count
    records, each:
        u16   name length k, then k bytes UTF-8 name
        u8    ndim d, then d x u32 dimensions
        f64 x prod(dims) raw values, row-major

Records keep insertion order, so saving the same parameters twice produces
identical bytes.
"""
from __future__ import annotations

import json
import struct

import numpy as np

from ..errors import BadMagic, InvariantViolation, TruncatedPayload

MAGIC = b"RPCK"
VERSION = 1


def dump_checkpoint(params: dict, descriptor: dict, input_scale: float) -> bytes:
    desc = json.dumps(descriptor, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(desc)), desc]
    parts.append(struct.pack("<dI", float(input_scale), len(params)))
    for name, value in params.items():
        arr = np.ascontiguousarray(value, dtype="<f8")
        raw_name = name.encode()
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.buf = memoryview(data)
        self.pos = 0

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.buf):
            raise TruncatedPayload(f"checkpoint ends at {len(self.buf)}, need {self.pos + n}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def load_checkpoint(data: bytes) -> tuple[dict, dict, float]:
    """Inverse of :func:`dump_checkpoint`: ``(params, descriptor, input_scale)``."""
    r = _Reader(data)
    if bytes(r.take(4)) != MAGIC:
        raise BadMagic("not a checkpoint file")
    version, n = r.unpack("<II")
    if version != VERSION:
        raise BadMagic(f"unsupported checkpoint version {version}")
    try:
        descriptor = json.loads(bytes(r.take(n)).decode())
        if not isinstance(descriptor, dict):
            raise ValueError("descriptor is not an object")
    except (UnicodeDecodeError, ValueError) as exc:
        raise InvariantViolation(f"corrupt checkpoint descriptor: {exc}") from None
    scale, count = r.unpack("<dI")
    params = {}
    for _ in range(count):
        (k,) = r.unpack("<H")
        try:
            name = bytes(r.take(k)).decode()
        except UnicodeDecodeError:
            raise InvariantViolation("corrupt tensor name in checkpoint") from None
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        size = int(np.prod(shape, dtype=np.int64))
        params[name] = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(shape).copy()
    if r.pos != len(r.buf):
        raise TruncatedPayload(f"{len(r.buf) - r.pos} trailing bytes after last record")
    return params, descriptor, scale
