"""Little-endian helpers for the versioned binary model files."""

from __future__ import annotations

import io
import struct

import numpy as np

from .errors import StorageError


class Writer:
    def __init__(self):
        self.buf = io.BytesIO()

    def raw(self, b: bytes):
        self.buf.write(b)

    def pack(self, fmt: str, *vals):
        self.buf.write(struct.pack("<" + fmt, *vals))

    def array(self, arr: np.ndarray, dtype: str):
        a = np.ascontiguousarray(arr, dtype=np.dtype(dtype).newbyteorder("<"))
        self.buf.write(a.tobytes())

    def getvalue(self) -> bytes:
        return self.buf.getvalue()


class Reader:
    def __init__(self, raw: bytes, name: str = "<bytes>"):
        self.raw = raw
        self.pos = 0
        self.name = name

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise StorageError(f"{self.name}: truncated file")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct("<" + fmt)
        return s.unpack(self.take(s.size))

    def array(self, dtype: str, shape) -> np.ndarray:
        dt = np.dtype(dtype).newbyteorder("<")
        count = int(np.prod(shape))
        out = np.frombuffer(self.take(count * dt.itemsize), dtype=dt).reshape(shape)
        return out.astype(dt.newbyteorder("="))

    def done(self):
        if self.pos != len(self.raw):
            raise StorageError(f"{self.name}: {len(self.raw) - self.pos} trailing bytes")


def check_magic(reader: Reader, magic: bytes, version: int) -> None:
    got = reader.take(len(magic))
    if got != magic:
        raise StorageError(f"{reader.name}: bad magic {got!r}, expected {magic!r}")
    (v,) = reader.unpack("B")
    if v != version:
        raise StorageError(f"{reader.name}: unsupported version {v}")
