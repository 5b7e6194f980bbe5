"""Little-endian binary helpers shared by the embedding and checkpoint formats."""

from __future__ import annotations

import enum
import os
import struct
import tempfile

import numpy as np

MAGIC = b"SDMA"


class FormatErrorCode(enum.IntEnum):
    BAD_MAGIC = 1
    BAD_VERSION = 2
    TRUNCATED = 3
    SIZE_MISMATCH = 4
    BAD_FIELD = 5


class FormatError(ValueError):
    """A binary file failed validation.  ``code`` says how."""

    def __init__(self, code: FormatErrorCode, message: str):
        super().__init__(f"[{code.name}] {message}")
        self.code = code


class Reader:
    def __init__(self, data: bytes, source: str = "<bytes>"):
        self.data = data
        self.pos = 0
        self.source = source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(
                FormatErrorCode.TRUNCATED,
                f"{self.source}: needed {n} bytes at offset {self.pos}, "
                f"only {len(self.data) - self.pos} left",
            )
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.take(8))[0]

    def f64_array(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)

    def expect_magic(self) -> None:
        got = self.take(4)
        if got != MAGIC:
            raise FormatError(FormatErrorCode.BAD_MAGIC, f"{self.source}: bad magic {got!r}")

    def expect_end(self) -> None:
        if self.pos != len(self.data):
            raise FormatError(
                FormatErrorCode.SIZE_MISMATCH,
                f"{self.source}: {len(self.data) - self.pos} trailing bytes",
            )


def pack_u32(x: int) -> bytes:
    return struct.pack("<I", x)


def pack_f64(x: float) -> bytes:
    return struct.pack("<d", x)


def pack_f64_array(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a sibling temp file and rename, so readers never see a partial file."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
