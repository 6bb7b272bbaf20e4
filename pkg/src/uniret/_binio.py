"""Little-endian binary helpers shared by the on-disk formats."""

from __future__ import annotations

import struct


class FormatError(ValueError):
    """Raised for a malformed or truncated artifact file; message carries the byte offset."""


def pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


class Reader:
    def __init__(self, data: bytes, what: str):
        self.data, self.pos, self.what = data, 0, what

    def fail(self, msg: str, at: int | None = None):
        raise FormatError(f"{self.what}: {msg} at byte {self.pos if at is None else at}")

    def magic(self, expected: bytes) -> None:
        if self.take(len(expected)) != expected:
            self.fail("bad magic", 0)

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            self.fail(f"truncated (needed {n} more bytes)")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<I")
        at = self.pos
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError:
            self.fail("invalid UTF-8", at)

    def done(self) -> None:
        if self.pos != len(self.data):
            self.fail("trailing bytes")
