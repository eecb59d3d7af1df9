"""Little-endian struct helpers shared by the binary formats."""

import struct
import zlib

from .errors import BadMagic, CorruptRecord


def crc32(data) -> int:
    return zlib.crc32(data) & 0xFFFFFFFF


class Reader:
    """Cursor over an in-memory buffer with bounds-checked reads."""

    def __init__(self, buf, what="file"):
        self.buf = memoryview(buf)
        self.pos = 0
        self.what = what

    def take(self, n):
        end = self.pos + n
        if end > len(self.buf):
            raise CorruptRecord(f"truncated {self.what}: wanted {n} bytes at offset {self.pos}")
        out = self.buf[self.pos:end]
        self.pos = end
        return out

    def unpack(self, fmt):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))

    def u8(self):
        return self.unpack("<B")[0]

    def u32(self):
        return self.unpack("<I")[0]

    def u64(self):
        return self.unpack("<Q")[0]

    def expect_magic(self, magic):
        got = bytes(self.take(len(magic)))
        if got != magic:
            raise BadMagic(f"expected {magic!r} header in {self.what}, got {got!r}")


def check_trailing_crc(buf, what):
    """Verify that the last 4 bytes of ``buf`` are the CRC32 of the rest."""
    if len(buf) < 4:
        raise CorruptRecord(f"truncated {what}")
    body = memoryview(buf)[:-4]
    (stored,) = struct.unpack("<I", bytes(buf[-4:]))
    if crc32(body) != stored:
        raise CorruptRecord(f"CRC32 mismatch in {what}")
    return body
