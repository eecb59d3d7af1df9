"""FTNS feature-map store: backbone activations keyed by image id.

Layout (all little-endian)::

    "FTNS" u32 version=1  u32 C  u8 dtype(0=f32)  u32 count
    count x record:   u32 image_id  u32 H  u32 W  f32[C*H*W] payload  u32 crc32(payload)
    index:            count x (u32 image_id, u64 record_offset)  u32 crc32(index)
    u64 index_offset

Payload order is channel-major, then row, then column. The trailing
``index_offset`` lets a reader jump straight to the index.
"""

from __future__ import annotations

import mmap
import os
import struct
from dataclasses import dataclass

import numpy as np

from ._binio import Reader, crc32
from .errors import (
    CorruptRecord,
    DuplicateImageId,
    IoFailure,
    MissingId,
    MixedChannelCount,
    NonFiniteValue,
)

FTNS_MAGIC = b"FTNS"
FTNS_VERSION = 1
DTYPE_F32 = 0
_HEADER = struct.Struct("<4sIIBI")
_REC_HEAD = struct.Struct("<III")
_INDEX_ENTRY = struct.Struct("<IQ")


@dataclass
class FeatureMap:
    image_id: int
    values: np.ndarray  # [C, H, W]

    @property
    def shape(self):
        return self.values.shape

    @property
    def channels(self) -> int:
        return self.values.shape[0]


def write_store(maps, sink) -> int:
    """Write ``maps`` in FTNS format to a binary ``sink``; returns the record count."""
    maps = list(maps)
    channels = maps[0].values.shape[0] if maps else 0
    seen = set()
    for fm in maps:
        if fm.values.ndim != 3 or min(fm.values.shape) < 1:
            raise ValueError(f"feature map {fm.image_id} must be a non-empty C x H x W array")
        if fm.values.shape[0] != channels:
            raise MixedChannelCount(f"image {fm.image_id} has {fm.values.shape[0]} channels, expected {channels}")
        if fm.image_id in seen:
            raise DuplicateImageId(f"image id {fm.image_id} written twice")
        seen.add(fm.image_id)

    out = bytearray(_HEADER.pack(FTNS_MAGIC, FTNS_VERSION, channels, DTYPE_F32, len(maps)))
    index = []
    for fm in maps:
        index.append((fm.image_id, len(out)))
        _, h, w = fm.values.shape
        payload = np.ascontiguousarray(fm.values, dtype="<f4").tobytes()
        out += _REC_HEAD.pack(fm.image_id, h, w)
        out += payload
        out += struct.pack("<I", crc32(payload))
    index_offset = len(out)
    table = b"".join(_INDEX_ENTRY.pack(i, off) for i, off in index)
    out += table
    out += struct.pack("<IQ", crc32(table), index_offset)
    try:
        sink.write(bytes(out))
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return len(maps)


def save_store(maps, path) -> int:
    with open(path, "wb") as fh:
        return write_store(maps, fh)


class FeatureStore:
    """Read-only view over an FTNS buffer.

    Reads never mutate shared state, so one store may serve several
    threads at once.
    """

    def __init__(self, buf):
        self._buf = memoryview(buf)
        r = Reader(self._buf, "FTNS store")
        r.expect_magic(FTNS_MAGIC)
        version, self.channels, dtype, count = r.unpack("<IIBI")
        if version != FTNS_VERSION:
            raise CorruptRecord(f"unsupported FTNS version {version}")
        if dtype != DTYPE_F32:
            raise CorruptRecord(f"unsupported FTNS dtype code {dtype}")
        if len(self._buf) < 12:
            raise CorruptRecord("truncated FTNS store")
        (index_offset,) = struct.unpack("<Q", bytes(self._buf[-8:]))
        table_len = count * _INDEX_ENTRY.size
        end = index_offset + table_len
        if end + 12 != len(self._buf):
            raise CorruptRecord("FTNS index offset inconsistent with file size")
        table = self._buf[index_offset:end]
        (stored,) = struct.unpack("<I", bytes(self._buf[end:end + 4]))
        if crc32(table) != stored:
            raise CorruptRecord("CRC32 mismatch in FTNS index")
        self._index = {}
        for image_id, off in _INDEX_ENTRY.iter_unpack(table):
            if image_id in self._index:
                raise CorruptRecord(f"image id {image_id} indexed twice")
            self._index[image_id] = off
        self.count = count

    @classmethod
    def open(cls, path) -> "FeatureStore":
        with open(path, "rb") as fh:
            if os.fstat(fh.fileno()).st_size == 0:
                raise CorruptRecord(f"{path} is empty")
            buf = mmap.mmap(fh.fileno(), 0, access=mmap.ACCESS_READ)
        return cls(buf)

    @property
    def ids(self):
        return list(self._index)

    def __contains__(self, image_id) -> bool:
        return int(image_id) in self._index

    def __len__(self) -> int:
        return self.count

    def shape_of(self, image_id):
        _, h, w = self._record_header(image_id)
        return (self.channels, h, w)

    def _record_header(self, image_id):
        try:
            off = self._index[int(image_id)]
        except KeyError:
            raise MissingId(image_id) from None
        rid, h, w = _REC_HEAD.unpack_from(self._buf, off)
        if rid != image_id:
            raise CorruptRecord(f"index points image {image_id} at a record for image {rid}")
        return off, h, w

    def read(self, image_id, validate=True) -> FeatureMap:
        off, h, w = self._record_header(image_id)
        start = off + _REC_HEAD.size
        n = self.channels * h * w
        payload = self._buf[start:start + 4 * n]
        if len(payload) != 4 * n:
            raise CorruptRecord(f"record for image {image_id} is truncated")
        (stored,) = struct.unpack_from("<I", self._buf, start + 4 * n)
        if crc32(payload) != stored:
            raise CorruptRecord(f"CRC32 mismatch in record for image {image_id}")
        values = np.frombuffer(payload, dtype="<f4").reshape(self.channels, h, w).astype(np.float32)
        if validate:
            bad = ~np.isfinite(values)
            if bad.any():
                channel = int(np.argwhere(bad)[0][0])
                raise NonFiniteValue(image_id, channel)
        return FeatureMap(int(image_id), values)

    def read_batch(self, ids) -> list:
        """Maps for ``ids`` in the requested order, validated finite."""
        return [self.read(i) for i in ids]


def read_batch(store: FeatureStore, ids) -> list:
    return store.read_batch(ids)
