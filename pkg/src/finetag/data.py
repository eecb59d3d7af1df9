"""CUB-200-2011 annotation parsing: attribute vocabulary, binary label matrix, splits.

The raw files are whitespace separated with 1-based ids:

* ``attributes.txt``: ``<attribute_id> <group>::<variety>``
* ``image_attribute_labels.txt``: ``<image_id> <attribute_id> <is_present> <certainty> <time>``
* ``train_test_split.txt``: ``<image_id> <is_train>``
* ``images.txt``: ``<image_id> <relative path>``
"""

from __future__ import annotations

import io
import json
import struct
import warnings
from dataclasses import dataclass

import numpy as np

from . import seeding
from ._binio import Reader, check_trailing_crc, crc32
from .errors import (
    AttributeIdOutOfRange,
    DuplicateId,
    ImageIdOutOfRange,
    InvalidPresenceFlag,
    MalformedLine,
    NonContiguousIds,
    UnknownImageId,
    ValSizeTooLarge,
)

CUB_NUM_ATTRIBUTES = 312
CUB_NUM_GROUPS = 28
CUB_GROUP_SIZE_RANGE = (3, 15)

FTLM_MAGIC = b"FTLM"
FTLM_VERSION = 1


def _lines(stream, source):
    """Yield (line_no, tokens) for every nonempty line of a text stream."""
    if isinstance(stream, (bytes, bytearray)):
        stream = io.StringIO(stream.decode("utf-8"))
    elif isinstance(stream, str):
        stream = io.StringIO(stream)
    for line_no, line in enumerate(stream, start=1):
        tokens = line.split()
        if tokens:
            yield line_no, tokens


def _int(token, line_no, source):
    try:
        return int(token)
    except ValueError:
        raise MalformedLine(f"expected an integer, got {token!r}", line_no, source) from None


@dataclass
class AttributeVocabulary:
    """Ordered attribute list with its group taxonomy.

    ``entries[i]`` is ``(attribute_id, group_name, variety_name)`` and
    attribute ids run 1..num_attributes, so label index ``i`` corresponds
    to attribute id ``i + 1``.
    """

    entries: list

    @property
    def num_attributes(self) -> int:
        return len(self.entries)

    @property
    def names(self):
        return [g if v is None else f"{g}::{v}" for _, g, v in self.entries]

    def groups(self) -> dict:
        """Group name -> list of 0-based label indices, in first-seen order."""
        out: dict = {}
        for idx, (_, group, _) in enumerate(self.entries):
            out.setdefault(group, []).append(idx)
        return out

    def to_json(self) -> dict:
        return {
            "num_attributes": self.num_attributes,
            "attributes": [
                {"id": aid, "group": g, "variety": v} for aid, g, v in self.entries
            ],
            "groups": {g: [i + 1 for i in idx] for g, idx in self.groups().items()},
        }

    @classmethod
    def from_json(cls, obj) -> "AttributeVocabulary":
        return cls([(a["id"], a["group"], a["variety"]) for a in obj["attributes"]])


def parse_vocabulary(stream, group_size_range=None, source="attributes.txt") -> AttributeVocabulary:
    """Parse ``<id> <group>::<variety>`` lines.

    Names without ``::`` form a single-variety group named after the whole
    name (variety ``None``). When ``group_size_range`` is given, groups whose
    size falls outside the inclusive range only trigger a warning.
    """
    entries = []
    seen = set()
    for line_no, tokens in _lines(stream, source):
        if len(tokens) < 2:
            raise MalformedLine("expected '<id> <name>'", line_no, source)
        aid = _int(tokens[0], line_no, source)
        if aid in seen:
            raise DuplicateId(f"{source}:{line_no}: attribute id {aid} repeated")
        seen.add(aid)
        name = " ".join(tokens[1:])
        if "::" in name:
            group, variety = name.split("::", 1)
        else:
            group, variety = name, None
        if not group:
            raise MalformedLine("empty group name", line_no, source)
        entries.append((aid, group, variety))

    entries.sort(key=lambda e: e[0])
    for expected, (aid, _, _) in enumerate(entries, start=1):
        if aid != expected:
            raise NonContiguousIds(f"{source}: attribute ids are not 1..{len(entries)} (missing {expected})")

    vocab = AttributeVocabulary(entries)
    if group_size_range is not None:
        lo, hi = group_size_range
        for group, idx in vocab.groups().items():
            if not lo <= len(idx) <= hi:
                warnings.warn(f"attribute group {group!r} has {len(idx)} varieties, outside [{lo}, {hi}]")
    return vocab


@dataclass
class LabelMatrix:
    """Dense binary image x attribute matrix; row ``r`` belongs to ``image_ids[r]``."""

    bits: np.ndarray
    image_ids: np.ndarray

    def __post_init__(self):
        self.bits = np.ascontiguousarray(self.bits, dtype=np.uint8)
        self.image_ids = np.asarray(self.image_ids, dtype=np.int64)
        if self.bits.ndim != 2 or self.bits.shape[0] != len(self.image_ids):
            raise ValueError("bits must be 2-D with one row per image id")
        if np.any(self.bits > 1):
            raise InvalidPresenceFlag("label matrix cells must be 0 or 1")
        if len(self.image_ids) > 1 and np.any(np.diff(self.image_ids) <= 0):
            raise ValueError("image_ids must be strictly increasing")
        self._row = {int(i): r for r, i in enumerate(self.image_ids)}

    @property
    def rows(self) -> int:
        return self.bits.shape[0]

    @property
    def cols(self) -> int:
        return self.bits.shape[1]

    def row_index(self, image_id) -> int:
        try:
            return self._row[int(image_id)]
        except KeyError:
            raise UnknownImageId(f"image id {image_id} not in label matrix") from None

    def rows_for(self, ids) -> np.ndarray:
        return self.bits[[self.row_index(i) for i in ids]]

    def empty_rows(self) -> np.ndarray:
        """Image ids with no positive attribute (kept, but skipped by losses/metrics)."""
        return self.image_ids[self.bits.sum(axis=1) == 0]

    def __eq__(self, other):
        if not isinstance(other, LabelMatrix):
            return NotImplemented
        return np.array_equal(self.bits, other.bits) and np.array_equal(self.image_ids, other.image_ids)


def build_label_matrix(annotations, vocab: AttributeVocabulary, num_images: int, strict=False,
                       source="image_attribute_labels.txt") -> LabelMatrix:
    """Transcribe per-(image, attribute) presence lines into a binary matrix.

    Certainty and time columns are discarded. With ``strict=True`` every line
    must carry all five columns; otherwise the first three are enough. Pairs
    that never appear stay 0.
    """
    n_attr = vocab.num_attributes
    bits = np.zeros((num_images, n_attr), dtype=np.uint8)
    for line_no, tokens in _lines(annotations, source):
        if len(tokens) < 3 or (strict and len(tokens) != 5):
            raise MalformedLine(f"expected 5 columns, got {len(tokens)}", line_no, source)
        img = _int(tokens[0], line_no, source)
        attr = _int(tokens[1], line_no, source)
        flag = tokens[2]
        if not 1 <= img <= num_images:
            raise ImageIdOutOfRange(f"{source}:{line_no}: image id {img} not in 1..{num_images}")
        if not 1 <= attr <= n_attr:
            raise AttributeIdOutOfRange(f"{source}:{line_no}: attribute id {attr} not in 1..{n_attr}")
        if flag not in ("0", "1"):
            raise InvalidPresenceFlag(f"{source}:{line_no}: presence flag {flag!r} is not 0/1")
        bits[img - 1, attr - 1] = flag == "1"
    return LabelMatrix(bits, np.arange(1, num_images + 1))


def count_images(images_stream, source="images.txt") -> int:
    """Number of images listed in ``images.txt``; ids must be 1..n."""
    ids = [_int(tokens[0], line_no, source) for line_no, tokens in _lines(images_stream, source)]
    if sorted(ids) != list(range(1, len(ids) + 1)):
        raise NonContiguousIds(f"{source}: image ids are not 1..{len(ids)}")
    return len(ids)


def write_label_matrix(matrix: LabelMatrix, sink) -> None:
    """Serialize as FTLM: header, row-major little-endian packed bits, u32 image ids, CRC32."""
    payload = bytearray()
    payload += FTLM_MAGIC
    payload += struct.pack("<III", FTLM_VERSION, matrix.rows, matrix.cols)
    payload += np.packbits(matrix.bits.reshape(-1), bitorder="little").tobytes()
    payload += matrix.image_ids.astype("<u4").tobytes()
    payload += struct.pack("<I", crc32(payload))
    sink.write(bytes(payload))


def read_label_matrix(source) -> LabelMatrix:
    buf = source.read() if hasattr(source, "read") else source
    body = check_trailing_crc(buf, "FTLM file")
    r = Reader(body, "FTLM file")
    r.expect_magic(FTLM_MAGIC)
    version, rows, cols = r.unpack("<III")
    if version != FTLM_VERSION:
        raise MalformedLine(f"unsupported FTLM version {version}")
    nbytes = (rows * cols + 7) // 8
    packed = np.frombuffer(r.take(nbytes), dtype=np.uint8)
    bits = np.unpackbits(packed, count=rows * cols, bitorder="little").reshape(rows, cols)
    ids = np.frombuffer(r.take(4 * rows), dtype="<u4").astype(np.int64)
    return LabelMatrix(bits, ids)


@dataclass
class DatasetSplit:
    train_ids: list
    val_ids: list
    test_ids: list
    seed: int = 0

    def all_ids(self):
        return sorted(self.train_ids + self.val_ids + self.test_ids)

    def subset(self, name) -> list:
        return {"train": self.train_ids, "val": self.val_ids, "test": self.test_ids}[name]

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "val_size": len(self.val_ids),
            "train": list(self.train_ids),
            "val": list(self.val_ids),
            "test": list(self.test_ids),
        }

    @classmethod
    def from_json(cls, obj) -> "DatasetSplit":
        return cls(list(obj["train"]), list(obj["val"]), list(obj["test"]), obj.get("seed", 0))

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True) + "\n"


def make_split(official_split, val_size: int, seed: int, source="train_test_split.txt") -> DatasetSplit:
    """Keep the official train set and carve a seeded validation sample out of the test set.

    The validation ids are a uniform sample without replacement from the
    official test partition, drawn from the ``"split"`` stream of ``seed``.
    """
    train, test = [], []
    seen = set()
    for line_no, tokens in _lines(official_split, source):
        if len(tokens) != 2 or tokens[1] not in ("0", "1"):
            raise MalformedLine("expected '<image_id> <is_train:0|1>'", line_no, source)
        img = _int(tokens[0], line_no, source)
        if img in seen:
            raise DuplicateId(f"{source}:{line_no}: image id {img} repeated")
        seen.add(img)
        (train if tokens[1] == "1" else test).append(img)
    train.sort()
    test.sort()
    if val_size < 0 or val_size > len(test):
        raise ValSizeTooLarge(f"val_size={val_size} exceeds the {len(test)}-image test partition")
    rng = seeding.stream(seed, "split")
    picked = rng.choice(len(test), size=val_size, replace=False) if val_size else []
    val = sorted(test[i] for i in picked)
    val_set = set(val)
    rest = [i for i in test if i not in val_set]
    return DatasetSplit(train, val, rest, seed)


def label_frequencies(matrix: LabelMatrix, ids) -> np.ndarray:
    """Per-attribute count of positives among ``ids``."""
    ids = list(ids)
    if not ids:
        return np.zeros(matrix.cols, dtype=np.int64)
    return matrix.rows_for(ids).sum(axis=0, dtype=np.int64)
