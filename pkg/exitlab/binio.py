"""
Little-endian binary framing shared by the database, checkpoint and dataset
files.

A framed stream is ``magic | payload | crc32(payload)``. The CRC is checked
before any field is decoded, so a corrupted stream never yields a partial
object.
"""

import struct
import zlib
from typing import Any, List, Tuple

import numpy as np

from exitlab.errors import FormatError

_CRC = struct.Struct("<I")
F32 = np.dtype("<f4")


class FrameWriter:
    """Accumulates payload fields and seals them behind a magic and a CRC."""

    def __init__(self, magic: bytes):
        self.magic = magic
        self._parts: List[bytes] = []

    def pack(self, fmt: str, *values: Any) -> None:
        self._parts.append(struct.pack("<" + fmt, *values))

    def floats(self, values: np.ndarray) -> None:
        self._parts.append(np.ascontiguousarray(values, dtype=F32).tobytes())

    def seal(self) -> bytes:
        payload = b"".join(self._parts)
        return self.magic + payload + _CRC.pack(zlib.crc32(payload) & 0xFFFFFFFF)


class FrameReader:
    """Sequential field reader over a verified payload.

    Offsets reported in errors are absolute positions in the original stream.
    """

    def __init__(self, magic: bytes, blob: bytes):
        blob = bytes(blob)
        head = len(magic)
        if blob[:head] != magic:
            raise FormatError(f"bad magic, expected {magic!r}", 0)
        if len(blob) < head + _CRC.size:
            raise FormatError("stream truncated before checksum", len(blob))
        payload = blob[head : len(blob) - _CRC.size]
        (stored,) = _CRC.unpack_from(blob, len(blob) - _CRC.size)
        if zlib.crc32(payload) & 0xFFFFFFFF != stored:
            raise FormatError("checksum mismatch", len(blob) - _CRC.size)
        self._payload = payload
        self._base = head
        self._pos = 0

    @property
    def offset(self) -> int:
        return self._base + self._pos

    def _take(self, size: int, what: str) -> bytes:
        if size < 0 or self._pos + size > len(self._payload):
            raise FormatError(f"truncated while reading {what}", self.offset)
        chunk = self._payload[self._pos : self._pos + size]
        self._pos += size
        return chunk

    def unpack(self, fmt: str, what: str) -> Tuple[Any, ...]:
        layout = struct.Struct("<" + fmt)
        return layout.unpack(self._take(layout.size, what))

    def floats(self, count: int, what: str) -> np.ndarray:
        raw = self._take(count * F32.itemsize, what)
        return np.frombuffer(raw, dtype=F32).copy()

    def finish(self) -> None:
        if self._pos != len(self._payload):
            raise FormatError("unexpected trailing bytes", self.offset)
