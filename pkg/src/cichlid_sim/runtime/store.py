"""Backing store for paged-out pages.

On-disk layout (little-endian), see ``docs/store-format.md``::

    8 bytes   magic "CCLDSTOR"
    u32       page size
    u32       page count N
    N x u64   page indices, ascending
    N pages   raw page images, in index order
"""

from __future__ import annotations

import struct
from pathlib import Path

from ..errors import StoreFull

MAGIC = b"CCLDSTOR"
_HEADER = struct.Struct("<8sII")


class BackingStore:
    def __init__(self, page_size: int = 4096, capacity: int | None = None):
        self.page_size = page_size
        self.capacity = capacity
        self.pages: dict[int, bytes] = {}
        self.writes = 0
        self.reads = 0

    def __contains__(self, index: int) -> bool:
        return index in self.pages

    def __len__(self) -> int:
        return len(self.pages)

    def write(self, index: int, data: bytes) -> None:
        if len(data) != self.page_size:
            raise ValueError(f"page image must be {self.page_size} bytes")
        if index not in self.pages and self.capacity is not None and len(self.pages) >= self.capacity:
            raise StoreFull(f"store holds {self.capacity} pages")
        self.pages[index] = bytes(data)
        self.writes += 1

    def read(self, index: int) -> bytes:
        self.reads += 1
        return self.pages[index]

    def discard(self, index: int) -> None:
        self.pages.pop(index, None)

    def to_bytes(self) -> bytes:
        keys = sorted(self.pages)
        parts = [_HEADER.pack(MAGIC, self.page_size, len(keys)),
                 struct.pack(f"<{len(keys)}Q", *keys)]
        parts.extend(self.pages[k] for k in keys)
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, blob: bytes, capacity: int | None = None) -> BackingStore:
        if len(blob) < _HEADER.size:
            raise ValueError("truncated store header")
        magic, page_size, count = _HEADER.unpack_from(blob)
        if magic != MAGIC:
            raise ValueError("not a backing store image")
        offset = _HEADER.size
        keys = struct.unpack_from(f"<{count}Q", blob, offset)
        offset += 8 * count
        if len(blob) != offset + count * page_size:
            raise ValueError("store image length does not match its header")
        store = cls(page_size, capacity)
        for i, k in enumerate(keys):
            store.pages[k] = blob[offset + i * page_size:offset + (i + 1) * page_size]
        return store

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path, capacity: int | None = None) -> BackingStore:
        return cls.from_bytes(Path(path).read_bytes(), capacity)
