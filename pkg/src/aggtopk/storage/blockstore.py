"""Paged storage with page-access accounting.

A :class:`BlockStore` is a flat array of fixed-size pages, kept either in
memory or in a file. Every page read or write bumps an :class:`IoStats`
counter (one per page) unless the page is served from the optional LRU cache.
Page 0 of a sealed store is the index-file header::

    magic 'TRNK' | version u2 | kind 4s | page_size u4 | entry_width u4
    root u8 | entry_count u8 | meta_page u8 | meta_len u8

``meta_page``/``meta_len`` locate a JSON document describing the structure;
large arrays are stored in their own page runs and referenced from it.
"""

from __future__ import annotations

import json
import math
import os
import struct
import threading
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from ..errors import FormatError, ParameterError

MAGIC = b"TRNK"
VERSION = 1
DEFAULT_PAGE_SIZE = 4096
HEADER = struct.Struct("<4sH4sIIQQQQ")

KIND_TAGS = {
    "EX1": b"EX1 ",
    "EX2": b"EX2 ",
    "EX3": b"EX3 ",
    "Q1": b"Q1  ",
    "Q2": b"Q2  ",
}


@dataclass
class IoStats:
    reads: int = 0
    writes: int = 0

    def reset(self) -> None:
        self.reads = 0
        self.writes = 0

    def merge(self, other: IoStats) -> None:
        self.reads += other.reads
        self.writes += other.writes

    @property
    def total(self) -> int:
        return self.reads + self.writes

    def snapshot(self) -> IoStats:
        return IoStats(self.reads, self.writes)

    def __sub__(self, other: IoStats) -> IoStats:
        return IoStats(self.reads - other.reads, self.writes - other.writes)


@dataclass(frozen=True)
class Header:
    kind: str
    page_size: int
    entry_width: int
    root: int
    entry_count: int
    meta_page: int
    meta_len: int


class BlockStore:
    """Fixed-size pages in memory (``path=None``) or in a file."""

    def __init__(
        self,
        path: str | os.PathLike | None = None,
        page_size: int = DEFAULT_PAGE_SIZE,
        cache_pages: int = 0,
        *,
        _fd: int | None = None,
        _n_pages: int = 1,
    ) -> None:
        if page_size < 256 or page_size % 8:
            raise ParameterError(f"page_size must be a multiple of 8 and >= 256, got {page_size}")
        self.page_size = page_size
        self.path = Path(path) if path is not None else None
        self.stats = IoStats()
        self._cache: OrderedDict[int, bytes] | None = OrderedDict() if cache_pages > 0 else None
        self._cache_cap = cache_pages
        self._lock = threading.Lock()
        self._n_pages = _n_pages
        self._buf: bytearray | None = None
        self._fd: int | None = None
        if _fd is not None:
            self._fd = _fd
        elif self.path is None:
            self._buf = bytearray(page_size)
        else:
            self._fd = os.open(self.path, os.O_RDWR | os.O_CREAT | os.O_TRUNC, 0o644)
            os.pwrite(self._fd, bytes(page_size), 0)

    # lifecycle ----------------------------------------------------------

    @classmethod
    def open(cls, path: str | os.PathLike, cache_pages: int = 0, writable: bool = False) -> tuple[BlockStore, Header, dict]:
        """Open a sealed index file; returns ``(store, header, meta)``."""
        flags = os.O_RDWR if writable else os.O_RDONLY
        fd = os.open(path, flags)
        try:
            raw = os.pread(fd, HEADER.size, 0)
            header = _parse_header(raw, path)
            size = os.fstat(fd).st_size
            if size % header.page_size:
                raise FormatError(f"{path}: file size {size} is not a multiple of the page size")
            store = cls(path, header.page_size, cache_pages, _fd=fd, _n_pages=size // header.page_size)
            meta = json.loads(store.read_span(header.meta_page * header.page_size, header.meta_len).decode())
        except Exception:
            os.close(fd)
            raise
        store.stats.reset()
        return store, header, meta

    def close(self) -> None:
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None

    def __enter__(self) -> BlockStore:
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()

    def __del__(self) -> None:
        try:
            self.close()
        except Exception:
            pass

    @property
    def n_pages(self) -> int:
        return self._n_pages

    @property
    def size_bytes(self) -> int:
        return self._n_pages * self.page_size

    # allocation -----------------------------------------------------------

    def allocate(self, count: int = 1) -> int:
        """Reserve ``count`` contiguous pages; returns the first page id."""
        first = self._n_pages
        self._n_pages += count
        if self._buf is not None:
            self._buf.extend(bytes(count * self.page_size))
        return first

    # page IO ----------------------------------------------------------------

    def read_page(self, pid: int, io: IoStats | None = None) -> bytes:
        if self._cache is not None:
            with self._lock:
                hit = self._cache.get(pid)
                if hit is not None:
                    self._cache.move_to_end(pid)
                    return hit
        data = self._raw_read(pid * self.page_size, self.page_size)
        (io or self.stats).reads += 1
        if self._cache is not None:
            self._remember(pid, data)
        return data

    def read_pages(self, first: int, count: int, io: IoStats | None = None) -> bytes:
        if self._cache is not None:
            return b"".join(self.read_page(first + i, io) for i in range(count))
        (io or self.stats).reads += count
        return self._raw_read(first * self.page_size, count * self.page_size)

    def read_page_batch(self, pids: np.ndarray, io: IoStats | None = None) -> np.ndarray:
        """Pages ``pids`` as a ``(len(pids), page_size)`` uint8 array; one read each."""
        pids = np.asarray(pids, dtype=np.int64)
        if self._cache is not None or self._buf is None:
            rows = [self.read_page(int(p), io) for p in pids] if self._cache is not None else None
            if rows is None:
                (io or self.stats).reads += len(pids)
                rows = [self._raw_read(int(p) * self.page_size, self.page_size) for p in pids]
            return np.frombuffer(b"".join(rows), np.uint8).reshape(len(pids), self.page_size)
        (io or self.stats).reads += len(pids)
        view = np.frombuffer(self._buf, np.uint8).reshape(-1, self.page_size)
        try:
            return view[pids]
        finally:
            del view

    def read_span(self, offset: int, nbytes: int, io: IoStats | None = None) -> bytes:
        """Read ``nbytes`` starting at byte ``offset``, charging every page touched."""
        if nbytes <= 0:
            return b""
        p0 = offset // self.page_size
        p1 = (offset + nbytes - 1) // self.page_size
        data = self.read_pages(p0, p1 - p0 + 1, io)
        skip = offset - p0 * self.page_size
        return data[skip : skip + nbytes]

    def write_page(self, pid: int, data: bytes, io: IoStats | None = None) -> None:
        self.write_pages(pid, data, io)

    def write_pages(self, first: int, data: bytes | memoryview, io: IoStats | None = None) -> None:
        n = len(data)
        count = max(1, math.ceil(n / self.page_size))
        if first + count > self._n_pages:
            raise FormatError(f"write past the last allocated page ({first + count} > {self._n_pages})")
        if n % self.page_size:
            data = bytes(data) + bytes(count * self.page_size - n)
        self._raw_write(first * self.page_size, data)
        (io or self.stats).writes += count
        if self._cache is not None:
            with self._lock:
                for i in range(count):
                    if first + i in self._cache:
                        del self._cache[first + i]

    def _remember(self, pid: int, data: bytes) -> None:
        with self._lock:
            self._cache[pid] = data
            if len(self._cache) > self._cache_cap:
                self._cache.popitem(last=False)

    def drop_cache(self) -> None:
        if self._cache is not None:
            with self._lock:
                self._cache.clear()

    def _raw_read(self, offset: int, nbytes: int) -> bytes:
        if self._buf is not None:
            return bytes(self._buf[offset : offset + nbytes])
        data = os.pread(self._fd, nbytes, offset)
        if len(data) != nbytes:
            raise FormatError(f"short read at byte {offset}")
        return data

    def _raw_write(self, offset: int, data: bytes | memoryview) -> None:
        if self._buf is not None:
            self._buf[offset : offset + len(data)] = data
            return
        view = memoryview(data)
        while len(view):
            done = os.pwrite(self._fd, view, offset)
            view = view[done:]
            offset += done

    # blobs ------------------------------------------------------------------

    def put_blob(self, data: bytes, io: IoStats | None = None) -> tuple[int, int]:
        """Store raw bytes in fresh pages; returns ``(first_page, nbytes)``."""
        count = max(1, math.ceil(len(data) / self.page_size))
        first = self.allocate(count)
        self.write_pages(first, data, io)
        return first, len(data)

    def get_blob(self, first: int, nbytes: int, io: IoStats | None = None) -> bytes:
        return self.read_span(first * self.page_size, nbytes, io)

    def put_array(self, arr: np.ndarray, io: IoStats | None = None) -> dict[str, Any]:
        arr = np.ascontiguousarray(arr)
        first, nbytes = self.put_blob(arr.tobytes(), io)
        return {"page": first, "nbytes": nbytes, "dtype": _dtype_to_json(arr.dtype), "shape": list(arr.shape)}

    def get_array(self, desc: dict[str, Any], io: IoStats | None = None) -> np.ndarray:
        dtype = _dtype_from_json(desc["dtype"])
        raw = self.get_blob(desc["page"], desc["nbytes"], io)
        return np.frombuffer(raw, dtype=dtype).reshape(desc["shape"]).copy()

    # header ---------------------------------------------------------------

    def seal(self, kind: str, entry_width: int, root: int, entry_count: int, meta: dict[str, Any]) -> Header:
        """Write the metadata document and the page-0 header."""
        if kind not in KIND_TAGS:
            raise ParameterError(f"unknown structure kind {kind!r}")
        blob = json.dumps(meta, sort_keys=True).encode()
        meta_page, meta_len = self.put_blob(blob, IoStats())
        header = Header(kind, self.page_size, entry_width, root, entry_count, meta_page, meta_len)
        raw = HEADER.pack(
            MAGIC, VERSION, KIND_TAGS[kind], self.page_size, entry_width, root, entry_count, meta_page, meta_len
        )
        self.write_pages(0, raw, IoStats())
        if self._fd is not None:
            os.fsync(self._fd)
        return header

    def save_as(self, path: str | os.PathLike) -> None:
        """Copy an in-memory store to a file."""
        if self._buf is None:
            raise FormatError("save_as is only meaningful for in-memory stores")
        tmp = Path(str(path) + ".tmp")
        with open(tmp, "wb") as fh:
            fh.write(self._buf)
        os.replace(tmp, path)


def _parse_header(raw: bytes, path: object) -> Header:
    if len(raw) < HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, tag, page_size, width, root, count, meta_page, meta_len = HEADER.unpack(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    kinds = {v: k for k, v in KIND_TAGS.items()}
    if tag not in kinds:
        raise FormatError(f"{path}: unknown structure kind {tag!r}")
    return Header(kinds[tag], page_size, width, root, count, meta_page, meta_len)


def read_header(path: str | os.PathLike) -> Header:
    with open(path, "rb") as fh:
        return _parse_header(fh.read(HEADER.size), path)


def _dtype_to_json(dt: np.dtype) -> Any:
    if dt.fields is None:
        return dt.str
    return [[name, dt.fields[name][0].str] for name in dt.names]


def _dtype_from_json(spec: Any) -> np.dtype:
    if isinstance(spec, str):
        return np.dtype(spec)
    return np.dtype([(name, fmt) for name, fmt in spec])
