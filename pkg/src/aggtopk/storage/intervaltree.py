"""Static external interval tree (slab layout) with an in-memory append tail.

The time axis is cut into slabs at entry start times. Every entry is copied
into each slab it overlaps, and a slab is closed once the entries starting
inside it outnumber half of ``max(alive, B)`` where ``alive`` is the number of
entries crossing its left boundary. That keeps the total copy count linear in
``N`` while a stab reads one slab: ``O(alive/B + 1)`` pages after an
``O(log_B N)`` directory lookup.

Intervals are half-open ``[lo, hi)``; an entry flagged ``closed`` also contains
``hi``.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from ..errors import BuildError
from .blockstore import BlockStore, IoStats
from .bptree import BPlusTree, TreeState

_DIR_FIELDS = [("first_page", "<i8"), ("count", "<i8")]


def interval_dtype(value_fields: Sequence[tuple[str, str]]) -> np.dtype:
    return np.dtype([("lo", "<f8"), ("hi", "<f8"), ("closed", "u1"), ("primary", "u1"), *value_fields])


@dataclass
class IntervalTreeState:
    directory: TreeState
    n_entries: int
    n_slabs: int
    n_slab_pages: int
    total_copies: int


class ExternalIntervalTree:
    def __init__(
        self,
        store: BlockStore,
        value_fields: Sequence[tuple[str, str]],
        state: IntervalTreeState | None = None,
    ) -> None:
        self.store = store
        self.value_fields = list(value_fields)
        self.dtype = interval_dtype(value_fields)
        self.capacity = store.page_size // self.dtype.itemsize
        if self.capacity < 2:
            raise BuildError(f"entry width {self.dtype.itemsize} too large for page size {store.page_size}")
        self.directory = BPlusTree(store, _DIR_FIELDS, state.directory if state else None)
        self.state = state or IntervalTreeState(self.directory.state, 0, 0, 0, 0)
        self._tail: list[np.ndarray] = []
        self._tail_arr: np.ndarray | None = None
        self._last_slab: tuple[int, int] = (-1, 0)
        self._slab_base = -1

    # build --------------------------------------------------------------------

    def bulk_build(self, entries: np.ndarray, io: IoStats | None = None) -> None:
        """Build over ``entries`` (needs ``lo``, ``hi``, ``closed`` and value fields)."""
        if self.state.n_entries or self.directory.state.root != -1:
            raise BuildError("bulk_build on a non-empty interval tree")
        ents = np.zeros(len(entries), self.dtype)
        for name in self.dtype.names:
            if name == "primary":
                continue
            if name == "closed" and "closed" not in (entries.dtype.names or ()):
                continue
            ents[name] = entries[name]
        lo, hi = ents["lo"], ents["hi"]
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise BuildError("interval endpoints must be finite")
        if np.any(lo >= hi):
            raise BuildError("every interval needs lo < hi")
        n = len(ents)
        if n == 0:
            self.state = IntervalTreeState(self.directory.state, 0, 0, 0, 0)
            return
        ents = ents[np.argsort(lo, kind="stable")]
        lo, hi = ents["lo"], ents["hi"]
        closed = ents["closed"].astype(bool)
        starts = self._slab_starts(lo, hi, closed)
        k_first = np.searchsorted(starts, lo, "right") - 1
        k_last = np.where(
            closed,
            np.searchsorted(starts, hi, "right") - 1,
            np.searchsorted(starts, hi, "left") - 1,
        )
        reps = k_last - k_first + 1
        src = np.repeat(np.arange(n), reps)
        first_of = np.repeat(np.cumsum(reps) - reps, reps)
        slab = k_first[src] + (np.arange(len(src)) - first_of)
        order = np.argsort(slab, kind="stable")
        copies = ents[src[order]]
        copies["primary"] = (slab[order] == k_first[src[order]]).astype(np.uint8)
        slab = slab[order]
        n_slabs = len(starts)
        per_slab = np.bincount(slab, minlength=n_slabs)
        pages_per = np.maximum(1, -(-per_slab // self.capacity))
        total_pages = int(pages_per.sum())
        first = self.store.allocate(total_pages)
        slab_first = first + np.concatenate(([0], np.cumsum(pages_per)[:-1]))
        # lay copies out page-aligned per slab
        buf = np.zeros(total_pages * self.capacity, self.dtype)
        slot0 = (slab_first - first) * self.capacity
        pos_in_slab = np.arange(len(copies)) - np.repeat(np.concatenate(([0], np.cumsum(per_slab)[:-1])), per_slab)
        buf[slot0[slab] + pos_in_slab] = copies
        pad = self.store.page_size - self.capacity * self.dtype.itemsize
        raw = buf.reshape(total_pages, self.capacity)
        if pad:
            page_dt = np.dtype([("ents", self.dtype, (self.capacity,)), ("tail", f"V{pad}")])
            pages = np.zeros(total_pages, page_dt)
            pages["ents"] = raw
            self.store.write_pages(first, pages.tobytes(), io)
        else:
            self.store.write_pages(first, raw.tobytes(), io)
        ends = np.concatenate((starts[1:], [math.inf]))
        d = np.zeros(n_slabs, self.directory.dtype)
        d["key"] = ends
        d["first_page"] = slab_first
        d["count"] = per_slab
        # +inf keys are not allowed in the tree; the last slab is reached by
        # a fallback to the final directory leaf.
        self.directory.bulk_load(d[:-1], io)
        self._last_slab = (int(slab_first[-1]), int(per_slab[-1]))
        self._slab_base = int(first)
        self.state = IntervalTreeState(self.directory.state, n, n_slabs, total_pages, len(copies))

    def _slab_starts(self, lo: np.ndarray, hi: np.ndarray, closed: np.ndarray) -> np.ndarray:
        times, counts = np.unique(lo, return_counts=True)
        cum = np.cumsum(counts)
        his = np.sort(np.where(closed, np.nextafter(hi, math.inf), hi))
        B = self.capacity
        starts = []
        a = 0
        while a < len(times):
            starts.append(times[a])
            before = cum[a - 1] if a else 0
            alive = before - int(np.searchsorted(his, times[a], "right"))
            budget = max(alive, B) / 2
            b = int(np.searchsorted(cum, before + budget, "right"))
            a = max(b, a + 1)
        return np.asarray(starts)

    # persistence ----------------------------------------------------------------

    def to_meta(self) -> dict:
        return {
            "directory": self.directory.state.to_json(),
            "n_entries": self.state.n_entries,
            "n_slabs": self.state.n_slabs,
            "n_slab_pages": self.state.n_slab_pages,
            "total_copies": self.state.total_copies,
            "last_slab": list(self._last_slab),
            "slab_base": self._slab_base,
        }

    @classmethod
    def from_meta(cls, store: BlockStore, value_fields: Sequence[tuple[str, str]], meta: dict) -> ExternalIntervalTree:
        st = IntervalTreeState(
            TreeState(**meta["directory"]), meta["n_entries"], meta["n_slabs"], meta["n_slab_pages"], meta["total_copies"]
        )
        tree = cls(store, value_fields, st)
        tree._last_slab = tuple(meta["last_slab"])
        tree._slab_base = meta["slab_base"]
        return tree

    # queries --------------------------------------------------------------------

    def __len__(self) -> int:
        return self.state.n_entries + sum(len(t) for t in self._tail)

    @property
    def n_pages(self) -> int:
        return self.state.n_slab_pages + self.directory.n_pages

    def _slab_for(self, t: float, io: IoStats | None) -> tuple[int, int] | None:
        if self.state.n_slabs == 0:
            return None
        rec = self.directory.search_first_gt(t, io)
        if rec is None:
            return self._last_slab
        return int(rec["first_page"]), int(rec["count"])

    def stab(self, t: float, io: IoStats | None = None) -> np.ndarray:
        """Entries with ``lo <= t < hi`` (or ``t == hi`` for closed entries)."""
        parts = []
        slab = self._slab_for(t, io)
        if slab is not None and slab[1]:
            first, count = slab
            n_pages = -(-count // self.capacity)
            raw = self.store.read_pages(first, n_pages, io)
            ents = self._decode_pages(raw, n_pages)[:count]
            parts.append(ents[_contains(ents, t)])
        tail = self.tail
        if len(tail):
            parts.append(tail[_contains(tail, t)])
        if not parts:
            return np.zeros(0, self.dtype)
        return parts[0] if len(parts) == 1 else np.concatenate(parts)

    def _decode_pages(self, raw: bytes, n_pages: int) -> np.ndarray:
        width = self.capacity * self.dtype.itemsize
        if width == self.store.page_size:
            return np.frombuffer(raw, self.dtype)
        page_dt = np.dtype([("ents", self.dtype, (self.capacity,)), ("tail", f"V{self.store.page_size - width}")])
        return np.frombuffer(raw, page_dt, n_pages)["ents"].reshape(-1)

    def entries(self, io: IoStats | None = None) -> np.ndarray:
        """Every stored entry once (primary copies plus the tail), sorted by ``lo``."""
        parts = []
        if self.state.n_slab_pages:
            raw = self.store.read_pages(self._slab_base, self.state.n_slab_pages, io)
            ents = self._decode_pages(raw, self.state.n_slab_pages)
            parts.append(ents[ents["primary"] == 1])
        if len(self.tail):
            parts.append(self.tail)
        if not parts:
            return np.zeros(0, self.dtype)
        out = np.concatenate(parts)
        return out[np.argsort(out["lo"], kind="stable")]

    # updates --------------------------------------------------------------------

    @property
    def tail(self) -> np.ndarray:
        if self._tail_arr is None:
            self._tail_arr = np.concatenate(self._tail) if self._tail else np.zeros(0, self.dtype)
        return self._tail_arr

    def append(self, entry: np.ndarray) -> None:
        """Buffer one entry (a 1-element array of :attr:`dtype`) in the tail."""
        e = np.zeros(1, self.dtype)
        for name in self.dtype.names:
            if name in (entry.dtype.names or ()):
                e[name] = entry[name]
        if not e["lo"][0] < e["hi"][0]:
            raise BuildError("every interval needs lo < hi")
        e["primary"] = 1
        self._tail.append(e)
        self._tail_arr = None

    def replace_tail(self, tail: np.ndarray) -> None:
        self._tail = [tail.copy()] if len(tail) else []
        self._tail_arr = None


def _contains(ents: np.ndarray, t: float) -> np.ndarray:
    lo, hi = ents["lo"], ents["hi"]
    return (lo <= t) & ((t < hi) | ((ents["closed"] == 1) & (t == hi)))
