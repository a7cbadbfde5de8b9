"""Exact top-k engines over paged storage.

* :class:`Exact1Index` keeps every segment in one B+-tree keyed by its left
  end and integrates the segments overlapping the query.
* :class:`Exact2Index` keeps one B+-tree of prefix entries per object and
  answers each object's score from two lookups.
* :class:`Exact3Index` puts all prefix entries in one external interval tree
  and answers every object's score from two stabbing queries.

All three share :class:`ObjectCatalog`, an O(m) in-memory summary (extent,
total and last vertex per object) persisted with the index.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import ClassVar

import numpy as np

from .errors import DiscontinuityError, DomainError, FormatError, OutOfOrderError
from .model import Dataset, QuerySpec, RankedAnswer, Segment, clipped_integrals, ranked
from .storage.blockstore import DEFAULT_PAGE_SIZE, BlockStore, IoStats
from .storage.bptree import (
    TREE_STATE_DTYPE,
    BPlusTree,
    TreeState,
    locate_many,
    state_from_record,
    states_to_array,
)
from .storage.intervaltree import ExternalIntervalTree

_JUNCTION_TOL = 1e-12


@dataclass
class ObjectCatalog:
    T: float
    starts: np.ndarray
    ends: np.ndarray
    totals: np.ndarray
    last_values: np.ndarray

    @classmethod
    def from_dataset(cls, ds: Dataset) -> ObjectCatalog:
        last = ds.offsets[1:] - 1
        return cls(
            ds.T,
            ds.starts.copy(),
            ds.ends.copy(),
            ds.object_masses.copy(),
            ds.values[last].copy() if ds.m else np.zeros(0),
        )

    @property
    def m(self) -> int:
        return len(self.starts)

    def check_append(self, seg: Segment) -> None:
        i = seg.object_id
        if not 1 <= i <= self.m:
            raise DomainError(f"unknown object id {i}")
        end, last = self.ends[i - 1], self.last_values[i - 1]
        tol = _JUNCTION_TOL * max(1.0, abs(end))
        if seg.t_l < end - tol:
            raise OutOfOrderError(f"object {i}: append at t={seg.t_l} before its last vertex t={end}")
        if abs(seg.t_l - end) > tol or abs(seg.v_l - last) > _JUNCTION_TOL * max(1.0, abs(last)):
            raise DiscontinuityError(
                f"object {i}: segment starts at ({seg.t_l}, {seg.v_l}) but the last vertex is ({end}, {last})"
            )

    def record_append(self, seg: Segment) -> float:
        """Apply the append; returns the object's new total."""
        i = seg.object_id - 1
        self.totals[i] += 0.5 * (seg.t_r - seg.t_l) * (seg.v_l + seg.v_r)
        self.ends[i] = seg.t_r
        self.last_values[i] = seg.v_r
        self.T = max(self.T, seg.t_r)
        return float(self.totals[i])

    def to_meta(self, store: BlockStore) -> dict:
        arr = np.zeros(self.m, [("start", "<f8"), ("end", "<f8"), ("total", "<f8"), ("last", "<f8")])
        arr["start"], arr["end"], arr["total"], arr["last"] = self.starts, self.ends, self.totals, self.last_values
        return {"T": self.T, "objects": store.put_array(arr, IoStats())}

    @classmethod
    def from_meta(cls, store: BlockStore, meta: dict) -> ObjectCatalog:
        arr = store.get_array(meta["objects"], IoStats())
        return cls(meta["T"], arr["start"].copy(), arr["end"].copy(), arr["total"].copy(), arr["last"].copy())

    def check_interval(self, t1: float, t2: float) -> None:
        if not (math.isfinite(t1) and math.isfinite(t2)):
            raise DomainError("interval endpoints must be finite")
        if t1 > t2:
            raise DomainError(f"interval needs t1 <= t2, got [{t1}, {t2}]")
        if t1 < 0 or t2 > self.T:
            raise DomainError(f"interval [{t1}, {t2}] outside the domain [0, {self.T}]")


def prefix_sums(ds: Dataset) -> np.ndarray:
    """Per segment, the integral of its object from the object's start to the segment's right end."""
    obj, tl, tr, vl, vr = ds.segment_arrays
    full = 0.5 * (tr - tl) * (vl + vr)
    out = np.empty_like(full)
    seg_off = ds.offsets - np.arange(ds.m + 1)
    for i in range(ds.m):
        a, b = seg_off[i], seg_off[i + 1]
        np.cumsum(full[a:b], out=out[a:b])
    return out


def eq2_scores(
    p1: np.ndarray, s1: np.ndarray, p2: np.ndarray, s2: np.ndarray
) -> np.ndarray:
    """``sigma(t1, t2) = P_R - P_L + s(t1) - s(t2)``, evaluated in that grouping
    so that two endpoints landing in one entry cancel exactly."""
    return (p2 - p1) + (s1 - s2)


class ExactIndex:
    """Shared plumbing: storage, catalog, persistence, query entry point."""

    KIND: ClassVar[str] = ""
    name: ClassVar[str] = ""

    def __init__(self, store: BlockStore, catalog: ObjectCatalog) -> None:
        self.store = store
        self.catalog = catalog
        self.build_io = IoStats()
        self.n_appends = 0

    # construction -------------------------------------------------------------

    @classmethod
    def build(
        cls,
        ds: Dataset,
        path: str | os.PathLike | None = None,
        page_size: int = DEFAULT_PAGE_SIZE,
        cache_pages: int = 0,
    ):
        store = BlockStore(path, page_size, cache_pages)
        idx = cls(store, ObjectCatalog.from_dataset(ds))
        io = IoStats()
        idx._build(ds, io)
        idx.build_io = io
        idx.flush()
        store.stats.reset()
        return idx

    def _build(self, ds: Dataset, io: IoStats) -> None:
        raise NotImplementedError

    def flush(self) -> None:
        """Write the metadata document and page-0 header."""
        meta = {"catalog": self.catalog.to_meta(self.store), "n_appends": self.n_appends, **self._meta()}
        self.store.seal(self.KIND, self._entry_width(), self._root(), self._entry_count(), meta)

    def save(self, path: str | os.PathLike) -> None:
        self.flush()
        self.store.save_as(path)

    @classmethod
    def open(cls, path: str | os.PathLike, cache_pages: int = 0, writable: bool = False):
        store, header, meta = BlockStore.open(path, cache_pages, writable)
        if header.kind != cls.KIND:
            store.close()
            raise FormatError(f"{path}: holds a {header.kind} index, not {cls.KIND}")
        idx = cls(store, ObjectCatalog.from_meta(store, meta["catalog"]))
        idx.n_appends = meta.get("n_appends", 0)
        idx._load(meta)
        store.stats.reset()
        return idx

    def _meta(self) -> dict:
        raise NotImplementedError

    def _load(self, meta: dict) -> None:
        raise NotImplementedError

    def _entry_width(self) -> int:
        raise NotImplementedError

    def _root(self) -> int:
        return 0

    def _entry_count(self) -> int:
        return int(self.n_segments)

    def close(self) -> None:
        self.store.close()

    # shape --------------------------------------------------------------------

    @property
    def m(self) -> int:
        return self.catalog.m

    @property
    def T(self) -> float:
        return self.catalog.T

    @property
    def n_segments(self) -> int:
        raise NotImplementedError

    @property
    def n_pages(self) -> int:
        return self.store.n_pages

    @property
    def k_max(self) -> int:
        return max(1, self.m)

    # queries ------------------------------------------------------------------

    def scores(self, t1: float, t2: float, io: IoStats | None = None) -> np.ndarray:
        """``sigma_i(t1, t2)`` for every object, indexed 0..m-1."""
        self.catalog.check_interval(t1, t2)
        if self.m == 0:
            return np.zeros(0)
        return self._scores(float(t1), float(t2), io)

    def _scores(self, t1: float, t2: float, io: IoStats | None) -> np.ndarray:
        raise NotImplementedError

    def query(self, q: QuerySpec, io: IoStats | None = None) -> RankedAnswer:
        s = self.scores(q.t1, q.t2, io)
        if len(s) == 0:
            return RankedAnswer()
        return ranked(s, q.k, q)

    # updates ------------------------------------------------------------------

    def append(self, seg: Segment, io: IoStats | None = None) -> None:
        """Extend object ``seg.object_id`` by one segment starting at its last vertex."""
        self.catalog.check_append(seg)
        prev_total = float(self.catalog.totals[seg.object_id - 1])
        self._append(seg, prev_total, io)
        self.catalog.record_append(seg)
        self.n_appends += 1

    def _append(self, seg: Segment, prev_total: float, io: IoStats | None) -> None:
        raise NotImplementedError


# --------------------------------------------------------------------------
# EXACT1


EX1_FIELDS = [("t_r", "<f8"), ("v_l", "<f8"), ("v_r", "<f8"), ("obj", "<u4")]


class Exact1Index(ExactIndex):
    KIND = "EX1"
    name = "exact1"

    def __init__(self, store: BlockStore, catalog: ObjectCatalog) -> None:
        super().__init__(store, catalog)
        self.tree = BPlusTree(store, EX1_FIELDS)

    def _build(self, ds: Dataset, io: IoStats) -> None:
        obj, tl, tr, vl, vr = ds.segment_arrays
        order = np.argsort(tl, kind="stable")
        e = np.zeros(len(tl), self.tree.dtype)
        e["key"], e["t_r"], e["v_l"], e["v_r"], e["obj"] = tl[order], tr[order], vl[order], vr[order], obj[order]
        self.tree.bulk_load(e, io)

    def _meta(self) -> dict:
        return {"tree": self.tree.state.to_json()}

    def _load(self, meta: dict) -> None:
        self.tree.state = TreeState(**meta["tree"])

    def _entry_width(self) -> int:
        return self.tree.entry_width

    def _root(self) -> int:
        return max(self.tree.state.root, 0)

    @property
    def n_segments(self) -> int:
        return len(self.tree)

    def _scores(self, t1: float, t2: float, io: IoStats | None) -> np.ndarray:
        cat = self.catalog
        acc = np.zeros(self.m)
        cur = self.tree.locate(t1, "left", io)
        back_from = cur if cur is not None else self.tree.end_cursor(io)
        # objects whose extent strictly contains t1 each own exactly one
        # segment with t_L < t1 <= t_R; walk left until all are found.
        need = int(np.count_nonzero((cat.starts < t1) & (cat.ends > t1)))
        found = 0
        if need:
            for chunk in self.tree.scan_backward(back_from, io):
                hit = chunk[chunk["t_r"] >= t1]
                if len(hit):
                    self._accumulate(acc, hit, t1, t2)
                    found += len(hit)
                if found >= need:
                    break
        if t2 > t1:
            for chunk in self.tree.scan_forward(cur, io):
                if chunk["key"][-1] < t2:
                    self._accumulate(acc, chunk, t1, t2)
                else:
                    cut = int(np.searchsorted(chunk["key"], t2, "left"))
                    if cut:
                        self._accumulate(acc, chunk[:cut], t1, t2)
                    break
        return acc

    def _accumulate(self, acc: np.ndarray, ents: np.ndarray, t1: float, t2: float) -> None:
        contrib = clipped_integrals(ents["key"], ents["t_r"], ents["v_l"], ents["v_r"], t1, t2)
        np.add.at(acc, ents["obj"].astype(np.int64) - 1, contrib)

    def _append(self, seg: Segment, prev_total: float, io: IoStats | None) -> None:
        self.tree.insert((seg.t_l, seg.t_r, seg.v_l, seg.v_r, seg.object_id), io)


# --------------------------------------------------------------------------
# EXACT2


EX2_FIELDS = [("v_l", "<f8"), ("v_r", "<f8"), ("t_l", "<f8"), ("prefix", "<f8")]


class Exact2Index(ExactIndex):
    KIND = "EX2"
    name = "exact2"

    def __init__(self, store: BlockStore, catalog: ObjectCatalog) -> None:
        super().__init__(store, catalog)
        self._proto = BPlusTree(store, EX2_FIELDS)
        self.trees = np.zeros(catalog.m, TREE_STATE_DTYPE)

    def tree(self, object_id: int) -> BPlusTree:
        return BPlusTree(self.store, EX2_FIELDS, state_from_record(self.trees[object_id - 1]))

    def _build(self, ds: Dataset, io: IoStats) -> None:
        obj, tl, tr, vl, vr = ds.segment_arrays
        prefix = prefix_sums(ds)
        e = np.zeros(len(tl), self._proto.dtype)
        e["key"], e["v_l"], e["v_r"], e["t_l"], e["prefix"] = tr, vl, vr, tl, prefix
        seg_off = ds.offsets - np.arange(ds.m + 1)
        states = []
        for i in range(ds.m):
            t = BPlusTree(self.store, EX2_FIELDS)
            t.bulk_load(e[seg_off[i] : seg_off[i + 1]], io)
            states.append(t.state)
        self.trees = states_to_array(states)

    def _meta(self) -> dict:
        return {"trees": self.store.put_array(self.trees, IoStats())}

    def _load(self, meta: dict) -> None:
        self.trees = self.store.get_array(meta["trees"], IoStats())

    def _entry_width(self) -> int:
        return self._proto.entry_width

    @property
    def n_segments(self) -> int:
        return int(self.trees["count"].sum())

    def _endpoint(self, t: float, ids: np.ndarray, io: IoStats | None) -> tuple[np.ndarray, np.ndarray]:
        """``(P, s)`` for time ``t`` and objects ``ids`` (1-based)."""
        cat = self.catalog
        j = ids - 1
        st = self.trees[j]
        before = t <= cat.starts[j]
        after = t > st["max_key"]
        roots = np.where(before | after, -1, st["root"])
        found, rec = locate_many(self.store, self._proto.dtype, roots, np.full(len(ids), t), "left", io)
        p = np.where(after, cat.totals[j], 0.0)
        s = np.zeros(len(ids))
        if np.any(found):
            r = rec[found]
            p[found] = r["prefix"]
            s[found] = clipped_integrals(r["t_l"], r["key"], r["v_l"], r["v_r"], t, r["key"])
        return p, s

    def _scores(self, t1: float, t2: float, io: IoStats | None) -> np.ndarray:
        return self.score_objects(np.arange(1, self.m + 1), t1, t2, io)

    def score_objects(self, ids: np.ndarray, t1: float, t2: float, io: IoStats | None = None) -> np.ndarray:
        """Exact ``sigma_i(t1, t2)`` for the given 1-based object ids."""
        ids = np.asarray(ids, dtype=np.int64)
        if len(ids) == 0:
            return np.zeros(0)
        p1, s1 = self._endpoint(t1, ids, io)
        p2, s2 = self._endpoint(t2, ids, io)
        return eq2_scores(p1, s1, p2, s2)

    def prefix_entries(self, object_id: int) -> np.ndarray:
        return self.tree(object_id).items(IoStats())

    def _append(self, seg: Segment, prev_total: float, io: IoStats | None) -> None:
        t = self.tree(seg.object_id)
        prefix = prev_total + 0.5 * (seg.t_r - seg.t_l) * (seg.v_l + seg.v_r)
        t.append((seg.t_r, seg.v_l, seg.v_r, seg.t_l, prefix), io)
        self.trees[seg.object_id - 1] = states_to_array([t.state])[0]


# --------------------------------------------------------------------------
# EXACT3


EX3_FIELDS = [("obj", "<u4"), ("v_l", "<f8"), ("v_r", "<f8"), ("prefix", "<f8")]


class Exact3Index(ExactIndex):
    KIND = "EX3"
    name = "exact3"
    #: merge the append tail into the static structure once it exceeds
    #: ``max(TAIL_MIN, n_entries * TAIL_FRACTION)`` entries
    TAIL_MIN = 4096
    TAIL_FRACTION = 0.125

    def __init__(self, store: BlockStore, catalog: ObjectCatalog) -> None:
        super().__init__(store, catalog)
        self.itree = ExternalIntervalTree(store, EX3_FIELDS)
        self.n_rebuilds = 0

    @staticmethod
    def entries_for(ds: Dataset) -> np.ndarray:
        obj, tl, tr, vl, vr = ds.segment_arrays
        e = np.zeros(len(tl), [("lo", "<f8"), ("hi", "<f8"), ("closed", "u1"), *EX3_FIELDS])
        e["lo"], e["hi"], e["obj"], e["v_l"], e["v_r"] = tl, tr, obj, vl, vr
        e["prefix"] = prefix_sums(ds)
        if ds.m:
            e["closed"][ds.offsets[1:] - np.arange(1, ds.m + 1) - 1] = 1
        return e

    def _build(self, ds: Dataset, io: IoStats) -> None:
        self.itree.bulk_build(self.entries_for(ds), io)

    def _meta(self) -> dict:
        meta = {"itree": self.itree.to_meta(), "n_rebuilds": self.n_rebuilds}
        if len(self.itree.tail):
            meta["tail"] = self.store.put_array(self.itree.tail, IoStats())
        return meta

    def _load(self, meta: dict) -> None:
        self.itree = ExternalIntervalTree.from_meta(self.store, EX3_FIELDS, meta["itree"])
        self.n_rebuilds = meta.get("n_rebuilds", 0)
        if "tail" in meta:
            self.itree.replace_tail(self.store.get_array(meta["tail"], IoStats()))

    def _entry_width(self) -> int:
        return self.itree.dtype.itemsize

    def _root(self) -> int:
        return max(self.itree.directory.state.root, 0)

    @property
    def n_segments(self) -> int:
        return len(self.itree)

    def stab(self, t: float, io: IoStats | None = None) -> np.ndarray:
        """Entries containing ``t``, at most one per object.

        Right after an append an object can own two entries meeting at ``t``
        (its old closed final entry and the new one); the later one is kept.
        """
        ents = self.itree.stab(t, io)
        if len(ents) < 2:
            return ents
        ents = ents[np.lexsort((ents["lo"], ents["obj"]))]
        keep = np.ones(len(ents), dtype=bool)
        keep[:-1] = ents["obj"][1:] != ents["obj"][:-1]
        return ents[keep]

    def _endpoint(self, t: float, io: IoStats | None) -> tuple[np.ndarray, np.ndarray]:
        cat = self.catalog
        p = np.where(t > cat.ends, cat.totals, 0.0)
        s = np.zeros(self.m)
        ents = self.stab(t, io)
        if len(ents):
            j = ents["obj"].astype(np.int64) - 1
            p[j] = ents["prefix"]
            s[j] = clipped_integrals(ents["lo"], ents["hi"], ents["v_l"], ents["v_r"], t, ents["hi"])
            at_start = t <= cat.starts[j]
            p[j[at_start]] = 0.0
            s[j[at_start]] = 0.0
        return p, s

    def _scores(self, t1: float, t2: float, io: IoStats | None) -> np.ndarray:
        p1, s1 = self._endpoint(t1, io)
        p2, s2 = self._endpoint(t2, io)
        return eq2_scores(p1, s1, p2, s2)

    def _append(self, seg: Segment, prev_total: float, io: IoStats | None) -> None:
        e = np.zeros(1, self.itree.dtype)
        e["lo"], e["hi"], e["closed"] = seg.t_l, seg.t_r, 1
        e["obj"], e["v_l"], e["v_r"] = seg.object_id, seg.v_l, seg.v_r
        e["prefix"] = prev_total + 0.5 * (seg.t_r - seg.t_l) * (seg.v_l + seg.v_r)
        self.itree.append(e)

    def append(self, seg: Segment, io: IoStats | None = None) -> None:
        super().append(seg, io)
        if len(self.itree.tail) > max(self.TAIL_MIN, self.TAIL_FRACTION * self.itree.state.n_entries):
            self.merge_tail(io)

    def merge_tail(self, io: IoStats | None = None) -> None:
        """Rebuild the static structure over all entries, emptying the tail."""
        ents = self.itree.entries(io)
        ends = self.catalog.ends[ents["obj"].astype(np.int64) - 1]
        ents["closed"] = (ents["hi"] == ends).astype(np.uint8)
        fresh = ExternalIntervalTree(self.store, EX3_FIELDS)
        fresh.bulk_build(ents, io)
        self.itree = fresh
        self.n_rebuilds += 1
