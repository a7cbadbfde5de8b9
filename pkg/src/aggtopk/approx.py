"""Approximate top-k engines over a breakpoint set.

Two list layouts share one storage scheme (packed ``(obj u4, score f8)``
records, best first, ``L = min(k_max, m)`` per list):

* :class:`Query1Index` stores one list for every breakpoint pair ``j < j'``
  and finds it through a top-level B+-tree over ``b_j`` whose entries point at
  a lower-level B+-tree over the later breakpoints.
* :class:`Query2Index` stores one list per node of a left-complete binary tree
  over the ``r - 1`` elementary gaps. A query sums the top-k entries of the
  nodes covering the snapped interval; with a companion :class:`Exact2Index`
  the candidates are re-scored exactly (APPX2+).

Both accept appends: new segments go to a tail that queries scan linearly, and
the whole structure is rebuilt once the appended absolute mass reaches the
mass the index was built for.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, ClassVar

import numpy as np

from .breakpoints import BreakpointSet, build_breakpoints, build_for_target
from .errors import BuildError, CapacityError, FormatError, ParameterError
from .exact import Exact2Index, ObjectCatalog
from .model import (
    Dataset,
    QuerySpec,
    RankedAnswer,
    Segment,
    absolute_segment_mass,
    clipped_integrals,
    ranked,
)
from .storage.blockstore import DEFAULT_PAGE_SIZE, BlockStore, IoStats
from .storage.bptree import BPlusTree, TreeState

LIST_DTYPE = np.dtype([("obj", "<u4"), ("score", "<f8")])
TOP_FIELDS = [("j", "<i8"), ("root", "<i8")]
LOWER_FIELDS = [("offset", "<i8")]

#: method tag -> (breakpoint method, query structure)
METHODS = {
    "appx1b": ("BP1", "Q1"),
    "appx2b": ("BP1", "Q2"),
    "appx1": ("BP2", "Q1"),
    "appx2": ("BP2", "Q2"),
    "appx2plus": ("BP2", "Q2"),
}


# --------------------------------------------------------------------------
# list computation


def cumulative_matrix(ds: Dataset, b: np.ndarray) -> np.ndarray:
    """``C[i, j] = sigma_i(0, b_j)`` for every object and breakpoint."""
    b = np.asarray(b, dtype=float)
    C = np.zeros((ds.m, len(b)))
    if ds.m == 0:
        return C
    _, tl, tr, vl, vr = ds.segment_arrays
    full = 0.5 * (tr - tl) * (vl + vr)
    seg_off = ds.offsets - np.arange(ds.m + 1)
    for i in range(ds.m):
        a, c = seg_off[i], seg_off[i + 1]
        ptr = tr[a:c]
        before = np.concatenate(([0.0], np.cumsum(full[a:c])))
        pos = np.searchsorted(ptr, b, "left")
        inside = pos < c - a
        row = np.full(len(b), before[-1])
        s = pos[inside]
        bi = b[inside]
        row[inside] = before[s] + clipped_integrals(tl[a:c][s], ptr[s], vl[a:c][s], vr[a:c][s], tl[a:c][s], bi)
        C[i] = row
    return C


def topk_columns(D: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Per column of ``D`` (objects x intervals), the top ``k`` rows by
    descending score then ascending id. Returns ``(ids, scores)`` shaped
    ``(columns, k)`` with 1-based ids."""
    m, c = D.shape
    k = min(k, m)
    if c == 0 or k == 0:
        return np.zeros((c, k), np.int64), np.zeros((c, k))
    if k < m:
        kth = -np.partition(-D, k - 1, axis=0)[k - 1]
        gt = D > kth
        eq = D == kth
        need = k - gt.sum(axis=0)
        sel = gt | (eq & (np.cumsum(eq, axis=0) <= need))
        cols, rows = np.nonzero(sel.T)
        rows = rows.reshape(c, k)
    else:
        rows = np.broadcast_to(np.arange(m), (c, m))
    scores = np.take_along_axis(D.T, rows, axis=1)
    order = np.lexsort((rows, -scores), axis=1)
    rows = np.take_along_axis(rows, order, axis=1)
    scores = np.take_along_axis(scores, order, axis=1)
    return rows.astype(np.int64) + 1, scores


def _pack(ids: np.ndarray, scores: np.ndarray) -> np.ndarray:
    out = np.zeros(ids.shape, LIST_DTYPE)
    out["obj"] = ids
    out["score"] = scores
    return out


def _degenerate(m: int, k: int) -> RankedAnswer:
    n = min(k, m)
    return RankedAnswer.from_arrays(np.arange(1, n + 1), np.zeros(n))


# --------------------------------------------------------------------------
# dyadic tree


@dataclass(frozen=True)
class DyadicNode:
    node: int
    lo: int
    hi: int


class DyadicTree:
    """Left-complete binary tree over ``G`` gaps; node spans are breakpoint
    index ranges ``[lo, hi]``. A node over ``n > 1`` gaps gives its left child
    ``2^(ceil(log2 n) - 1)`` of them. Nodes are numbered in preorder, so the
    shape (and hence every node id) is a function of ``G`` alone."""

    def __init__(self, G: int) -> None:
        if G < 1:
            raise ParameterError(f"a dyadic tree needs at least one gap, got {G}")
        self.G = G
        lo, hi, left, right = [], [], [], []
        stack = [(0, G, -1, 0)]
        while stack:
            a, c, parent, side = stack.pop()
            nid = len(lo)
            lo.append(a)
            hi.append(c)
            left.append(-1)
            right.append(-1)
            if parent >= 0:
                (left if side == 0 else right)[parent] = nid
            n = c - a
            if n > 1:
                split = a + (1 << (math.ceil(math.log2(n)) - 1))
                stack.append((split, c, nid, 1))
                stack.append((a, split, nid, 0))
        self.lo = np.asarray(lo, np.int64)
        self.hi = np.asarray(hi, np.int64)
        self.left = np.asarray(left, np.int64)
        self.right = np.asarray(right, np.int64)

    def __len__(self) -> int:
        return len(self.lo)

    @property
    def height(self) -> int:
        return math.ceil(math.log2(self.G)) if self.G > 1 else 0

    def decompose(self, lo: int, hi: int) -> list[DyadicNode]:
        """Maximal nodes covering breakpoint range ``[lo, hi]``, left to right."""
        if not 0 <= lo <= hi <= self.G:
            raise ParameterError(f"bad breakpoint range [{lo}, {hi}] for {self.G} gaps")
        out: list[DyadicNode] = []
        if lo == hi:
            return out
        stack = [0]
        while stack:
            n = stack.pop()
            a, c = int(self.lo[n]), int(self.hi[n])
            if c <= lo or a >= hi:
                continue
            if lo <= a and c <= hi:
                out.append(DyadicNode(n, a, c))
                continue
            stack.append(int(self.right[n]))
            stack.append(int(self.left[n]))
        return out


def decompose_dyadic(idx: Query2Index | DyadicTree | int, lo_idx: int, hi_idx: int) -> list[DyadicNode]:
    if isinstance(idx, int):
        idx = DyadicTree(idx)
    tree = idx.tree if isinstance(idx, Query2Index) else idx
    return tree.decompose(lo_idx, hi_idx)


def dyadic_bound(gaps: int) -> int:
    """Largest cover a range over ``gaps`` gaps may need."""
    return max(1, 2 * math.ceil(math.log2(gaps))) if gaps > 1 else 1


def query2_alpha(r: int) -> int:
    """Relative factor of the QUERY2 guarantee for ``r`` breakpoints."""
    return max(1, 2 * math.ceil(math.log2(max(r, 1))))


@dataclass
class CandidateSet:
    """Objects seen in the retrieved node lists with their summed scores."""

    scores: dict[int, float] = field(default_factory=dict)

    def add(self, ids: np.ndarray, scores: np.ndarray) -> None:
        acc = self.scores
        for i, s in zip(ids.tolist(), scores.tolist()):
            acc[i] = acc.get(i, 0.0) + s

    def __len__(self) -> int:
        return len(self.scores)

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        ids = np.fromiter(self.scores.keys(), np.int64, len(self.scores))
        vals = np.fromiter(self.scores.values(), float, len(self.scores))
        order = np.argsort(ids, kind="stable")
        return ids[order], vals[order]


# --------------------------------------------------------------------------
# shared plumbing


class ApproxIndex:
    KIND: ClassVar[str] = ""

    def __init__(self, store: BlockStore, bps: BreakpointSet, k_max: int, catalog: ObjectCatalog, n_segments: int):
        self.store = store
        self.bps = bps
        self.k_max = int(k_max)
        self.catalog = catalog
        self.n_segments = int(n_segments)
        self.L = min(self.k_max, catalog.m)
        self.build_io = IoStats()
        self.variant = bps.variant or "efficient"
        self.method = ""
        self.dataset: Dataset | None = None
        self.dataset_path: str | None = None
        self.tail: list[Segment] = []
        self.appended_mass = 0.0
        self.M_build = float(bps.mass)
        self.n_rebuilds = 0
        self.enforce_capacity = True

    # shape --------------------------------------------------------------------

    @property
    def m(self) -> int:
        return self.catalog.m

    @property
    def T(self) -> float:
        return self.catalog.T

    @property
    def r(self) -> int:
        return self.bps.r

    @property
    def epsilon(self) -> float:
        return self.bps.epsilon

    @property
    def tau(self) -> float:
        return self.bps.tau

    @property
    def n_pages(self) -> int:
        return self.store.n_pages

    @property
    def n_lists(self) -> int:
        raise NotImplementedError

    # persistence --------------------------------------------------------------

    def _base_meta(self) -> dict[str, Any]:
        tail = np.zeros(len(self.tail), [("obj", "<i8"), ("tl", "<f8"), ("tr", "<f8"), ("vl", "<f8"), ("vr", "<f8")])
        for n, s in enumerate(self.tail):
            tail[n] = (s.object_id, s.t_l, s.t_r, s.v_l, s.v_r)
        return {
            "bps": self.bps.to_meta(),
            "k_max": self.k_max,
            "L": self.L,
            "n_segments": self.n_segments,
            "catalog": self.catalog.to_meta(self.store),
            "tail": self.store.put_array(tail, IoStats()),
            "appended_mass": self.appended_mass,
            "M_build": self.M_build,
            "n_rebuilds": self.n_rebuilds,
            "method": self.method,
            "variant": self.variant,
            "dataset_path": self.dataset_path,
            "enforce_capacity": self.enforce_capacity,
        }

    def _load_base(self, meta: dict[str, Any]) -> None:
        tail = self.store.get_array(meta["tail"], IoStats())
        self.tail = [Segment(float(t["tl"]), float(t["tr"]), float(t["vl"]), float(t["vr"]), int(t["obj"])) for t in tail]
        self.appended_mass = meta["appended_mass"]
        self.M_build = meta["M_build"]
        self.n_rebuilds = meta["n_rebuilds"]
        self.method = meta.get("method", "")
        self.variant = meta.get("variant", "efficient")
        self.dataset_path = meta.get("dataset_path")
        self.enforce_capacity = meta.get("enforce_capacity", True)

    def _meta(self) -> dict[str, Any]:
        raise NotImplementedError

    def flush(self) -> None:
        self.store.seal(self.KIND, LIST_DTYPE.itemsize, 0, self.n_lists, {**self._base_meta(), **self._meta()})

    def save(self, path: str | os.PathLike) -> None:
        self.flush()
        self.store.save_as(path)

    @classmethod
    def open(cls, path: str | os.PathLike, cache_pages: int = 0) -> ApproxIndex:
        store, header, meta = BlockStore.open(path, cache_pages)
        if header.kind != cls.KIND:
            store.close()
            raise FormatError(f"{path}: holds a {header.kind} index, not {cls.KIND}")
        idx = cls(
            store,
            BreakpointSet.from_meta(meta["bps"]),
            meta["k_max"],
            ObjectCatalog.from_meta(store, meta["catalog"]),
            meta["n_segments"],
        )
        idx._load_base(meta)
        idx._load(meta, Path(path))
        store.stats.reset()
        return idx

    def _load(self, meta: dict[str, Any], path: Path) -> None:
        raise NotImplementedError

    def close(self) -> None:
        self.store.close()

    # queries ------------------------------------------------------------------

    def _check(self, q: QuerySpec) -> None:
        if q.k > self.k_max:
            raise ParameterError(f"k={q.k} exceeds k_max={self.k_max}")
        self.catalog.check_interval(q.t1, q.t2)

    def snapped(self, t1: float, t2: float) -> tuple[int, int]:
        """Breakpoint indices of ``B(t1)`` and ``B(t2)``, clamped to the indexed extent."""
        Tb = self.bps.T
        return self.bps.snap_index(min(t1, Tb)), self.bps.snap_index(min(t2, Tb))

    def effective_interval(self, t1: float, t2: float) -> tuple[float, float]:
        """The interval an answer is ranked over: snapped inside the indexed
        extent, raw beyond it (only appended data lives there)."""
        Tb = self.bps.T
        b = self.bps.breakpoints
        s1 = float(b[self.bps.snap_index(t1)]) if t1 <= Tb else t1
        s2 = float(b[self.bps.snap_index(t2)]) if t2 <= Tb else t2
        return s1, s2

    def query(self, q: QuerySpec, io: IoStats | None = None) -> RankedAnswer:
        self._check(q)
        io = io if io is not None else self.store.stats
        if self.m == 0:
            return RankedAnswer()
        s1, s2 = self.effective_interval(q.t1, q.t2)
        touches_tail = self._tail_overlaps(s1, s2)
        depth = self.L if touches_tail else q.k
        ids, scores = self._index_scores(q, depth, io)
        if touches_tail:
            ids, scores = self._merge_tail(ids, scores, s1, s2)
        elif ids is None:
            return _degenerate(self.m, q.k)
        return ranked(scores, q.k, q, ids)

    def _index_scores(self, q: QuerySpec, depth: int, io: IoStats) -> tuple[np.ndarray | None, np.ndarray | None]:
        """Candidate ids and approximate scores from the stored lists, or
        ``(None, None)`` when the snapped interval is degenerate."""
        raise NotImplementedError

    # appends ------------------------------------------------------------------

    def _tail_overlaps(self, s1: float, s2: float) -> bool:
        if not self.tail or s1 >= s2:
            return False
        lo = min(s.t_l for s in self.tail)
        hi = max(s.t_r for s in self.tail)
        return s1 < hi and s2 > lo

    def _tail_scores(self, s1: float, s2: float) -> tuple[np.ndarray, np.ndarray]:
        obj = np.array([s.object_id for s in self.tail], np.int64)
        tl = np.array([s.t_l for s in self.tail])
        tr = np.array([s.t_r for s in self.tail])
        vl = np.array([s.v_l for s in self.tail])
        vr = np.array([s.v_r for s in self.tail])
        contrib = clipped_integrals(tl, tr, vl, vr, s1, s2)
        ids, inv = np.unique(obj, return_inverse=True)
        return ids, np.bincount(inv, weights=contrib, minlength=len(ids))

    def _merge_tail(
        self, ids: np.ndarray | None, scores: np.ndarray | None, s1: float, s2: float
    ) -> tuple[np.ndarray, np.ndarray]:
        t_ids, t_scores = self._tail_scores(s1, s2)
        if ids is None:
            ids, scores = np.zeros(0, np.int64), np.zeros(0)
        all_ids = np.concatenate((ids, t_ids))
        all_scores = np.concatenate((scores, t_scores))
        uniq, inv = np.unique(all_ids, return_inverse=True)
        summed = np.bincount(inv, weights=all_scores, minlength=len(uniq))
        # objects absent from both sources contribute 0 and rank by id
        if len(uniq) < self.m:
            rest = np.setdiff1d(np.arange(1, self.m + 1), uniq)[: self.k_max]
            uniq = np.concatenate((uniq, rest))
            summed = np.concatenate((summed, np.zeros(len(rest))))
        return uniq, summed

    def append(self, seg: Segment, io: IoStats | None = None) -> bool:
        """Buffer ``seg``; returns True when the append triggered a rebuild."""
        self.catalog.check_append(seg)
        self.catalog.record_append(seg)
        self.tail.append(seg)
        self.appended_mass += float(
            absolute_segment_mass(np.array([seg.v_l]), np.array([seg.v_r]), np.array([seg.t_r - seg.t_l]))[0]
        )
        self._append_companion(seg, io)
        if self.appended_mass >= self.M_build:
            self.rebuild()
            return True
        return False

    def _append_companion(self, seg: Segment, io: IoStats | None) -> None:
        pass

    def current_dataset(self) -> Dataset:
        base = self.dataset
        if base is None:
            if self.dataset_path is None:
                raise BuildError("rebuilding needs the source dataset; none is attached to this index")
            from .datafile import load_dataset

            base = load_dataset(self.dataset_path)
        return base.with_appended(self.tail) if self.tail else base

    def rebuild(self) -> None:
        """Rebuild over base + tail with the same epsilon; ``tau' = epsilon * M_new``."""
        ds = self.current_dataset()
        bps = build_breakpoints(ds, self.bps.epsilon, self.bps.method, self.variant)
        fresh = type(self)._build_from(ds, bps, self.k_max, None, self.store.page_size, self.enforce_capacity)
        rebuilds = self.n_rebuilds + 1
        companion = getattr(self, "companion", None)
        self.__dict__.update(
            {k: v for k, v in fresh.__dict__.items() if k not in ("companion", "companion_path", "method", "dataset_path")}
        )
        if companion is not None:
            self.companion = companion
        self.dataset = ds
        self.n_rebuilds = rebuilds

    @classmethod
    def _build_from(cls, ds, bps, k_max, path, page_size, enforce_capacity) -> ApproxIndex:
        raise NotImplementedError

    def info(self) -> dict[str, Any]:
        return {
            "kind": self.KIND,
            "method": self.method,
            "m": self.m,
            "N": self.n_segments,
            "T": self.T,
            "r": self.r,
            "epsilon": self.epsilon,
            "tau": self.tau,
            "k_max": self.k_max,
            "lists": self.n_lists,
            "pages": self.n_pages,
            "tail": len(self.tail),
            "rebuilds": self.n_rebuilds,
        }


def _check_build(ds: Dataset, bps: BreakpointSet, k_max: int) -> None:
    if int(k_max) != k_max or k_max < 1:
        raise ParameterError(f"k_max must be a positive integer, got {k_max}")
    if bps.r < 2:
        raise BuildError("a breakpoint set needs at least two breakpoints")
    if not math.isclose(bps.T, ds.T, rel_tol=1e-12, abs_tol=1e-12):
        raise BuildError(f"breakpoints end at {bps.T} but the dataset domain ends at {ds.T}")


# --------------------------------------------------------------------------
# QUERY1


class Query1Index(ApproxIndex):
    KIND = "Q1"

    def __init__(self, store, bps, k_max, catalog, n_segments):
        super().__init__(store, bps, k_max, catalog, n_segments)
        self.top = BPlusTree(store, TOP_FIELDS)

    @property
    def n_lists(self) -> int:
        r = self.bps.r
        return r * (r - 1) // 2

    @classmethod
    def build(
        cls,
        ds: Dataset,
        bps: BreakpointSet,
        k_max: int,
        path: str | os.PathLike | None = None,
        page_size: int = DEFAULT_PAGE_SIZE,
        enforce_capacity: bool = True,
    ) -> Query1Index:
        _check_build(ds, bps, k_max)
        r, N = bps.r, ds.N
        if enforce_capacity and (r * r >= N or r * k_max >= N):
            raise CapacityError(f"QUERY1 needs r^2 < N and r*k_max < N; got r={r}, k_max={k_max}, N={N}")
        store = BlockStore(path, page_size)
        idx = cls(store, bps, k_max, ObjectCatalog.from_dataset(ds), ds.N)
        idx.enforce_capacity = enforce_capacity
        idx.dataset = ds
        io = IoStats()
        b = bps.breakpoints
        C = cumulative_matrix(ds, b)
        L = idx.L
        width = L * LIST_DTYPE.itemsize
        tops = np.zeros(r - 1, idx.top.dtype)
        for j in range(r - 1):
            D = C[:, j + 1 :] - C[:, j : j + 1]
            ids, scores = topk_columns(D, L)
            first, _ = store.put_blob(_pack(ids, scores).tobytes(), io)
            lower = BPlusTree(store, LOWER_FIELDS)
            ents = np.zeros(r - 1 - j, lower.dtype)
            ents["key"] = b[j + 1 :]
            ents["offset"] = first * page_size + np.arange(r - 1 - j) * width
            lower.bulk_load(ents, io)
            tops[j] = (b[j], j, lower.state.root)
        idx.top.bulk_load(tops, io)
        idx.build_io = io
        idx.flush()
        store.stats.reset()
        return idx

    @classmethod
    def _build_from(cls, ds, bps, k_max, path, page_size, enforce_capacity):
        return cls.build(ds, bps, k_max, path, page_size, enforce_capacity)

    def _meta(self) -> dict[str, Any]:
        return {"top": self.top.state.to_json()}

    def _load(self, meta: dict[str, Any], path: Path) -> None:
        self.top = BPlusTree(self.store, TOP_FIELDS, TreeState(**meta["top"]))

    def _lower(self, rec: np.void) -> BPlusTree:
        j = int(rec["j"])
        st = TreeState(root=int(rec["root"]), count=self.bps.r - 1 - j, max_key=self.bps.T)
        return BPlusTree(self.store, LOWER_FIELDS, st)

    def lookup(self, t1: float, t2: float, depth: int, io: IoStats | None = None) -> np.ndarray | None:
        """The first ``depth`` entries of the list for ``[B(t1), B(t2)]``,
        found through the two tree levels; ``None`` when degenerate."""
        Tb = self.bps.T
        if t1 > Tb:
            return None
        rec = self.top.search_first_geq(t1, io)
        if rec is None or min(t2, Tb) <= rec["key"]:
            return None
        hit = self._lower(rec).search_first_geq(min(t2, Tb), io)
        if hit is None:
            raise FormatError("lower-level tree has no entry for a breakpoint inside the domain")
        n = min(depth, self.L)
        raw = self.store.read_span(int(hit["offset"]), n * LIST_DTYPE.itemsize, io)
        return np.frombuffer(raw, LIST_DTYPE)

    def list_for(self, j: int, jp: int, io: IoStats | None = None) -> np.ndarray:
        """The full stored list for breakpoint pair ``(j, j')``."""
        if not 0 <= j < jp < self.bps.r:
            raise ParameterError(f"bad breakpoint pair ({j}, {jp})")
        b = self.bps.breakpoints
        out = self.lookup(float(b[j]), float(b[jp]), self.L, io)
        return out if out is not None else np.zeros(0, LIST_DTYPE)

    def _index_scores(self, q, depth, io):
        ents = self.lookup(q.t1, q.t2, depth, io)
        if ents is None:
            return None, None
        return ents["obj"].astype(np.int64), ents["score"].astype(float)


def build_query1(
    ds: Dataset, bps: BreakpointSet, k_max: int, path: str | os.PathLike | None = None, **kw: Any
) -> Query1Index:
    return Query1Index.build(ds, bps, k_max, path, **kw)


def query1_topk(idx: Query1Index, q: QuerySpec, io: IoStats | None = None) -> RankedAnswer:
    return idx.query(q, io)


# --------------------------------------------------------------------------
# QUERY2


class Query2Index(ApproxIndex):
    KIND = "Q2"

    def __init__(self, store, bps, k_max, catalog, n_segments):
        super().__init__(store, bps, k_max, catalog, n_segments)
        self.tree = DyadicTree(max(1, bps.n_gaps))
        self.lists_base = -1
        self.companion: Exact2Index | None = None
        self.companion_path: str | None = None

    @property
    def n_lists(self) -> int:
        return len(self.tree)

    # layout: a list never straddles a page boundary when it fits in one
    @property
    def _slot(self) -> int:
        return self.L * LIST_DTYPE.itemsize

    @property
    def _per_page(self) -> int:
        return max(1, self.store.page_size // self._slot) if self._slot else 1

    @property
    def _pages_per(self) -> int:
        return max(1, math.ceil(self._slot / self.store.page_size))

    def _offset(self, node: int) -> int:
        ps = self.store.page_size
        if self._slot <= ps:
            page = self.lists_base + node // self._per_page
            return page * ps + (node % self._per_page) * self._slot
        return (self.lists_base + node * self._pages_per) * ps

    @classmethod
    def build(
        cls,
        ds: Dataset,
        bps: BreakpointSet,
        k_max: int,
        path: str | os.PathLike | None = None,
        page_size: int = DEFAULT_PAGE_SIZE,
        enforce_capacity: bool = True,
        companion: Exact2Index | None = None,
        companion_path: str | os.PathLike | None = None,
    ) -> Query2Index:
        _check_build(ds, bps, k_max)
        store = BlockStore(path, page_size)
        idx = cls(store, bps, k_max, ObjectCatalog.from_dataset(ds), ds.N)
        idx.enforce_capacity = enforce_capacity
        idx.dataset = ds
        io = IoStats()
        C = cumulative_matrix(ds, bps.breakpoints)
        tree = idx.tree
        n_nodes = len(tree)
        ids, scores = topk_columns(C[:, tree.hi] - C[:, tree.lo], idx.L)
        lists = _pack(ids, scores)
        ps = page_size
        if idx._slot <= ps:
            per = idx._per_page
            n_pages = math.ceil(n_nodes / per)
            buf = np.zeros(n_pages * ps, np.uint8)
            for node in range(n_nodes):
                off = (node // per) * ps + (node % per) * idx._slot
                buf[off : off + idx._slot] = lists[node].view(np.uint8)
        else:
            pp = idx._pages_per
            n_pages = n_nodes * pp
            buf = np.zeros(n_pages * ps, np.uint8)
            for node in range(n_nodes):
                off = node * pp * ps
                buf[off : off + idx._slot] = lists[node].view(np.uint8)
        idx.lists_base = store.allocate(n_pages)
        store.write_pages(idx.lists_base, buf.tobytes(), io)
        idx.companion = companion
        idx.companion_path = str(companion_path) if companion_path is not None else None
        idx.build_io = io
        idx.flush()
        store.stats.reset()
        return idx

    @classmethod
    def _build_from(cls, ds, bps, k_max, path, page_size, enforce_capacity):
        return cls.build(ds, bps, k_max, path, page_size, enforce_capacity)

    def _meta(self) -> dict[str, Any]:
        return {"lists_base": self.lists_base, "gaps": self.tree.G, "companion_path": self.companion_path}

    def _load(self, meta: dict[str, Any], path: Path) -> None:
        self.lists_base = meta["lists_base"]
        self.companion_path = meta.get("companion_path")
        if self.tree.G != meta["gaps"]:
            raise FormatError("stored gap count does not match the breakpoint set")

    def attach_companion(self, ex2: Exact2Index | None = None) -> Exact2Index:
        """Attach (or open from the recorded path) the EXACT2 index used by APPX2+."""
        if ex2 is None:
            if self.companion is not None:
                return self.companion
            if not self.companion_path:
                raise FormatError("this QUERY2 index records no companion EXACT2 index")
            ex2 = Exact2Index.open(self.companion_path)
        self.companion = ex2
        return ex2

    def node_list(self, node: int, depth: int | None = None, io: IoStats | None = None) -> np.ndarray:
        n = self.L if depth is None else min(depth, self.L)
        raw = self.store.read_span(self._offset(node), n * LIST_DTYPE.itemsize, io)
        return np.frombuffer(raw, LIST_DTYPE)

    def candidates(self, lo: int, hi: int, k: int, io: IoStats | None = None) -> CandidateSet:
        cand = CandidateSet()
        for node in self.tree.decompose(lo, hi):
            ents = self.node_list(node.node, k, io)
            cand.add(ents["obj"].astype(np.int64), ents["score"].astype(float))
        return cand

    def _index_scores(self, q, depth, io):
        lo, hi = self.snapped(q.t1, q.t2)
        if q.t1 > self.bps.T or lo >= hi:
            return None, None
        return self.candidates(lo, hi, depth, io).arrays()

    def query_plus(self, q: QuerySpec, io: IoStats | None = None, ex2: Exact2Index | None = None) -> RankedAnswer:
        """APPX2+: QUERY2 candidates re-scored exactly over the snapped interval."""
        self._check(q)
        io = io if io is not None else self.store.stats
        ex2 = self.attach_companion(ex2)
        if self.m == 0:
            return RankedAnswer()
        s1, s2 = self.effective_interval(q.t1, q.t2)
        ids, _ = self._index_scores(q, q.k, io)
        if self._tail_overlaps(s1, s2):
            t_ids, _ = self._tail_scores(s1, s2)
            ids = t_ids if ids is None else np.union1d(ids, t_ids)
        if ids is None or s1 >= s2:
            return _degenerate(self.m, q.k)
        exact = ex2.score_objects(ids, s1, s2, io)
        return ranked(exact, q.k, q, ids)

    def _append_companion(self, seg: Segment, io: IoStats | None) -> None:
        if self.companion is not None:
            self.companion.append(seg, io)


def build_query2(
    ds: Dataset, bps: BreakpointSet, k_max: int, path: str | os.PathLike | None = None, **kw: Any
) -> Query2Index:
    return Query2Index.build(ds, bps, k_max, path, **kw)


def query2_topk(idx: Query2Index, q: QuerySpec, io: IoStats | None = None) -> RankedAnswer:
    return idx.query(q, io)


def query2_plus_topk(
    idx: Query2Index, ex2: Exact2Index | None, q: QuerySpec, io: IoStats | None = None
) -> RankedAnswer:
    return idx.query_plus(q, io, ex2)


# --------------------------------------------------------------------------
# method-level entry points


def breakpoints_for(
    ds: Dataset, method: str, epsilon: float | None = None, r_target: int | None = None, variant: str = "efficient"
) -> BreakpointSet:
    if method not in METHODS:
        raise ParameterError(f"unknown approximate method {method!r}")
    bp = METHODS[method][0]
    if (epsilon is None) == (r_target is None):
        raise ParameterError("give exactly one of epsilon or r_target")
    if epsilon is not None:
        return build_breakpoints(ds, epsilon, bp, variant)
    return build_for_target(ds, int(r_target), bp)


def build_approx(
    ds: Dataset,
    method: str,
    epsilon: float | None = None,
    r_target: int | None = None,
    k_max: int = 200,
    path: str | os.PathLike | None = None,
    page_size: int = DEFAULT_PAGE_SIZE,
    enforce_capacity: bool = True,
    companion: Exact2Index | None = None,
    companion_path: str | os.PathLike | None = None,
    bps: BreakpointSet | None = None,
) -> ApproxIndex:
    """Build the structure behind an approximate method tag."""
    if method not in METHODS:
        raise ParameterError(f"unknown approximate method {method!r}")
    if bps is None:
        bps = breakpoints_for(ds, method, epsilon, r_target)
    kind = METHODS[method][1]
    if kind == "Q1":
        idx: ApproxIndex = Query1Index.build(ds, bps, k_max, path, page_size, enforce_capacity)
    else:
        if method == "appx2plus" and companion is None and companion_path is None:
            companion = Exact2Index.build(ds, page_size=page_size)
        idx = Query2Index.build(ds, bps, k_max, path, page_size, enforce_capacity, companion, companion_path)
    idx.method = method
    idx.flush()
    return idx


def approx_answer(idx: ApproxIndex, q: QuerySpec, io: IoStats | None = None) -> RankedAnswer:
    """Answer ``q`` the way ``idx.method`` prescribes."""
    if idx.method == "appx2plus" and isinstance(idx, Query2Index):
        return idx.query_plus(q, io)
    return idx.query(q, io)


__all__ = [
    "LIST_DTYPE",
    "METHODS",
    "ApproxIndex",
    "CandidateSet",
    "DyadicNode",
    "DyadicTree",
    "Query1Index",
    "Query2Index",
    "approx_answer",
    "breakpoints_for",
    "build_approx",
    "build_query1",
    "build_query2",
    "cumulative_matrix",
    "decompose_dyadic",
    "dyadic_bound",
    "query1_topk",
    "query2_alpha",
    "query2_plus_topk",
    "query2_topk",
    "topk_columns",
]
