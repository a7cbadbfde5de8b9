"""Paged B+-tree over float keys with fixed-width values.

Leaves hold packed ``(key, value...)`` records and are doubly linked. Internal
nodes hold ``(max_key, child)`` pairs where ``max_key`` is the largest key in
that child's subtree, so a descent picks the first child whose ``max_key``
reaches the probe. Several trees may share one :class:`BlockStore`; a tree is
fully described by its small :class:`TreeState` record.
"""

from __future__ import annotations

import math
from collections.abc import Iterator, Sequence
from dataclasses import asdict, dataclass

import numpy as np

from ..errors import BuildError, OutOfOrderError
from .blockstore import BlockStore, IoStats

LEAF = 1
INTERNAL = 2
NODE_HEADER = 24
_HEAD_DTYPE = np.dtype([("kind", "u1"), ("pad", "V3"), ("count", "<u4"), ("prev", "<i8"), ("next", "<i8")])
_CHILD_DTYPE = np.dtype([("key", "<f8"), ("child", "<i8")])


@dataclass
class TreeState:
    root: int = -1
    height: int = 0
    count: int = 0
    first_leaf: int = -1
    last_leaf: int = -1
    min_key: float = math.inf
    max_key: float = -math.inf
    n_leaves: int = 0
    n_internal: int = 0

    def to_json(self) -> dict:
        return asdict(self)


TREE_STATE_DTYPE = np.dtype(
    [
        ("root", "<i8"),
        ("height", "<i8"),
        ("count", "<i8"),
        ("first_leaf", "<i8"),
        ("last_leaf", "<i8"),
        ("min_key", "<f8"),
        ("max_key", "<f8"),
        ("n_leaves", "<i8"),
        ("n_internal", "<i8"),
    ]
)


def states_to_array(states: Sequence[TreeState]) -> np.ndarray:
    out = np.zeros(len(states), dtype=TREE_STATE_DTYPE)
    for name in TREE_STATE_DTYPE.names:
        out[name] = [getattr(s, name) for s in states]
    return out


def state_from_record(rec: np.void) -> TreeState:
    return TreeState(**{name: rec[name].item() for name in TREE_STATE_DTYPE.names})


@dataclass
class Cursor:
    """Position ``pos`` inside leaf ``leaf`` whose records are ``entries``."""

    leaf: int
    pos: int
    entries: np.ndarray
    prev: int = -1
    next: int = -1


def entry_dtype(value_fields: Sequence[tuple[str, str]]) -> np.dtype:
    return np.dtype([("key", "<f8"), *value_fields])


class BPlusTree:
    def __init__(
        self,
        store: BlockStore,
        value_fields: Sequence[tuple[str, str]],
        state: TreeState | None = None,
    ) -> None:
        self.store = store
        self.dtype = entry_dtype(value_fields)
        self.value_fields = list(value_fields)
        self.state = state if state is not None else TreeState()
        self.leaf_capacity = (store.page_size - NODE_HEADER) // self.dtype.itemsize
        self.fanout = (store.page_size - NODE_HEADER) // _CHILD_DTYPE.itemsize
        if self.leaf_capacity < 2:
            raise BuildError(f"entry width {self.dtype.itemsize} too large for page size {store.page_size}")

    # properties -------------------------------------------------------------

    @property
    def entry_width(self) -> int:
        return self.dtype.itemsize

    def __len__(self) -> int:
        return self.state.count

    @property
    def height(self) -> int:
        """Number of levels including the leaf level (0 when empty)."""
        return self.state.height

    @property
    def n_pages(self) -> int:
        return self.state.n_leaves + self.state.n_internal

    # node codec ---------------------------------------------------------------

    def _read(self, pid: int, io: IoStats | None) -> tuple[np.void, np.ndarray]:
        raw = self.store.read_page(pid, io)
        head = np.frombuffer(raw, _HEAD_DTYPE, 1)[0]
        dt = self.dtype if head["kind"] == LEAF else _CHILD_DTYPE
        body = np.frombuffer(raw, dt, int(head["count"]), NODE_HEADER)
        return head, body

    def _encode(self, kind: int, body: np.ndarray, prev: int = -1, nxt: int = -1) -> bytes:
        head = np.zeros(1, _HEAD_DTYPE)
        head["kind"] = kind
        head["count"] = len(body)
        head["prev"] = prev
        head["next"] = nxt
        return head.tobytes() + body.tobytes()

    def _write(self, pid: int, kind: int, body: np.ndarray, io: IoStats | None, prev: int = -1, nxt: int = -1) -> None:
        self.store.write_page(pid, self._encode(kind, body, prev, nxt), io)

    # bulk load ------------------------------------------------------------------

    def bulk_load(self, entries: np.ndarray, io: IoStats | None = None) -> None:
        """Build from ``entries`` (structured array of :attr:`dtype`), keys non-decreasing."""
        if self.state.root != -1:
            raise BuildError("bulk_load on a non-empty tree")
        entries = np.asarray(entries)
        if entries.dtype != self.dtype:
            entries = entries.astype(self.dtype)
        n = len(entries)
        if n == 0:
            return
        keys = entries["key"]
        if not np.all(np.isfinite(keys)):
            raise BuildError("keys must be finite")
        if np.any(keys[1:] < keys[:-1]):
            raise BuildError("bulk_load requires keys in non-decreasing order")
        cap = self.leaf_capacity
        n_leaves = math.ceil(n / cap)
        first = self.store.allocate(n_leaves)
        page_dt = self._page_dtype(self.dtype, cap)
        pages = np.zeros(n_leaves, page_dt)
        pages["kind"] = LEAF
        counts = np.full(n_leaves, cap, dtype=np.int64)
        counts[-1] = n - cap * (n_leaves - 1)
        pages["count"] = counts
        ids = first + np.arange(n_leaves, dtype=np.int64)
        pages["prev"] = np.where(ids > first, ids - 1, -1)
        pages["next"] = np.where(ids < first + n_leaves - 1, ids + 1, -1)
        flat = pages["ents"].reshape(-1)
        flat[:n] = entries
        pages["ents"] = flat.reshape(n_leaves, cap)
        self.store.write_pages(first, pages.tobytes(), io)

        level_keys = keys[np.minimum((np.arange(n_leaves) + 1) * cap, n) - 1]
        level_ids = ids
        height = 1
        n_internal = 0
        while len(level_ids) > 1:
            f = self.fanout
            n_nodes = math.ceil(len(level_ids) / f)
            nfirst = self.store.allocate(n_nodes)
            pdt = self._page_dtype(_CHILD_DTYPE, f)
            nodes = np.zeros(n_nodes, pdt)
            nodes["kind"] = INTERNAL
            nodes["prev"] = -1
            nodes["next"] = -1
            ncounts = np.full(n_nodes, f, dtype=np.int64)
            ncounts[-1] = len(level_ids) - f * (n_nodes - 1)
            nodes["count"] = ncounts
            children = np.zeros(n_nodes * f, _CHILD_DTYPE)
            children["key"][: len(level_ids)] = level_keys
            children["child"][: len(level_ids)] = level_ids
            nodes["ents"] = children.reshape(n_nodes, f)
            self.store.write_pages(nfirst, nodes.tobytes(), io)
            level_keys = level_keys[np.minimum((np.arange(n_nodes) + 1) * f, len(level_keys)) - 1]
            level_ids = nfirst + np.arange(n_nodes, dtype=np.int64)
            height += 1
            n_internal += n_nodes
        self.state = TreeState(
            root=int(level_ids[0]),
            height=height,
            count=n,
            first_leaf=int(first),
            last_leaf=int(first + n_leaves - 1),
            min_key=float(keys[0]),
            max_key=float(keys[-1]),
            n_leaves=n_leaves,
            n_internal=n_internal,
        )

    def _page_dtype(self, ent: np.dtype, cap: int) -> np.dtype:
        fields = [("kind", "u1"), ("pad", "V3"), ("count", "<u4"), ("prev", "<i8"), ("next", "<i8"), ("ents", ent, (cap,))]
        used = NODE_HEADER + ent.itemsize * cap
        if used < self.store.page_size:
            fields.append(("tail", f"V{self.store.page_size - used}"))
        return np.dtype(fields)

    # search -------------------------------------------------------------------

    def _descend(self, key: float, side: str, io: IoStats | None) -> tuple[int, np.void, np.ndarray] | None:
        """Leaf holding the first record with key ``>= key`` (``side='left'``)
        or ``> key`` (``side='right'``); ``None`` when no such record exists."""
        st = self.state
        if st.root == -1:
            return None
        if key > st.max_key or (side == "right" and key >= st.max_key):
            return None
        pid = st.root
        while True:
            head, body = self._read(pid, io)
            if head["kind"] == LEAF:
                return pid, head, body
            idx = int(np.searchsorted(body["key"], key, side))
            pid = int(body["child"][min(idx, len(body) - 1)])

    def locate(self, key: float, side: str = "left", io: IoStats | None = None) -> Cursor | None:
        """Cursor at the first record with key ``>= key`` (or ``> key``)."""
        hit = self._descend(key, side, io)
        if hit is None:
            return None
        pid, head, body = hit
        return Cursor(pid, int(np.searchsorted(body["key"], key, side)), body, int(head["prev"]), int(head["next"]))

    def leaf_cursor(self, pid: int, at_end: bool = False, io: IoStats | None = None) -> Cursor:
        head, body = self._read(pid, io)
        return Cursor(pid, len(body) if at_end else 0, body, int(head["prev"]), int(head["next"]))

    def end_cursor(self, io: IoStats | None = None) -> Cursor | None:
        """Cursor one past the last record (reads the last leaf)."""
        if self.state.root == -1:
            return None
        return self.leaf_cursor(self.state.last_leaf, True, io)

    def search_first_geq(self, key: float, io: IoStats | None = None) -> np.void | None:
        cur = self.locate(key, "left", io)
        return None if cur is None else cur.entries[cur.pos]

    def search_first_gt(self, key: float, io: IoStats | None = None) -> np.void | None:
        cur = self.locate(key, "right", io)
        return None if cur is None else cur.entries[cur.pos]

    # scans --------------------------------------------------------------------

    def scan_forward(self, cur: Cursor | None, io: IoStats | None = None) -> Iterator[np.ndarray]:
        """Record chunks from ``cur`` to the end, one leaf at a time."""
        if cur is None:
            return
        body, nxt = cur.entries[cur.pos :], cur.next
        while True:
            if len(body):
                yield body
            if nxt == -1:
                return
            head, body = self._read(nxt, io)
            nxt = int(head["next"])

    def scan_backward(self, cur: Cursor | None, io: IoStats | None = None) -> Iterator[np.ndarray]:
        """Record chunks strictly before ``cur``, walking leaves right to left.

        Each chunk is in ascending key order; chunks arrive in descending order.
        """
        if cur is None:
            return
        body, prev = cur.entries[: cur.pos], cur.prev
        while True:
            if len(body):
                yield body
            if prev == -1:
                return
            head, body = self._read(prev, io)
            prev = int(head["prev"])

    def range_scan(self, lo: float, hi: float, io: IoStats | None = None) -> Iterator[np.ndarray]:
        """All records with ``lo <= key <= hi``, in key order, as leaf chunks."""
        if lo > hi:
            return
        for chunk in self.scan_forward(self.locate(lo, "left", io), io):
            if chunk["key"][-1] <= hi:
                yield chunk
            else:
                cut = int(np.searchsorted(chunk["key"], hi, "right"))
                if cut:
                    yield chunk[:cut]
                return

    def items(self, io: IoStats | None = None) -> np.ndarray:
        if self.state.root == -1:
            return np.zeros(0, self.dtype)
        chunks = list(self.scan_forward(self.leaf_cursor(self.state.first_leaf, False, io), io))
        return np.concatenate(chunks) if chunks else np.zeros(0, self.dtype)

    # updates ----------------------------------------------------------------------

    def append(self, record: np.void | tuple, io: IoStats | None = None) -> None:
        """Insert a record whose key is at least the current maximum key."""
        rec = self._as_record(record)
        if self.state.count and rec["key"] < self.state.max_key:
            raise OutOfOrderError(f"append key {rec['key']} below current maximum {self.state.max_key}")
        self.insert(rec, io)

    def insert(self, record: np.void | tuple, io: IoStats | None = None) -> None:
        """Insert one record after any existing records with the same key."""
        rec = self._as_record(record)
        key = float(rec["key"])
        if not math.isfinite(key):
            raise BuildError("keys must be finite")
        st = self.state
        if st.root == -1:
            pid = self.store.allocate(1)
            self._write(pid, LEAF, rec.reshape(1), io)
            self.state = TreeState(pid, 1, 1, pid, pid, key, key, 1, 0)
            return
        path: list[tuple[int, np.ndarray, int]] = []
        pid = st.root
        while True:
            head, body = self._read(pid, io)
            if head["kind"] == LEAF:
                break
            idx = min(int(np.searchsorted(body["key"], key, "right")), len(body) - 1)
            path.append((pid, body, idx))
            pid = int(body["child"][idx])
        pos = int(np.searchsorted(body["key"], key, "right"))
        leaf = np.concatenate([body[:pos], rec.reshape(1), body[pos:]])
        prev, nxt = int(head["prev"]), int(head["next"])
        split: tuple[float, int] | None = None
        if len(leaf) <= self.leaf_capacity:
            self._write(pid, LEAF, leaf, io, prev, nxt)
            new_max = float(leaf["key"][-1])
        else:
            cut = len(leaf) - 1 if (pos == len(body) and nxt == -1) else len(leaf) // 2
            right = self.store.allocate(1)
            self._write(pid, LEAF, leaf[:cut], io, prev, right)
            self._write(right, LEAF, leaf[cut:], io, pid, nxt)
            if nxt != -1:
                nh, nb = self._read(nxt, io)
                self._write(nxt, LEAF, nb, io, right, int(nh["next"]))
            else:
                st.last_leaf = right
            st.n_leaves += 1
            new_max = float(leaf["key"][cut - 1])
            split = (float(leaf["key"][-1]), right)
        for node_pid, nbody, idx in reversed(path):
            nbody = nbody.copy()
            changed = False
            if nbody["key"][idx] != new_max and (split is not None or new_max > nbody["key"][idx]):
                nbody["key"][idx] = new_max
                changed = True
            if split is not None:
                ins = np.zeros(1, _CHILD_DTYPE)
                ins["key"], ins["child"] = split
                nbody = np.concatenate([nbody[: idx + 1], ins, nbody[idx + 1 :]])
                changed = True
                split = None
                if len(nbody) > self.fanout:
                    cut = len(nbody) - 1 if idx + 1 == len(nbody) - 1 else len(nbody) // 2
                    right = self.store.allocate(1)
                    self._write(node_pid, INTERNAL, nbody[:cut], io)
                    self._write(right, INTERNAL, nbody[cut:], io)
                    st.n_internal += 1
                    split = (float(nbody["key"][-1]), right)
                    new_max = float(nbody["key"][cut - 1])
                    continue
            if changed:
                self._write(node_pid, INTERNAL, nbody, io)
            new_max = float(nbody["key"][-1])
        if split is not None:
            root = self.store.allocate(1)
            body = np.zeros(2, _CHILD_DTYPE)
            body["key"] = (new_max, split[0])
            body["child"] = (st.root, split[1])
            self._write(root, INTERNAL, body, io)
            st.root = root
            st.height += 1
            st.n_internal += 1
        st.count += 1
        st.min_key = min(st.min_key, key)
        st.max_key = max(st.max_key, key)

    def _as_record(self, record: np.void | tuple) -> np.ndarray:
        if isinstance(record, np.ndarray) and record.dtype == self.dtype and record.shape == ():
            return record
        out = np.zeros((), self.dtype)
        if isinstance(record, (np.void, np.ndarray)):
            for name in self.dtype.names:
                out[name] = record[name]
        else:
            out[()] = tuple(record)
        return out


def locate_many(
    store: BlockStore,
    dtype: np.dtype,
    roots: np.ndarray,
    keys: np.ndarray,
    side: str = "left",
    io: IoStats | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """First record with key ``>= keys[j]`` (or ``>``) in the tree rooted at
    ``roots[j]``, for many trees at once.

    Each tree is descended exactly as :meth:`BPlusTree.locate` would, reading
    the same pages; callers must pass ``roots[j] = -1`` for trees known to hold
    no qualifying record. Returns ``(found, records)``.
    """
    roots = np.asarray(roots, dtype=np.int64)
    keys = np.asarray(keys, dtype=float)
    n = len(roots)
    out = np.zeros(n, dtype)
    found = np.zeros(n, dtype=bool)
    active = np.flatnonzero(roots >= 0)
    pids = roots[active]
    ps = store.page_size
    leaf_cap = (ps - NODE_HEADER) // dtype.itemsize
    fan = (ps - NODE_HEADER) // _CHILD_DTYPE.itemsize
    leaf_dt = _view_dtype(dtype, leaf_cap, ps)
    node_dt = _view_dtype(_CHILD_DTYPE, fan, ps)
    while len(active):
        raw = store.read_page_batch(pids, io)
        heads = raw[:, :NODE_HEADER].copy().view(_HEAD_DTYPE).reshape(-1)
        is_leaf = heads["kind"] == LEAF
        cnt = heads["count"].astype(np.int64)
        q = keys[active]
        if np.any(is_leaf):
            li = np.flatnonzero(is_leaf)
            pages = raw[li].copy().view(leaf_dt).reshape(-1)
            ek = pages["ents"]["key"]
            valid = np.arange(leaf_cap)[None, :] < cnt[li, None]
            below = (ek < q[li, None]) if side == "left" else (ek <= q[li, None])
            pos = np.sum(below & valid, axis=1)
            ok = pos < cnt[li]
            tgt = active[li[ok]]
            out[tgt] = pages["ents"][np.flatnonzero(ok), pos[ok]]
            found[tgt] = True
        ni = np.flatnonzero(~is_leaf)
        if len(ni) == 0:
            break
        pages = raw[ni].copy().view(node_dt).reshape(-1)
        ck = pages["ents"]["key"]
        valid = np.arange(fan)[None, :] < cnt[ni, None]
        below = (ck < q[ni, None]) if side == "left" else (ck <= q[ni, None])
        idx = np.minimum(np.sum(below & valid, axis=1), cnt[ni] - 1)
        pids = pages["ents"]["child"][np.arange(len(ni)), idx]
        active = active[ni]
    return found, out


def _view_dtype(ent: np.dtype, cap: int, page_size: int) -> np.dtype:
    fields = [("head", _HEAD_DTYPE), ("ents", ent, (cap,))]
    pad = page_size - NODE_HEADER - cap * ent.itemsize
    if pad:
        fields.append(("tail", f"V{pad}"))
    return np.dtype(fields)
