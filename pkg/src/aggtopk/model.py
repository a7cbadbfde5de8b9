"""Temporal data model: piecewise-linear score functions and their integrals.

Every object ``o_i`` is a polyline ``g_i`` given by vertices ``(t, v)`` with
strictly increasing timestamps. The aggregate score of an object over a query
interval is the integral of ``g_i`` over that interval; everything else in the
package is an index that reproduces (or approximates) the brute-force answer
computed here.
"""

from __future__ import annotations

import enum
import math
from collections.abc import Iterable, Iterator, Sequence
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import DomainError, ParameterError

# Relative / absolute tolerances used by every exact-engine equality check.
RTOL = 1e-9
ATOL = 1e-12


class Aggregate(str, enum.Enum):
    SUM = "sum"
    AVG = "avg"


class MassMode(str, enum.Enum):
    SIGNED = "signed"
    ABSOLUTE = "absolute"


@dataclass(frozen=True)
class Segment:
    """One straight piece of an object's score function."""

    t_l: float
    t_r: float
    v_l: float
    v_r: float
    object_id: int = 0

    def __post_init__(self) -> None:
        vals = (self.t_l, self.t_r, self.v_l, self.v_r)
        if not all(math.isfinite(x) for x in vals):
            raise DomainError(f"segment has non-finite field: {vals}")
        if not self.t_l < self.t_r:
            raise DomainError(f"segment needs t_l < t_r, got {self.t_l} >= {self.t_r}")

    @property
    def slope(self) -> float:
        return (self.v_r - self.v_l) / (self.t_r - self.t_l)


@dataclass(frozen=True)
class TimeInterval:
    t1: float
    t2: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.t1) and math.isfinite(self.t2)):
            raise DomainError("interval endpoints must be finite")
        if self.t1 > self.t2:
            raise DomainError(f"interval needs t1 <= t2, got [{self.t1}, {self.t2}]")

    @property
    def length(self) -> float:
        return self.t2 - self.t1


@dataclass(frozen=True)
class QuerySpec:
    """An aggregate top-k query ``top-k(t1, t2, sigma)``."""

    k: int
    t1: float
    t2: float
    aggregate: Aggregate = Aggregate.SUM

    def __post_init__(self) -> None:
        if int(self.k) != self.k or self.k < 1:
            raise ParameterError(f"k must be a positive integer, got {self.k}")
        TimeInterval(self.t1, self.t2)
        object.__setattr__(self, "aggregate", Aggregate(self.aggregate))
        if self.aggregate is Aggregate.AVG and self.t1 == self.t2:
            raise DomainError("avg over a zero-length interval is undefined")

    @property
    def interval(self) -> TimeInterval:
        return TimeInterval(self.t1, self.t2)


@dataclass(frozen=True)
class RankedAnswer:
    """Ordered ``(object_id, score)`` pairs, best first."""

    entries: tuple[tuple[int, float], ...] = ()

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[tuple[int, float]]:
        return iter(self.entries)

    def __getitem__(self, i: int) -> tuple[int, float]:
        return self.entries[i]

    @property
    def ids(self) -> list[int]:
        return [e[0] for e in self.entries]

    @property
    def scores(self) -> list[float]:
        return [e[1] for e in self.entries]

    @classmethod
    def from_arrays(cls, ids: np.ndarray, scores: np.ndarray) -> RankedAnswer:
        return cls(tuple((int(i), float(s)) for i, s in zip(ids, scores)))


def check_time(t: float, T: float) -> None:
    if not (0.0 <= t <= T):
        raise DomainError(f"time {t} outside the domain [0, {T}]")


# --------------------------------------------------------------------------
# scalar arithmetic


def segment_value(seg: Segment, t: float) -> float:
    if not seg.t_l <= t <= seg.t_r:
        raise DomainError(f"t={t} outside segment [{seg.t_l}, {seg.t_r}]")
    return _interp(seg.t_l, seg.t_r, seg.v_l, seg.v_r, t)


def _interp(t_l: float, t_r: float, v_l: float, v_r: float, t: float) -> float:
    return v_l + (v_r - v_l) * (t - t_l) / (t_r - t_l)


def segment_integral(seg: Segment, t1: float, t2: float) -> float:
    """Integral of one segment clipped to ``[t1, t2]`` (trapezoid area)."""
    return trapezoid(seg.t_l, seg.t_r, seg.v_l, seg.v_r, t1, t2)


def trapezoid(t_l: float, t_r: float, v_l: float, v_r: float, t1: float, t2: float) -> float:
    a = t1 if t1 > t_l else t_l
    b = t2 if t2 < t_r else t_r
    if a >= b:
        return 0.0
    va = v_l if a == t_l else _interp(t_l, t_r, v_l, v_r, a)
    vb = v_r if b == t_r else _interp(t_l, t_r, v_l, v_r, b)
    return 0.5 * (b - a) * (va + vb)


def clipped_integrals(
    t_l: np.ndarray,
    t_r: np.ndarray,
    v_l: np.ndarray,
    v_r: np.ndarray,
    t1: float,
    t2: float,
) -> np.ndarray:
    """Vectorised :func:`trapezoid` over arrays of segments."""
    a = np.maximum(t_l, t1)
    b = np.minimum(t_r, t2)
    width = b - a
    live = width > 0
    slope = (v_r - v_l) / (t_r - t_l)
    va = np.where(a == t_l, v_l, v_l + slope * (a - t_l))
    vb = np.where(b == t_r, v_r, v_l + slope * (b - t_l))
    return np.where(live, 0.5 * width * (va + vb), 0.0)


def absolute_segment_mass(v_l: np.ndarray, v_r: np.ndarray, width: np.ndarray) -> np.ndarray:
    """Integral of ``|g|`` over full segments, split at the zero crossing."""
    v_l = np.asarray(v_l, dtype=float)
    v_r = np.asarray(v_r, dtype=float)
    cross = (v_l * v_r) < 0
    plain = 0.5 * width * (np.abs(v_l) + np.abs(v_r))
    denom = np.where(cross, np.abs(v_l) + np.abs(v_r), 1.0)
    split = 0.5 * width * (v_l * v_l + v_r * v_r) / denom
    return np.where(cross, split, plain)


def apply_aggregate(sum_score: float, q: QuerySpec) -> float:
    if q.aggregate is Aggregate.SUM:
        return sum_score
    if q.t2 <= q.t1:
        raise DomainError("avg over a zero-length interval is undefined")
    return sum_score / (q.t2 - q.t1)


# --------------------------------------------------------------------------
# ranking


def select_topk(scores: np.ndarray, k: int, ids: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Top ``k`` of ``scores`` ordered by descending score, then ascending id.

    ``ids`` defaults to ``1..len(scores)``. Returns ``(ids, scores)`` arrays.
    """
    scores = np.asarray(scores, dtype=float)
    n = scores.shape[0]
    if ids is None:
        ids = np.arange(1, n + 1, dtype=np.int64)
    k = min(k, n)
    if k <= 0:
        return ids[:0], scores[:0]
    if k < n:
        part = np.argpartition(-scores, k - 1)[:k]
        kth = scores[part].min()
        pool = np.flatnonzero(scores >= kth)
    else:
        pool = np.arange(n)
    order = np.lexsort((ids[pool], -scores[pool]))[:k]
    sel = pool[order]
    return ids[sel], scores[sel]


def ranked(scores: np.ndarray, k: int, q: QuerySpec | None = None, ids: np.ndarray | None = None) -> RankedAnswer:
    top_ids, top_scores = select_topk(scores, k, ids)
    if q is not None and q.aggregate is Aggregate.AVG:
        top_scores = top_scores / (q.t2 - q.t1)
    return RankedAnswer.from_arrays(top_ids, top_scores)


# --------------------------------------------------------------------------
# objects and datasets


@dataclass(frozen=True)
class Polyline:
    object_id: int
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self) -> None:
        times = np.array(self.times, dtype=float)
        values = np.array(self.values, dtype=float)
        _check_vertices(times, values, self.object_id)
        times.flags.writeable = False
        values.flags.writeable = False
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    @property
    def n_segments(self) -> int:
        return len(self.times) - 1

    def segments(self) -> list[Segment]:
        t, v = self.times, self.values
        return [
            Segment(float(t[j]), float(t[j + 1]), float(v[j]), float(v[j + 1]), self.object_id)
            for j in range(len(t) - 1)
        ]

    def __call__(self, t: float) -> float:
        if not self.times[0] <= t <= self.times[-1]:
            return 0.0
        return float(np.interp(t, self.times, self.values))


def _check_vertices(times: np.ndarray, values: np.ndarray, oid: int) -> None:
    if times.ndim != 1 or times.shape != values.shape:
        raise DomainError(f"object {oid}: times and values must be equal-length 1-d arrays")
    if len(times) < 2:
        raise DomainError(f"object {oid}: need at least 2 vertices")
    if not (np.all(np.isfinite(times)) and np.all(np.isfinite(values))):
        raise DomainError(f"object {oid}: non-finite vertex")
    if np.any(np.diff(times) <= 0):
        raise DomainError(f"object {oid}: timestamps must be strictly increasing")


def polyline_integral(g: Polyline, t1: float, t2: float) -> float:
    t, v = g.times, g.values
    return float(clipped_integrals(t[:-1], t[1:], v[:-1], v[1:], t1, t2).sum())


@dataclass(frozen=True, eq=False)
class Dataset:
    """``m`` polylines in CSR layout; object ``i`` (1-based) owns vertices
    ``offsets[i-1]:offsets[i]``."""

    offsets: np.ndarray
    times: np.ndarray
    values: np.ndarray
    T: float
    _validated: bool = field(default=False, repr=False)

    def __post_init__(self) -> None:
        offsets = np.ascontiguousarray(self.offsets, dtype=np.int64)
        times = np.ascontiguousarray(self.times, dtype=float)
        values = np.ascontiguousarray(self.values, dtype=float)
        for a in (offsets, times, values):
            a.flags.writeable = False
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "T", float(self.T))
        if not self._validated:
            self._validate()

    def _validate(self) -> None:
        off, t, v = self.offsets, self.times, self.values
        if off.ndim != 1 or len(off) < 1 or off[0] != 0 or off[-1] != len(t) or len(t) != len(v):
            raise DomainError("malformed dataset offsets")
        counts = np.diff(off)
        if np.any(counts < 2):
            bad = int(np.flatnonzero(counts < 2)[0]) + 1
            raise DomainError(f"object {bad}: need at least 2 vertices")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(v))) or not math.isfinite(self.T):
            raise DomainError("dataset contains non-finite values")
        if len(t):
            step = np.diff(t)
            inner = np.ones(len(step), dtype=bool)
            inner[off[1:-1] - 1] = False
            if np.any(step[inner] <= 0):
                raise DomainError("timestamps must be strictly increasing within each object")
            if t.min() < 0 or t.max() > self.T:
                raise DomainError(f"vertex times must lie in [0, {self.T}]")

    # construction -------------------------------------------------------

    @classmethod
    def from_polylines(cls, polylines: Sequence[Polyline], T: float | None = None) -> Dataset:
        ordered = sorted(polylines, key=lambda p: p.object_id)
        if [p.object_id for p in ordered] != list(range(1, len(ordered) + 1)):
            raise DomainError("object ids must be unique and dense in 1..m")
        offsets = np.zeros(len(ordered) + 1, dtype=np.int64)
        offsets[1:] = np.cumsum([len(p.times) for p in ordered])
        times = np.concatenate([p.times for p in ordered]) if ordered else np.zeros(0)
        values = np.concatenate([p.values for p in ordered]) if ordered else np.zeros(0)
        if T is None:
            T = float(times.max()) if len(times) else 0.0
        return cls(offsets, times, values, T)

    @classmethod
    def from_vertices(cls, vertices: Iterable[Sequence[tuple[float, float]]], T: float | None = None) -> Dataset:
        """Build from per-object vertex lists; object ids are assigned 1..m in order."""
        polys = []
        for i, verts in enumerate(vertices, start=1):
            arr = np.asarray(verts, dtype=float).reshape(-1, 2)
            polys.append(Polyline(i, arr[:, 0], arr[:, 1]))
        return cls.from_polylines(polys, T)

    @classmethod
    def empty(cls, T: float = 0.0) -> Dataset:
        return cls(np.zeros(1, dtype=np.int64), np.zeros(0), np.zeros(0), T)

    # shape --------------------------------------------------------------

    @property
    def m(self) -> int:
        return len(self.offsets) - 1

    @property
    def N(self) -> int:
        return len(self.times) - self.m

    @cached_property
    def n_per_object(self) -> np.ndarray:
        return np.diff(self.offsets) - 1

    def polyline(self, object_id: int) -> Polyline:
        a, b = self.offsets[object_id - 1], self.offsets[object_id]
        return Polyline(object_id, self.times[a:b], self.values[a:b])

    @property
    def polylines(self) -> list[Polyline]:
        return [self.polyline(i) for i in range(1, self.m + 1)]

    @cached_property
    def _left_vertex(self) -> np.ndarray:
        keep = np.ones(len(self.times), dtype=bool)
        keep[self.offsets[1:] - 1] = False
        return np.flatnonzero(keep)

    @cached_property
    def seg_obj(self) -> np.ndarray:
        return np.repeat(np.arange(1, self.m + 1, dtype=np.int64), self.n_per_object)

    @property
    def seg_tl(self) -> np.ndarray:
        return self.times[self._left_vertex]

    @property
    def seg_tr(self) -> np.ndarray:
        return self.times[self._left_vertex + 1]

    @property
    def seg_vl(self) -> np.ndarray:
        return self.values[self._left_vertex]

    @property
    def seg_vr(self) -> np.ndarray:
        return self.values[self._left_vertex + 1]

    @cached_property
    def segment_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """``(obj, t_l, t_r, v_l, v_r)`` for all N segments, object-major order."""
        lv = self._left_vertex
        return (self.seg_obj, self.times[lv], self.times[lv + 1], self.values[lv], self.values[lv + 1])

    @cached_property
    def starts(self) -> np.ndarray:
        return self.times[self.offsets[:-1]]

    @cached_property
    def ends(self) -> np.ndarray:
        return self.times[self.offsets[1:] - 1]

    @cached_property
    def has_negative(self) -> bool:
        return bool(np.any(self.values < 0))

    # masses ---------------------------------------------------------------

    @cached_property
    def object_masses(self) -> np.ndarray:
        """Full-extent integral per object (signed)."""
        obj, tl, tr, vl, vr = self.segment_arrays
        seg = 0.5 * (tr - tl) * (vl + vr)
        return np.bincount(obj - 1, weights=seg, minlength=self.m) if self.m else np.zeros(0)

    @cached_property
    def M(self) -> float:
        return float(self.object_masses.sum())

    @cached_property
    def M_abs(self) -> float:
        obj, tl, tr, vl, vr = self.segment_arrays
        return float(absolute_segment_mass(vl, vr, tr - tl).sum())

    def scores(self, t1: float, t2: float) -> np.ndarray:
        """``sigma_i(t1, t2)`` for every object, indexed 0..m-1."""
        obj, tl, tr, vl, vr = self.segment_arrays
        if self.m == 0:
            return np.zeros(0)
        contrib = clipped_integrals(tl, tr, vl, vr, t1, t2)
        return np.bincount(obj - 1, weights=contrib, minlength=self.m)

    # transforms -----------------------------------------------------------

    def absolute(self) -> Dataset:
        """The dataset of ``|g_i|``, with a vertex inserted at every zero crossing."""
        if not self.has_negative:
            return self
        t, v = self.times, self.values
        lv = self._left_vertex
        tl, tr, vl, vr = t[lv], t[lv + 1], v[lv], v[lv + 1]
        tc = tl + (tr - tl) * vl / np.where(vl != vr, vl - vr, 1.0)
        cross = ((vl * vr) < 0) & (tc > tl) & (tc < tr)
        extra = np.zeros(len(t), dtype=np.int64)
        extra[lv[cross]] = 1
        pos = np.arange(len(t)) + np.concatenate(([0], np.cumsum(extra)[:-1]))
        total = len(t) + int(extra.sum())
        nt = np.empty(total)
        nv = np.empty(total)
        nt[pos] = t
        nv[pos] = np.abs(v)
        nt[pos[lv[cross]] + 1] = tc[cross]
        nv[pos[lv[cross]] + 1] = 0.0
        per_obj = np.add.reduceat(extra, self.offsets[:-1]) if self.m else np.zeros(0, dtype=np.int64)
        offsets = self.offsets + np.concatenate(([0], np.cumsum(per_obj)))
        return Dataset(offsets, nt, nv, self.T, _validated=True)

    def with_appended(self, segments: Sequence[Segment]) -> Dataset:
        """A new dataset with each segment appended to the end of its object."""
        extra: dict[int, list[tuple[float, float]]] = {}
        last: dict[int, tuple[float, float]] = {}
        for seg in segments:
            i = seg.object_id
            if i not in last:
                if not 1 <= i <= self.m:
                    raise DomainError(f"unknown object id {i}")
                e = self.offsets[i] - 1
                last[i] = (float(self.times[e]), float(self.values[e]))
            lt, lvv = last[i]
            if not _same_point(lt, lvv, seg.t_l, seg.v_l):
                raise DomainError(f"segment for object {i} does not start at its last vertex")
            extra.setdefault(i, []).append((seg.t_r, seg.v_r))
            last[i] = (seg.t_r, seg.v_r)
        counts = np.diff(self.offsets) + np.array([len(extra.get(i, ())) for i in range(1, self.m + 1)], dtype=np.int64)
        offsets = np.concatenate(([0], np.cumsum(counts)))
        nt = np.empty(offsets[-1])
        nv = np.empty(offsets[-1])
        for i in range(1, self.m + 1):
            a, b = self.offsets[i - 1], self.offsets[i]
            o = offsets[i - 1]
            nt[o : o + b - a] = self.times[a:b]
            nv[o : o + b - a] = self.values[a:b]
            add = extra.get(i)
            if add:
                arr = np.asarray(add)
                nt[o + b - a : offsets[i]] = arr[:, 0]
                nv[o + b - a : offsets[i]] = arr[:, 1]
        T = max(self.T, float(nt.max()) if len(nt) else 0.0)
        return Dataset(offsets, nt, nv, T)


def _same_point(t_a: float, v_a: float, t_b: float, v_b: float) -> bool:
    return math.isclose(t_a, t_b, rel_tol=1e-12, abs_tol=1e-12) and math.isclose(
        v_a, v_b, rel_tol=1e-12, abs_tol=1e-12
    )


def total_mass(ds: Dataset, mode: MassMode | str = MassMode.SIGNED) -> float:
    mode = MassMode(mode)
    return ds.M if mode is MassMode.SIGNED else ds.M_abs


def mass_mode_for(ds: Dataset) -> MassMode:
    return MassMode.ABSOLUTE if ds.has_negative else MassMode.SIGNED


def brute_force_topk(ds: Dataset, q: QuerySpec) -> RankedAnswer:
    """Ground truth: integrate every object, keep the k largest."""
    if ds.m == 0:
        return RankedAnswer()
    return ranked(ds.scores(q.t1, q.t2), q.k, q)


# --------------------------------------------------------------------------
# comparisons


def scores_close(a: float, b: float, rtol: float = RTOL, atol: float = ATOL) -> bool:
    return abs(a - b) <= max(rtol * max(abs(a), abs(b)), atol)


def answers_match(
    got: RankedAnswer,
    want: RankedAnswer,
    true_scores: np.ndarray | None = None,
    rtol: float = RTOL,
    atol: float = ATOL,
) -> bool:
    """Rank-by-rank equality up to score tolerance.

    Object ids must agree at every rank unless the two ids are tied under the
    tolerance (judged by ``true_scores``, indexed by ``object_id - 1``, when
    given, else by the reported scores).
    """
    if len(got) != len(want):
        return False
    if len(set(got.ids)) != len(got):
        return False
    for (gi, gs), (wi, ws) in zip(got, want):
        if not scores_close(gs, ws, rtol, atol):
            return False
        if gi != wi:
            if true_scores is None:
                return False
            if not scores_close(true_scores[gi - 1], true_scores[wi - 1], rtol, atol):
                return False
    return True
