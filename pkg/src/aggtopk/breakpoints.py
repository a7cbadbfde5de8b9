"""Breakpoint sets: time cuts that bound the mass any gap can carry.

``BP1`` places a cut each time the summed mass of all objects since the last
cut reaches ``tau = eps * M``. ``BP2`` places a cut each time the mass of some
single object since the last cut reaches ``tau``, so it never needs more cuts
than ``BP1``. Data with negative values is swept over ``|g_i|`` and ``M`` is the
absolute mass.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .errors import DomainError, ParameterError
from .model import Dataset, MassMode, clipped_integrals, mass_mode_for

#: a running mass within this relative distance below tau counts as reaching it
THRESHOLD_SLACK = 1e-12
#: cuts closer than this (times T) are merged
DEDUPE_REL = 1e-12
#: a cut is dropped when less than this (times tau) of the total mass remains after it
TAIL_GUARD = 1e-9


@dataclass(frozen=True)
class BreakpointSet:
    breakpoints: np.ndarray
    epsilon: float
    tau: float
    mass: float
    method: str
    mass_mode: MassMode = MassMode.SIGNED
    variant: str = ""
    ops: int = 0
    extras: dict[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        b = np.ascontiguousarray(self.breakpoints, dtype=float)
        b.flags.writeable = False
        object.__setattr__(self, "breakpoints", b)

    def __len__(self) -> int:
        return len(self.breakpoints)

    @property
    def r(self) -> int:
        """Number of breakpoints, ``b_0 = 0`` and ``b_r = T`` included."""
        return len(self.breakpoints)

    @property
    def n_gaps(self) -> int:
        return max(0, len(self.breakpoints) - 1)

    @property
    def T(self) -> float:
        return float(self.breakpoints[-1])

    def snap_index(self, t: float) -> int:
        """Index of the smallest breakpoint ``>= t``."""
        if not (0.0 <= t <= self.T):
            raise DomainError(f"time {t} outside the domain [0, {self.T}]")
        return int(np.searchsorted(self.breakpoints, t, "left"))

    def snap(self, t: float) -> float:
        return float(self.breakpoints[self.snap_index(t)])

    def to_meta(self) -> dict[str, Any]:
        return {
            "breakpoints": [float(x) for x in self.breakpoints],
            "epsilon": self.epsilon,
            "tau": self.tau,
            "mass": self.mass,
            "method": self.method,
            "mass_mode": MassMode(self.mass_mode).value,
            "variant": self.variant,
            "ops": self.ops,
        }

    @classmethod
    def from_meta(cls, meta: dict[str, Any]) -> BreakpointSet:
        return cls(
            np.asarray(meta["breakpoints"], dtype=float),
            meta["epsilon"],
            meta["tau"],
            meta["mass"],
            meta["method"],
            MassMode(meta["mass_mode"]),
            meta.get("variant", ""),
            meta.get("ops", 0),
        )


# --------------------------------------------------------------------------
# crossing arithmetic


def solve_crossing(V: float, W: float, I: float, tau: float, t: float, t_next: float = math.inf) -> float | None:
    """Smallest ``t' >= t`` where ``I + V (t'-t) + W (t'-t)^2 / 2`` reaches ``tau``.

    Returns ``None`` when the running mass does not reach ``tau`` by ``t_next``.
    """
    need = tau - I
    if need <= 0:
        return t
    if W == 0:
        if V <= 0:
            return None
        delta = need / V
    else:
        disc = V * V + 2.0 * W * need
        if disc < 0:
            return None
        denom = V + math.sqrt(disc)
        if denom <= 0:
            return None
        # rationalised root of W/2 d^2 + V d - need = 0
        delta = 2.0 * need / denom
    out = t + delta
    return out if out <= t_next else None


def _crossing_many(V: np.ndarray, W: np.ndarray, need: np.ndarray) -> np.ndarray:
    """Vectorised root offset ``d >= 0`` of ``W/2 d^2 + V d = need`` (``inf`` if none)."""
    disc = V * V + 2.0 * W * need
    root = np.sqrt(np.maximum(disc, 0.0))
    denom = V + root
    ok = (disc >= 0) & (denom > 0)
    d = np.where(ok, 2.0 * need / np.where(ok, denom, 1.0), np.inf)
    return np.where(need <= 0, 0.0, d)


def _segment_crossing(
    tl: float, tr: float, vl: float, vr: float, t0: float, I0: float, tau: float
) -> float:
    """Time in ``[t0, tr]`` where ``I0 + integral_{t0}^{t} g`` reaches ``tau`` on one segment, else ``inf``."""
    if t0 >= tr:
        return math.inf
    w = (vr - vl) / (tr - tl)
    v0 = vl + w * (t0 - tl) if t0 > tl else vl
    total = I0 + 0.5 * (tr - t0) * (v0 + vr)
    if total < tau * (1.0 - THRESHOLD_SLACK):
        return math.inf
    x = solve_crossing(v0, w, I0, tau, t0)
    if x is None or x > tr:
        return tr
    return max(x, t0)


def _segment_crossing_many(
    tl: np.ndarray, tr: np.ndarray, vl: np.ndarray, vr: np.ndarray, t0: float, tau: float
) -> np.ndarray:
    """Vectorised :func:`_segment_crossing` with ``I0 = 0`` from a common ``t0``."""
    w = (vr - vl) / (tr - tl)
    v0 = np.where(t0 > tl, vl + w * (t0 - tl), vl)
    live = t0 < tr
    total = 0.5 * (tr - t0) * (v0 + vr)
    hit = live & (total >= tau * (1.0 - THRESHOLD_SLACK))
    x = t0 + _crossing_many(v0, w, np.full(len(tl), tau))
    x = np.minimum(np.where(np.isfinite(x), x, tr), tr)
    return np.where(hit, np.maximum(x, t0), np.inf)


class _MassProfile:
    """Summed mass function ``sum_i |g_i|`` as piecewise-quadratic cumulative."""

    def __init__(self, ds: Dataset) -> None:
        obj, tl, tr, vl, vr = ds.segment_arrays
        w = (vr - vl) / (tr - tl)
        t = np.concatenate((tl, tr))
        dv = np.concatenate((vl, -vr))
        dw = np.concatenate((w, -w))
        times, inv = np.unique(t, return_inverse=True)
        self.times = times
        self.W = np.cumsum(np.bincount(inv, weights=dw, minlength=len(times)))
        d = np.diff(times)
        # value just after each event: jumps plus the linear drift of earlier gaps
        drift = np.concatenate(([0.0], np.cumsum(self.W[:-1] * d)))
        self.V = np.cumsum(np.bincount(inv, weights=dv, minlength=len(times))) + drift
        gap = self.V[:-1] * d + 0.5 * self.W[:-1] * d * d
        self.G = np.concatenate(([0.0], np.cumsum(gap)))
        self.total = float(self.G[-1]) if len(self.G) else 0.0
        self.n_events = len(t)

    def cumulative(self, b: float) -> float:
        if len(self.times) == 0 or b <= self.times[0]:
            return 0.0
        if b >= self.times[-1]:
            return self.total
        k = int(np.searchsorted(self.times, b, "right")) - 1
        d = b - self.times[k]
        return float(self.G[k] + self.V[k] * d + 0.5 * self.W[k] * d * d)

    def remaining(self, b: float) -> float:
        return self.total - self.cumulative(b)


def _check_epsilon(epsilon: float) -> None:
    if not (isinstance(epsilon, (int, float)) and math.isfinite(epsilon) and 0 < epsilon <= 1):
        raise ParameterError(f"epsilon must lie in (0, 1], got {epsilon}")


def _mass_dataset(ds: Dataset) -> tuple[Dataset, MassMode, float]:
    if ds.m == 0 or ds.N == 0:
        raise DomainError("cannot build breakpoints over an empty dataset")
    mode = mass_mode_for(ds)
    mds = ds.absolute() if mode is MassMode.ABSOLUTE else ds
    M = mds.M
    if not M > 0:
        raise DomainError(f"dataset mass must be positive, got {M}")
    return mds, mode, M


def _finish(cuts: list[float] | np.ndarray, T: float) -> np.ndarray:
    tol = DEDUPE_REL * max(T, 1.0)
    out = [0.0]
    for b in cuts:
        b = float(min(max(b, 0.0), T))
        if b - out[-1] > tol and T - b > tol:
            out.append(b)
    out.append(T)
    return np.asarray(out)


# --------------------------------------------------------------------------
# BP1


def build_breakpoints1(ds: Dataset, epsilon: float) -> BreakpointSet:
    """Cut whenever the summed mass since the previous cut reaches ``eps * M``.

    Resetting the running sum at every cut means the ``j``-th cut is where the
    cumulative summed mass first reaches ``j * tau``; each of those is found by
    a search over the swept vertex events and one quadratic solve.
    """
    _check_epsilon(epsilon)
    mds, mode, M = _mass_dataset(ds)
    tau = epsilon * M
    prof = _MassProfile(mds)
    n_cuts = int(math.floor(prof.total / tau * (1.0 + THRESHOLD_SLACK)))
    j = np.arange(1, n_cuts + 1, dtype=float)
    targets = np.minimum(j * tau, prof.total)
    # the profile total and M are summed along different paths; a target within
    # their rounding gap of the end is the end itself
    keep = prof.total - targets > max(TAIL_GUARD * tau, TAIL_GUARD * prof.total)
    targets = targets[keep]
    k = np.clip(np.searchsorted(prof.G, targets, "left") - 1, 0, max(len(prof.G) - 2, 0))
    need = targets - prof.G[k]
    d = _crossing_many(prof.V[k], prof.W[k], need)
    span = prof.times[k + 1] - prof.times[k]
    cuts = prof.times[k] + np.clip(np.where(np.isfinite(d), d, span), 0.0, span)
    return BreakpointSet(_finish(cuts, ds.T), epsilon, tau, M, "BP1", mode, "sweep", prof.n_events)


# --------------------------------------------------------------------------
# BP2


def _sorted_segments(mds: Dataset) -> tuple[np.ndarray, ...]:
    obj, tl, tr, vl, vr = mds.segment_arrays
    order = np.lexsort((obj, tl))
    full = 0.5 * (tr - tl) * (vl + vr)
    return obj[order] - 1, tl[order], tr[order], vl[order], vr[order], full[order]


def build_breakpoints2_baseline(ds: Dataset, epsilon: float) -> BreakpointSet:
    """Per-object threshold sweep that resets every object's running mass at each cut.

    ``ops`` counts segment pops plus ``m`` per cut for the reset.
    """
    _check_epsilon(epsilon)
    mds, mode, M = _mass_dataset(ds)
    tau = epsilon * M
    prof = _MassProfile(mds)
    guard = TAIL_GUARD * tau
    obj, tl, tr, vl, vr, full = _sorted_segments(mds)
    m = mds.m
    cur = np.full(m, -1, dtype=np.int64)
    c_tl, c_tr, c_vl, c_vr = np.zeros(m), np.zeros(m), np.zeros(m), np.zeros(m)
    running = np.zeros(m)  # mass from the last cut to the end of the current segment
    heap: list[tuple[float, int]] = []
    cuts: list[float] = []
    ops = 0
    done = False

    def emit_until(limit: float) -> None:
        nonlocal heap, ops, done
        while heap and heap[0][0] <= limit:
            b = heap[0][0]
            if prof.remaining(b) <= guard:
                heap, done = [], True
                return
            cuts.append(b)
            has = cur >= 0
            running[:] = 0.0
            running[has] = clipped_integrals(c_tl[has], c_tr[has], c_vl[has], c_vr[has], b, np.inf)
            cand = np.full(m, np.inf)
            cand[has] = _segment_crossing_many(c_tl[has], c_tr[has], c_vl[has], c_vr[has], b, tau)
            ops += m
            live = np.flatnonzero(np.isfinite(cand))
            heap = list(zip(cand[live].tolist(), live.tolist()))
            heapq.heapify(heap)

    for s in range(len(obj)):
        if done:
            break
        emit_until(tl[s])
        if done:
            break
        i = obj[s]
        ops += 1
        before = running[i]
        cur[i] = s
        c_tl[i], c_tr[i], c_vl[i], c_vr[i] = tl[s], tr[s], vl[s], vr[s]
        running[i] = before + full[s]
        x = _segment_crossing(tl[s], tr[s], vl[s], vr[s], tl[s], before, tau)
        if x < math.inf:
            heapq.heappush(heap, (x, int(i)))
    if not done:
        emit_until(math.inf)
    return BreakpointSet(_finish(cuts, ds.T), epsilon, tau, M, "BP2", mode, "baseline", ops)


class _KeyedMaxHeap:
    """Binary max-heap over object ids with in-place key updates."""

    __slots__ = ("key", "ids", "pos")

    def __init__(self, n: int) -> None:
        self.key: list[float] = []
        self.ids: list[int] = []
        self.pos = [-1] * n

    def __len__(self) -> int:
        return len(self.ids)

    def top(self) -> tuple[float, int]:
        return self.key[0], self.ids[0]

    def set(self, i: int, k: float) -> None:
        p = self.pos[i]
        if p < 0:
            self.key.append(k)
            self.ids.append(i)
            p = len(self.ids) - 1
            self.pos[i] = p
            self._up(p)
            return
        old = self.key[p]
        self.key[p] = k
        if k > old:
            self._up(p)
        elif k < old:
            self._down(p)

    def discard(self, i: int) -> None:
        p = self.pos[i]
        if p < 0:
            return
        last = len(self.ids) - 1
        self._swap(p, last)
        self.key.pop()
        self.ids.pop()
        self.pos[i] = -1
        if p < last:
            self._up(p)
            self._down(p)

    def pop(self) -> int:
        i = self.ids[0]
        self.discard(i)
        return i

    def _swap(self, a: int, b: int) -> None:
        key, ids, pos = self.key, self.ids, self.pos
        key[a], key[b] = key[b], key[a]
        ids[a], ids[b] = ids[b], ids[a]
        pos[ids[a]] = a
        pos[ids[b]] = b

    def _up(self, p: int) -> None:
        key = self.key
        while p > 0:
            q = (p - 1) >> 1
            if key[q] >= key[p]:
                return
            self._swap(p, q)
            p = q

    def _down(self, p: int) -> None:
        key = self.key
        n = len(key)
        while True:
            c = 2 * p + 1
            if c >= n:
                return
            if c + 1 < n and key[c + 1] > key[c]:
                c += 1
            if key[p] >= key[c]:
                return
            self._swap(p, c)
            p = c


def build_breakpoints2_efficient(ds: Dataset, epsilon: float) -> BreakpointSet:
    """Per-object threshold sweep without per-cut resets.

    Each object keeps its cumulative mass ``C_i`` from time 0; its mass since
    the current cut ``b`` is ``C_i(t) - C_i(b)``, with ``C_i(b)`` computed
    lazily the next time the object is touched.

    An object cannot cross before ``b + tau / G_i`` where ``G_i`` is the peak
    value of its segments since ``b``, so objects wait in a max-heap on
    ``G_i``; the bound moves with ``b`` without rekeying. An object is
    evaluated exactly only while its bound beats the best exact candidate.
    Exact candidates made against an older cut fall back to the peak heap when
    they reach the top, so a cut costs work for the few objects that could
    plausibly cross next rather than for all ``m``.

    ``ops`` counts segment pops, heap removals and exact evaluations; each
    segment pop also makes one keyed-heap update.
    """
    _check_epsilon(epsilon)
    mds, mode, M = _mass_dataset(ds)
    tau = epsilon * M
    prof = _MassProfile(mds)
    guard = TAIL_GUARD * tau
    obj, tl, tr, vl, vr, full = _sorted_segments(mds)
    m = mds.m
    tl_l, tr_l, vl_l, vr_l, full_l = tl.tolist(), tr.tolist(), vl.tolist(), vr.tolist(), full.tolist()
    peak_l = np.maximum(vl, vr).tolist()
    reach = tau * (1.0 - THRESHOLD_SLACK)
    cur = [-1] * m
    c_start = [0.0] * m
    base = [0.0] * m
    base_epoch = [0] * m
    version = [0] * m
    dormant = [True] * m  # no crossing possible before the next segment
    cuts: list[float] = [0.0]
    exact: list[tuple[float, int, int, int]] = []  # crossing, obj, version, epoch
    by_peak = _KeyedMaxHeap(m)  # objects keyed by peak value since the cut
    since_peak = [0.0] * m
    since_epoch = [-1] * m
    ops = 0

    def rebase(i: int) -> None:
        e = len(cuts) - 1
        if base_epoch[i] == e:
            return
        s = cur[i]
        b = cuts[e]
        if s < 0:
            val = 0.0
        elif b >= tr_l[s]:
            val = c_start[i] + full_l[s]
        elif b <= tl_l[s]:
            val = c_start[i]
        else:
            w = (vr_l[s] - vl_l[s]) / (tr_l[s] - tl_l[s])
            val = c_start[i] + 0.5 * (b - tl_l[s]) * (2.0 * vl_l[s] + w * (b - tl_l[s]))
        base[i] = val
        base_epoch[i] = e

    def evaluate(i: int) -> None:
        version[i] += 1
        by_peak.discard(i)
        s = cur[i]
        b = cuts[-1]
        rebase(i)
        if tl_l[s] > b:
            x = _segment_crossing(tl_l[s], tr_l[s], vl_l[s], vr_l[s], tl_l[s], c_start[i] - base[i], tau)
        else:
            x = _segment_crossing(tl_l[s], tr_l[s], vl_l[s], vr_l[s], b, 0.0, tau)
        if x < math.inf:
            heapq.heappush(exact, (x, i, version[i], len(cuts) - 1))
        else:
            dormant[i] = True

    def clean_exact() -> None:
        # drop superseded candidates; one made against an older cut is
        # bounded by the peak heap from now on
        nonlocal ops
        epoch = len(cuts) - 1
        while exact:
            _, i, ver, ep = exact[0]
            if ver == version[i] and ep == epoch:
                return
            heapq.heappop(exact)
            ops += 1
            if ver == version[i]:
                version[i] += 1
                if tr_l[cur[i]] > cuts[-1]:
                    by_peak.set(i, peak_l[cur[i]])

    def advance(limit: float) -> bool:
        nonlocal ops
        while True:
            clean_exact()
            k = exact[0][0] if exact else math.inf
            h = cuts[-1] + tau / by_peak.top()[0] if len(by_peak) else math.inf
            if h < k and h <= limit:
                i = by_peak.pop()
                ops += 1
                evaluate(i)
            elif exact and k <= limit:
                i = heapq.heappop(exact)[1]
                ops += 1
                if prof.remaining(k) <= guard:
                    return False
                cuts.append(k)
                evaluate(i)
            else:
                return True

    alive = True
    for s in range(len(obj)):
        if not advance(tl_l[s]):
            alive = False
            break
        i = int(obj[s])
        ops += 1
        rebase(i)
        prev = cur[i]
        c_start[i] = c_start[i] + full_l[prev] if prev >= 0 else 0.0
        cur[i] = s
        version[i] += 1
        epoch = len(cuts) - 1
        if since_epoch[i] != epoch:
            since_epoch[i] = epoch
            since_peak[i] = peak_l[prev] if prev >= 0 and tr_l[prev] > cuts[-1] else 0.0
        since_peak[i] = max(since_peak[i], peak_l[s])
        dormant[i] = not (c_start[i] - base[i] + full_l[s] >= reach and since_peak[i] > 0)
        if dormant[i]:
            by_peak.discard(i)
        else:
            by_peak.set(i, since_peak[i])
    if alive:
        advance(math.inf)
    return BreakpointSet(_finish(cuts[1:], ds.T), epsilon, tau, M, "BP2", mode, "efficient", ops)


def build_breakpoints2(ds: Dataset, epsilon: float, variant: str = "efficient") -> BreakpointSet:
    if variant == "efficient":
        return build_breakpoints2_efficient(ds, epsilon)
    if variant == "baseline":
        return build_breakpoints2_baseline(ds, epsilon)
    raise ParameterError(f"unknown BP2 variant {variant!r}")


def build_breakpoints(ds: Dataset, epsilon: float, method: str = "BP2", variant: str = "efficient") -> BreakpointSet:
    method = method.upper()
    if method == "BP1":
        return build_breakpoints1(ds, epsilon)
    if method == "BP2":
        return build_breakpoints2(ds, epsilon, variant)
    raise ParameterError(f"unknown breakpoint method {method!r}")


def build_for_target(ds: Dataset, r_target: int, method: str = "BP2", iterations: int = 40) -> BreakpointSet:
    """Breakpoints with at most ``r_target`` cuts (endpoints included).

    BP1 uses ``eps = 1/(r-1)`` directly. BP2 searches ``eps`` on a log scale for
    the smallest value whose set still fits.
    """
    if int(r_target) != r_target or r_target < 2:
        raise ParameterError(f"target breakpoint count must be an integer >= 2, got {r_target}")
    method = method.upper()
    if method == "BP1":
        return build_breakpoints1(ds, 1.0 / (r_target - 1))
    best = build_breakpoints2(ds, 1.0)
    if best.r > r_target:
        return best
    lo, hi = math.log(1e-12), 0.0  # log eps: hi always fits
    first = build_breakpoints2(ds, 1.0 / (r_target - 1))
    if first.r <= r_target:
        best, hi = first, math.log(first.epsilon)
    else:
        lo = math.log(first.epsilon)
    for _ in range(iterations):
        if hi - lo < 1e-4:
            break
        mid = 0.5 * (lo + hi)
        cand = build_breakpoints2(ds, math.exp(mid))
        if cand.r <= r_target:
            best, hi = cand, mid
            if cand.r == r_target:
                break
        else:
            lo = mid
    return best
