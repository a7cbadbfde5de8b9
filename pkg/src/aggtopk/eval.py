"""Evaluation harness: synthetic data, quality metrics, guarantee checks and
IO benchmarks."""

from __future__ import annotations

import csv
import enum
import json
import math
import os
import time
from collections.abc import Callable, Iterable, Sequence
from dataclasses import asdict, dataclass, field, fields
from typing import Any

import numpy as np

from .errors import ParameterError
from .model import Aggregate, Dataset, QuerySpec, RankedAnswer
from .storage.blockstore import IoStats

# --------------------------------------------------------------------------
# synthetic data


class Profile(str, enum.Enum):
    RANDOM_WALK_POSITIVE = "random_walk_positive"
    RANDOM_WALK_MIXED = "random_walk_mixed"
    DISJOINT_SUPPORT = "disjoint_support"
    BURSTY = "bursty"


@dataclass(frozen=True)
class SynthProfile:
    kind: Profile | str
    m: int
    n_avg: float
    seed: int = 0
    T: float = 1000.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", Profile(self.kind))
        if self.m < 1 or self.n_avg < 1:
            raise ParameterError(f"need m >= 1 and n_avg >= 1, got m={self.m}, n_avg={self.n_avg}")
        if not (math.isfinite(self.T) and self.T > 0):
            raise ParameterError(f"T must be positive, got {self.T}")


def _segment_counts(rng: np.random.Generator, m: int, n_avg: float) -> np.ndarray:
    # geometric on {1, 2, ...} with mean n_avg
    return rng.geometric(1.0 / n_avg, size=m).astype(np.int64)


def _vertex_times(rng: np.random.Generator, n: int, lo: float, hi: float) -> np.ndarray:
    inner = np.sort(rng.uniform(lo, hi, size=n - 1))
    t = np.concatenate(([lo], inner, [hi]))
    # uniform draws can collide; fall back to an even grid for that object
    if np.any(np.diff(t) <= 0):
        t = np.linspace(lo, hi, n + 1)
    return t


def _walk(rng: np.random.Generator, t: np.ndarray, level: float, vol: float) -> np.ndarray:
    dt = np.diff(t)
    span = max(t[-1] - t[0], 1e-300)
    steps = rng.normal(0.0, vol, size=len(dt)) * np.sqrt(dt / span)
    return level + np.concatenate(([0.0], np.cumsum(steps)))


def gen_synthetic(profile: SynthProfile) -> Dataset:
    """Deterministic dataset for ``profile``; same profile, same bytes."""
    p = profile
    rng = np.random.default_rng([p.seed, list(Profile).index(p.kind), p.m])
    counts = _segment_counts(rng, p.m, p.n_avg)
    T = float(p.T)
    times, values = [], []
    if p.kind is Profile.DISJOINT_SUPPORT:
        edges = np.linspace(0.0, T, p.m + 1)
        edges[-1] = T
    for i, n in enumerate(counts):
        n = int(n)
        if p.kind is Profile.RANDOM_WALK_POSITIVE:
            lo = rng.uniform(0.0, 0.1 * T) if i else 0.0
            hi = rng.uniform(0.9 * T, T) if i else T
            t = _vertex_times(rng, n, lo, hi)
            level = rng.lognormal(2.0, 0.6)
            v = np.abs(_walk(rng, t, level, 0.5 * level))
        elif p.kind is Profile.RANDOM_WALK_MIXED:
            lo = rng.uniform(0.0, 0.1 * T) if i else 0.0
            hi = rng.uniform(0.9 * T, T) if i else T
            t = _vertex_times(rng, n, lo, hi)
            v = _walk(rng, t, rng.normal(0.0, 5.0), 8.0)
        elif p.kind is Profile.DISJOINT_SUPPORT:
            t = _vertex_times(rng, n, float(edges[i]), float(edges[i + 1]))
            v = rng.uniform(0.5, 2.0, size=n + 1)
            # equal mass per object, so evenly spaced cuts can land on boundaries
            v = v / (0.5 * np.sum(np.diff(t) * (v[:-1] + v[1:])))
        else:
            width = T * rng.uniform(0.01, 0.1)
            lo = rng.uniform(0.0, T - width)
            t = _vertex_times(rng, n, lo, lo + width)
            peak = rng.pareto(1.5) + 1.0
            shape = np.exp(-3.0 * (t - lo) / width) * (1.0 - np.exp(-20.0 * (t - lo) / width))
            v = peak * shape * rng.uniform(0.5, 1.5, size=n + 1)
        times.append(t)
        values.append(v)
    offsets = np.concatenate(([0], np.cumsum([len(t) for t in times])))
    return Dataset(offsets, np.concatenate(times), np.concatenate(values), T)


def make_workload(
    T: float, n: int, frac: float, k: int, seed: int = 0, aggregate: Aggregate | str = Aggregate.SUM
) -> list[QuerySpec]:
    """``n`` queries of length ``frac * T`` at uniform random positions."""
    if not 0 < frac <= 1:
        raise ParameterError(f"interval fraction must be in (0, 1], got {frac}")
    rng = np.random.default_rng(seed)
    width = frac * T
    starts = rng.uniform(0.0, T - width, size=n)
    return [QuerySpec(k, float(s), float(min(T, s + width)), aggregate) for s in starts]


def random_queries(T: float, n: int, k_max: int, seed: int = 0) -> list[QuerySpec]:
    """``n`` queries with uniform endpoints and ``k`` uniform in ``1..k_max``."""
    rng = np.random.default_rng(seed)
    a = rng.uniform(0.0, T, size=(n, 2))
    a.sort(axis=1)
    ks = rng.integers(1, k_max + 1, size=n)
    return [QuerySpec(int(k), float(x), float(y)) for k, (x, y) in zip(ks, a)]


# --------------------------------------------------------------------------
# metrics


def precision_recall(ans: RankedAnswer, truth: RankedAnswer) -> float:
    """``|ans & truth| / k`` on object-id sets."""
    if len(ans) != len(truth):
        raise ParameterError(f"answer has {len(ans)} entries but the truth has {len(truth)}")
    if len(truth) == 0:
        return 1.0
    return len(set(ans.ids) & set(truth.ids)) / len(truth)


@dataclass(frozen=True)
class RatioStats:
    mean: float
    max_deviation: float
    n_used: int
    n_zero: int

    def __float__(self) -> float:
        return self.mean


def ratio_from_pairs(reported: Sequence[float], true: Sequence[float]) -> RatioStats:
    rep = np.asarray(reported, dtype=float)
    tru = np.asarray(true, dtype=float)
    zero = tru == 0
    r = rep[~zero] / tru[~zero]
    if len(r) == 0:
        return RatioStats(math.nan, math.nan, 0, int(zero.sum()))
    return RatioStats(float(r.mean()), float(np.abs(r - 1.0).max()), len(r), int(zero.sum()))


def approx_ratio(ans: RankedAnswer, ds: Dataset, q: QuerySpec, true_scores: np.ndarray | None = None) -> RatioStats:
    """Mean of reported / true score over the returned objects, true scores
    taken over the raw ``[t1, t2]``; objects whose true score is 0 are skipped
    and counted in ``n_zero``."""
    if true_scores is None:
        true_scores = ds.scores(q.t1, q.t2)
    tru = true_scores[np.asarray(ans.ids, dtype=np.int64) - 1] if len(ans) else np.zeros(0)
    if q.aggregate is Aggregate.AVG:
        tru = tru / (q.t2 - q.t1)
    return ratio_from_pairs(ans.scores, tru)


def _slack(*xs: float) -> float:
    return 1e-9 * max(abs(x) for x in xs) + 1e-12


def within(score: float, sigma: float, epsilon: float, alpha: float, M: float) -> bool:
    """``sigma / alpha - eps*M <= score <= sigma + eps*M`` up to rounding."""
    tau = epsilon * M
    tol = _slack(score, sigma, tau)
    return sigma / alpha - tau - tol <= score <= sigma + tau + tol


def verify_rankwise(
    ans: RankedAnswer,
    truth: RankedAnswer,
    epsilon: float,
    alpha: float,
    M: float,
    own_true: Sequence[float] | None = None,
) -> list[bool]:
    """Per rank ``j``: the reported score must approximate the true rank-``j``
    score and, when ``own_true`` (true scores of the reported objects) is
    given, the reported object's own true score."""
    if len(ans) != len(truth):
        raise ParameterError(f"answer has {len(ans)} entries but the truth has {len(truth)}")
    out = []
    for j, ((_, s), (_, sigma)) in enumerate(zip(ans, truth)):
        ok = within(s, sigma, epsilon, alpha, M)
        if own_true is not None:
            ok = ok and within(s, float(own_true[j]), epsilon, alpha, M)
        out.append(ok)
    return out


@dataclass
class QualityReport:
    precision_recall: float
    mean_approx_ratio: float
    max_ratio_deviation: float
    zero_scores: int
    rankwise_pass: bool
    query: dict[str, Any] = field(default_factory=dict)
    method: str = ""


def evaluate_answer(
    ans: RankedAnswer,
    ds: Dataset,
    q: QuerySpec,
    epsilon: float = 0.0,
    alpha: float = 1.0,
    M: float | None = None,
    method: str = "",
) -> QualityReport:
    from .model import ranked

    scores = ds.scores(q.t1, q.t2)
    truth = ranked(scores, q.k, q)
    ratio = approx_ratio(ans, ds, q, scores)
    own = scores[np.asarray(ans.ids, dtype=np.int64) - 1] if len(ans) else np.zeros(0)
    if M is None:
        M = ds.M_abs
    checks = verify_rankwise(ans, truth, epsilon, alpha, M, own) if q.aggregate is Aggregate.SUM else []
    return QualityReport(
        precision_recall(ans, truth),
        ratio.mean,
        ratio.max_deviation,
        ratio.n_zero,
        all(checks),
        {"k": q.k, "t1": q.t1, "t2": q.t2, "aggregate": q.aggregate.value},
        method,
    )


@dataclass
class QualitySummary:
    method: str
    queries: int
    mean_precision: float
    mean_ratio: float
    max_ratio_deviation: float
    zero_scores: int
    rankwise_pass_rate: float


def summarize(reports: Sequence[QualityReport], method: str = "") -> QualitySummary:
    ratios = [r.mean_approx_ratio for r in reports if not math.isnan(r.mean_approx_ratio)]
    devs = [r.max_ratio_deviation for r in reports if not math.isnan(r.max_ratio_deviation)]
    n = len(reports)
    return QualitySummary(
        method or (reports[0].method if reports else ""),
        n,
        float(np.mean([r.precision_recall for r in reports])) if n else math.nan,
        float(np.mean(ratios)) if ratios else math.nan,
        float(max(devs)) if devs else math.nan,
        sum(r.zero_scores for r in reports),
        float(np.mean([r.rankwise_pass for r in reports])) if n else math.nan,
    )


# --------------------------------------------------------------------------
# benchmarking


@dataclass
class BenchRow:
    method: str
    m: int
    N: int
    n_avg: float
    r: int
    epsilon: float
    k: int
    k_max: int
    interval_frac: float
    build_io: int
    build_seconds: float
    index_pages: int
    queries: int
    query_io_mean: float
    query_io_min: int
    query_io_max: int
    query_seconds_mean: float


def bench_index(
    method: str,
    idx: Any,
    answer: Callable[[QuerySpec, IoStats], RankedAnswer],
    workload: Sequence[QuerySpec],
    ds_shape: tuple[int, int],
    build_seconds: float = 0.0,
    interval_frac: float = math.nan,
) -> BenchRow:
    """Run ``workload`` through ``answer`` charging each query to a fresh IoStats."""
    ios, secs = [], []
    for q in workload:
        io = IoStats()
        t0 = time.perf_counter()
        answer(q, io)
        secs.append(time.perf_counter() - t0)
        ios.append(io.reads)
    m, N = ds_shape
    bps = getattr(idx, "bps", None)
    return BenchRow(
        method,
        m,
        N,
        N / m if m else 0.0,
        bps.r if bps is not None else 0,
        bps.epsilon if bps is not None else 0.0,
        workload[0].k if workload else 0,
        getattr(idx, "k_max", 0),
        interval_frac,
        idx.build_io.total,
        build_seconds,
        idx.n_pages,
        len(workload),
        float(np.mean(ios)) if ios else 0.0,
        int(min(ios)) if ios else 0,
        int(max(ios)) if ios else 0,
        float(np.mean(secs)) if secs else 0.0,
    )


EXACT_METHODS = ("exact1", "exact2", "exact3")


def build_method(
    ds: Dataset,
    method: str,
    epsilon: float | None = None,
    r_target: int | None = None,
    k_max: int = 200,
    page_size: int = 4096,
    enforce_capacity: bool = True,
):
    """Build the index behind any method tag (in memory)."""
    from .approx import METHODS, build_approx
    from .exact import Exact1Index, Exact2Index, Exact3Index

    if method in EXACT_METHODS:
        cls = {"exact1": Exact1Index, "exact2": Exact2Index, "exact3": Exact3Index}[method]
        return cls.build(ds, page_size=page_size)
    if method in METHODS:
        return build_approx(
            ds, method, epsilon, r_target, k_max, page_size=page_size, enforce_capacity=enforce_capacity
        )
    raise ParameterError(f"unknown method {method!r}")


def answer_fn(idx: Any) -> Callable[[QuerySpec, IoStats], RankedAnswer]:
    from .approx import ApproxIndex, approx_answer

    if isinstance(idx, ApproxIndex):
        return lambda q, io: approx_answer(idx, q, io)
    return lambda q, io: idx.query(q, io)


def bench(
    ds: Dataset,
    methods: Iterable[str],
    workload: Sequence[QuerySpec],
    epsilon: float | None = None,
    r_target: int | None = None,
    k_max: int = 200,
    page_size: int = 4096,
    enforce_capacity: bool = True,
    interval_frac: float = math.nan,
) -> list[BenchRow]:
    """Build each method on ``ds`` and measure ``workload`` against it."""
    rows = []
    for method in methods:
        t0 = time.perf_counter()
        idx = build_method(ds, method, epsilon, r_target, k_max, page_size, enforce_capacity)
        built = time.perf_counter() - t0
        rows.append(bench_index(method, idx, answer_fn(idx), workload, (ds.m, ds.N), built, interval_frac))
        idx.close()
    return rows


def write_jsonl(rows: Iterable[Any], path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(asdict(row), sort_keys=False) + "\n")


def write_tsv(rows: Sequence[Any], path: str | os.PathLike) -> None:
    rows = list(rows)
    with open(path, "w", newline="") as fh:
        if not rows:
            return
        cols = [f.name for f in fields(rows[0])]
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(cols)
        for row in rows:
            d = asdict(row)
            w.writerow([json.dumps(d[c]) if isinstance(d[c], dict) else d[c] for c in cols])


__all__ = [
    "BenchRow",
    "Profile",
    "QualityReport",
    "QualitySummary",
    "RatioStats",
    "SynthProfile",
    "approx_ratio",
    "bench",
    "bench_index",
    "build_method",
    "evaluate_answer",
    "gen_synthetic",
    "make_workload",
    "precision_recall",
    "random_queries",
    "ratio_from_pairs",
    "summarize",
    "verify_rankwise",
    "within",
    "write_jsonl",
    "write_tsv",
]
