"""Command-line interface.

Every command prints line-delimited JSON records on stdout. Failures exit
nonzero after printing one ``{"error": ..., "message": ...}`` line on stderr
(exit code 2 for usage errors, 1 otherwise). Relative paths are resolved
against ``$TRNK_DATA_DIR`` when it is set.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from pathlib import Path
from typing import Any

from . import __version__
from .approx import METHODS, ApproxIndex, Query1Index, Query2Index, build_approx
from .datafile import load_dataset, read_csv, save_dataset, write_csv
from .errors import AggTopkError, FormatError
from .eval import (
    EXACT_METHODS,
    Profile,
    SynthProfile,
    answer_fn,
    bench_index,
    evaluate_answer,
    gen_synthetic,
    make_workload,
    summarize,
    write_jsonl,
    write_tsv,
)
from .exact import Exact1Index, Exact2Index, Exact3Index
from .model import Aggregate, Dataset, QuerySpec
from .storage.blockstore import DEFAULT_PAGE_SIZE, IoStats, read_header

DATA_DIR_ENV = "TRNK_DATA_DIR"
ALL_METHODS = (*EXACT_METHODS, *METHODS)
INDEX_CLASSES = {"EX1": Exact1Index, "EX2": Exact2Index, "EX3": Exact3Index, "Q1": Query1Index, "Q2": Query2Index}


class UsageError(AggTopkError):
    pass


class _Parser(argparse.ArgumentParser):
    def __init__(self, *args: Any, **kwargs: Any) -> None:
        kwargs.setdefault("allow_abbrev", False)
        super().__init__(*args, **kwargs)

    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(message)


def _path(p: str) -> Path:
    path = Path(p)
    base = os.environ.get(DATA_DIR_ENV)
    if base and not path.is_absolute():
        return Path(base) / path
    return path


def _emit(record: dict[str, Any]) -> None:
    print(json.dumps(record), flush=True)


def _dataset_summary(ds: Dataset) -> dict[str, Any]:
    return {"m": ds.m, "N": ds.N, "M": ds.M, "M_abs": ds.M_abs, "T": ds.T}


def _is_dataset_file(path: Path) -> bool:
    with open(path, "rb") as fh:
        head = fh.read(10)
    return head[:4] == b"TRNK" and head[6:10] == b"DSET"


def _load_any_dataset(path: Path, T: float | None = None) -> Dataset:
    if _is_dataset_file(path):
        return load_dataset(path)
    ds, _ = read_csv(path, T)
    return ds


def open_index(path: str | os.PathLike, cache_pages: int = 0):
    """Open any index file, dispatching on the kind tag in its header."""
    header = read_header(path)
    cls = INDEX_CLASSES[header.kind]
    idx = cls.open(path, cache_pages)
    if isinstance(idx, Query2Index) and idx.companion_path:
        comp = Path(idx.companion_path)
        if not comp.is_absolute():
            comp = Path(path).parent / comp
        idx.companion_path = str(comp)
    return idx


def _method_of(idx: Any) -> str:
    if isinstance(idx, ApproxIndex):
        return idx.method
    return idx.name


# --------------------------------------------------------------------------
# commands


def cmd_gen(a: argparse.Namespace) -> None:
    ds = gen_synthetic(SynthProfile(a.profile, a.m, a.n_avg, a.seed, a.T))
    out = _path(a.out)
    if a.format == "csv":
        write_csv(ds, out)
    else:
        save_dataset(ds, out)
    _emit({"command": "gen", "path": str(out), "profile": a.profile, "seed": a.seed, **_dataset_summary(ds)})


def cmd_ingest(a: argparse.Namespace) -> None:
    src = _path(a.input)
    ds = _load_any_dataset(src, a.T)
    out = _path(a.out)
    save_dataset(ds, out)
    _emit({"command": "ingest", "path": str(out), **_dataset_summary(ds)})


def cmd_build(a: argparse.Namespace) -> None:
    if a.epsilon is not None and a.r_target is not None:
        raise UsageError("give at most one of --epsilon and --r-target")
    data = _path(a.data)
    ds = _load_any_dataset(data)
    out = _path(a.out)
    t0 = time.perf_counter()
    if a.method in EXACT_METHODS:
        cls = {"exact1": Exact1Index, "exact2": Exact2Index, "exact3": Exact3Index}[a.method]
        idx = cls.build(ds, out, a.block_size)
        extra: dict[str, Any] = {}
    else:
        eps, r_target = a.epsilon, a.r_target
        if eps is None and r_target is None:
            eps = 0.01
        companion = companion_path = None
        if a.method == "appx2plus":
            companion_path = (_path(a.companion) if a.companion else out.with_name(out.name + ".ex2")).resolve()
            if a.companion and companion_path.exists():
                companion = Exact2Index.open(companion_path)
            else:
                companion = Exact2Index.build(ds, companion_path, a.block_size)
        idx = build_approx(
            ds,
            a.method,
            eps,
            r_target,
            a.k_max,
            out,
            a.block_size,
            enforce_capacity=not a.allow_oversize,
            companion=companion,
            companion_path=companion_path,
        )
        if data.suffix != ".csv":
            idx.dataset_path = str(data.resolve())
            idx.flush()
        extra = {"r": idx.r, "epsilon": idx.epsilon, "tau": idx.tau, "k_max": idx.k_max}
        if companion_path is not None:
            extra["companion"] = str(companion_path)
            companion.close()
    elapsed = time.perf_counter() - t0
    record = {
        "command": "build",
        "method": a.method,
        "path": str(out),
        "pages": idx.n_pages,
        "build_io": idx.build_io.total,
        "seconds": round(elapsed, 6),
        **extra,
    }
    idx.close()
    _emit(record)


def cmd_query(a: argparse.Namespace) -> None:
    if a.t1 > a.t2:
        raise UsageError(f"t1 must not exceed t2 (got {a.t1} > {a.t2})")
    if a.k < 1:
        raise UsageError(f"k must be at least 1 (got {a.k})")
    idx = open_index(_path(a.index))
    try:
        if isinstance(idx, ApproxIndex) and a.k > idx.k_max:
            raise UsageError(f"k={a.k} exceeds the index k_max={idx.k_max}")
        q = QuerySpec(a.k, a.t1, a.t2, a.aggregate)
        io = IoStats()
        t0 = time.perf_counter()
        ans = answer_fn(idx)(q, io)
        elapsed = time.perf_counter() - t0
    finally:
        idx.close()
    for rank, (oid, score) in enumerate(ans, start=1):
        _emit({"rank": rank, "object_id": oid, "score": score})
    _emit({"trailer": True, "method": _method_of(idx), "results": len(ans), "io": io.reads, "seconds": elapsed})


def _indexes_for(a: argparse.Namespace, ds: Dataset | None) -> list[tuple[str, Any, float]]:
    """(label, index, build seconds) for every --index file or --methods entry."""
    out = []
    missing = [p for p in (a.index or []) if not _path(p).exists()]
    if missing:
        raise FormatError(f"missing index files: {', '.join(missing)}; build them with `aggtopk build` first")
    for p in a.index or []:
        idx = open_index(_path(p))
        out.append((_method_of(idx), idx, 0.0))
    methods = [m for m in (a.methods or "").split(",") if m]
    if methods and ds is None:
        raise UsageError("--methods needs --data")
    grid = [None]
    if methods and getattr(a, "r_targets", None):
        grid = [int(x) for x in a.r_targets.split(",") if x]
    for method in methods:
        if method not in ALL_METHODS:
            raise UsageError(f"unknown method {method!r}; choose from {', '.join(ALL_METHODS)}")
        for r_target in grid if method in METHODS else [None]:
            t0 = time.perf_counter()
            if method in EXACT_METHODS:
                cls = {"exact1": Exact1Index, "exact2": Exact2Index, "exact3": Exact3Index}[method]
                idx = cls.build(ds, page_size=a.block_size)
            else:
                eps = a.epsilon if r_target is None else None
                if eps is None and r_target is None:
                    eps = 0.01
                idx = build_approx(
                    ds, method, eps, r_target, a.k_max, page_size=a.block_size, enforce_capacity=not a.allow_oversize
                )
            out.append((method, idx, time.perf_counter() - t0))
    if not out:
        raise UsageError("nothing to run: pass --index files or --data with --methods")
    return out


def _domain(a: argparse.Namespace, ds: Dataset | None, indexes: list[tuple[str, Any, float]]) -> float:
    if ds is not None:
        return ds.T
    return min(idx.T for _, idx, _ in indexes)


def cmd_bench(a: argparse.Namespace) -> None:
    ds = _load_any_dataset(_path(a.data)) if a.data else None
    indexes = _indexes_for(a, ds)
    T = _domain(a, ds, indexes)
    rows = []
    for frac in [float(x) for x in a.fracs.split(",")]:
        wl = make_workload(T, a.queries, frac, a.k, a.seed, a.aggregate)
        for label, idx, built in indexes:
            shape = (ds.m, ds.N) if ds is not None else (idx.m, idx.n_segments)
            if isinstance(idx, ApproxIndex) and a.k > idx.k_max:
                raise UsageError(f"k={a.k} exceeds k_max={idx.k_max} of {label}")
            rows.append(bench_index(label, idx, answer_fn(idx), wl, shape, built, frac))
    for _, idx, _ in indexes:
        idx.close()
    for row in rows:
        _emit({"row": "bench", **row.__dict__})
    if a.out:
        prefix = _path(a.out)
        write_jsonl(rows, str(prefix) + ".jsonl")
        write_tsv(rows, str(prefix) + ".tsv")


def cmd_eval(a: argparse.Namespace) -> None:
    ds = _load_any_dataset(_path(a.data))
    indexes = _indexes_for(a, ds)
    wl = make_workload(ds.T, a.queries, a.frac, a.k, a.seed)
    summaries = []
    for label, idx, _ in indexes:
        if isinstance(idx, ApproxIndex):
            from .approx import query2_alpha

            eps, M = idx.epsilon, idx.bps.mass
            alpha = 1 if isinstance(idx, Query1Index) else query2_alpha(idx.r)
            if a.k > idx.k_max:
                raise UsageError(f"k={a.k} exceeds k_max={idx.k_max} of {label}")
        else:
            eps, M, alpha = 0.0, ds.M_abs, 1
        answer = answer_fn(idx)
        reports = [evaluate_answer(answer(q, IoStats()), ds, q, eps, alpha, M, label) for q in wl]
        summaries.append(summarize(reports, label))
        idx.close()
    for s in summaries:
        _emit({"row": "quality", **s.__dict__})
    if a.out:
        prefix = _path(a.out)
        write_jsonl(summaries, str(prefix) + ".jsonl")
        write_tsv(summaries, str(prefix) + ".tsv")


def cmd_info(a: argparse.Namespace) -> None:
    path = _path(a.path)
    if _is_dataset_file(path) or path.suffix == ".csv":
        ds = _load_any_dataset(path)
        _emit({"command": "info", "type": "dataset", "path": str(path), **_dataset_summary(ds)})
        return
    idx = open_index(path)
    try:
        if isinstance(idx, ApproxIndex):
            body = idx.info()
        else:
            body = {"kind": idx.KIND, "method": idx.name, "m": idx.m, "N": idx.n_segments, "T": idx.T,
                    "pages": idx.n_pages}
    finally:
        idx.close()
    _emit({"command": "info", "type": "index", "path": str(path), **body})


# --------------------------------------------------------------------------
# parser


def _positive_int(s: str) -> int:
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {s}")
    return v


def _finite(s: str) -> float:
    v = float(s)
    if not math.isfinite(v):
        raise argparse.ArgumentTypeError(f"expected a finite number, got {s}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="aggtopk", description="Aggregate top-k queries over piecewise-linear time series.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--profile", choices=[x.value for x in Profile], default=Profile.RANDOM_WALK_POSITIVE.value)
    g.add_argument("--m", type=_positive_int, required=True, help="number of objects")
    g.add_argument("--n-avg", type=_finite, default=10.0, help="mean segments per object")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--T", type=_finite, default=1000.0, help="domain end")
    g.add_argument("--format", choices=["binary", "csv"], default="binary")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    i = sub.add_parser("ingest", help="convert CSV (object_id,t,v) or binary data to the binary dataset format")
    i.add_argument("--input", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--T", type=_finite, default=None, help="domain end (default: last timestamp)")
    i.set_defaults(func=cmd_ingest)

    b = sub.add_parser("build", help="build an index file")
    b.add_argument("--data", required=True)
    b.add_argument("--method", choices=ALL_METHODS, required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--epsilon", type=_finite, default=None, help="approximation parameter (default 0.01)")
    b.add_argument("--r-target", type=_positive_int, default=None, help="target breakpoint count instead of epsilon")
    b.add_argument("--k-max", type=_positive_int, default=200)
    b.add_argument("--block-size", type=_positive_int, default=DEFAULT_PAGE_SIZE)
    b.add_argument("--companion", default=None, help="EXACT2 file for appx2plus (default: <out>.ex2)")
    b.add_argument(
        "--allow-oversize", action="store_true", help="skip the QUERY1 space check (r^2 < N and r*k_max < N)"
    )
    b.set_defaults(func=cmd_build)

    q = sub.add_parser("query", help="run one top-k query")
    q.add_argument("--index", required=True)
    q.add_argument("--k", type=int, default=50)
    q.add_argument("--t1", type=_finite, required=True)
    q.add_argument("--t2", type=_finite, required=True)
    q.add_argument("--aggregate", choices=[x.value for x in Aggregate], default="sum")
    q.set_defaults(func=cmd_query)

    for name, fn, helptext in (("bench", cmd_bench, "measure per-query IO and time"),
                               ("eval", cmd_eval, "measure answer quality against brute force")):
        e = sub.add_parser(name, help=helptext)
        e.add_argument("--data", required=(name == "eval"), default=None)
        e.add_argument("--index", action="append", help="index file (repeatable)")
        e.add_argument("--methods", default="", help="comma-separated method tags to build in memory")
        e.add_argument("--r-targets", default="", help="comma-separated r targets for approximate methods")
        e.add_argument("--epsilon", type=_finite, default=None)
        e.add_argument("--k-max", type=_positive_int, default=200)
        e.add_argument("--block-size", type=_positive_int, default=DEFAULT_PAGE_SIZE)
        e.add_argument("--allow-oversize", action="store_true")
        e.add_argument("--queries", type=_positive_int, default=100)
        e.add_argument("--k", type=_positive_int, default=50)
        e.add_argument("--seed", type=int, default=0)
        e.add_argument("--out", default=None, help="write <out>.jsonl and <out>.tsv")
        if name == "bench":
            e.add_argument("--fracs", default="0.2", help="comma-separated interval lengths as fractions of T")
            e.add_argument("--aggregate", choices=[x.value for x in Aggregate], default="sum")
        else:
            e.add_argument("--frac", type=_finite, default=0.2, help="interval length as a fraction of T")
        e.set_defaults(func=fn)

    n = sub.add_parser("info", help="describe a dataset or index file")
    n.add_argument("path")
    n.set_defaults(func=cmd_info)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args.func(args)
    except BrokenPipeError:
        # downstream reader went away (e.g. piped into head)
        os.dup2(os.open(os.devnull, os.O_WRONLY), sys.stdout.fileno())
        return 1
    except UsageError as e:
        print(json.dumps({"error": "UsageError", "message": str(e)}), file=sys.stderr)
        return 2
    except (AggTopkError, OSError, ValueError) as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())


__all__ = ["main", "build_parser", "open_index"]
