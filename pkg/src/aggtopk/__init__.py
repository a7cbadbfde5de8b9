"""Aggregate top-k queries over piecewise-linear time series."""

from .approx import (
    CandidateSet,
    DyadicTree,
    Query1Index,
    Query2Index,
    approx_answer,
    build_approx,
    build_query1,
    build_query2,
    decompose_dyadic,
    query1_topk,
    query2_plus_topk,
    query2_topk,
)
from .breakpoints import (
    BreakpointSet,
    build_breakpoints,
    build_breakpoints1,
    build_breakpoints2,
    build_for_target,
)
from .datafile import load_dataset, read_csv, save_dataset, write_csv
from .errors import (
    AggTopkError,
    BuildError,
    CapacityError,
    DiscontinuityError,
    DomainError,
    FormatError,
    OutOfOrderError,
    ParameterError,
)
from .exact import Exact1Index, Exact2Index, Exact3Index
from .model import (
    Aggregate,
    Dataset,
    MassMode,
    Polyline,
    QuerySpec,
    RankedAnswer,
    Segment,
    TimeInterval,
    brute_force_topk,
)
from .storage.blockstore import BlockStore, IoStats

__version__ = "0.1.0"

__all__ = [
    "AggTopkError",
    "Aggregate",
    "BlockStore",
    "BreakpointSet",
    "BuildError",
    "CandidateSet",
    "CapacityError",
    "Dataset",
    "DiscontinuityError",
    "DomainError",
    "DyadicTree",
    "Exact1Index",
    "Exact2Index",
    "Exact3Index",
    "FormatError",
    "IoStats",
    "MassMode",
    "OutOfOrderError",
    "ParameterError",
    "Polyline",
    "Query1Index",
    "Query2Index",
    "QuerySpec",
    "RankedAnswer",
    "Segment",
    "TimeInterval",
    "approx_answer",
    "brute_force_topk",
    "build_approx",
    "build_breakpoints",
    "build_breakpoints1",
    "build_breakpoints2",
    "build_for_target",
    "build_query1",
    "build_query2",
    "decompose_dyadic",
    "load_dataset",
    "query1_topk",
    "query2_plus_topk",
    "query2_topk",
    "read_csv",
    "save_dataset",
    "write_csv",
]
