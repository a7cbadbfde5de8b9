"""Dataset files: CSV ingest and the canonical little-endian binary format.

Binary layout::

    magic 'TRNK' | version u2 | kind 'DSET' | m u8 | N u8 | T f8
    offsets i8[m+1] | times f8[V] | values f8[V]

where ``V = N + m`` is the vertex count.
"""

from __future__ import annotations

import csv
import os
import struct
from pathlib import Path

import numpy as np

from .errors import DomainError, FormatError
from .model import Dataset

MAGIC = b"TRNK"
VERSION = 1
_HEADER = struct.Struct("<4sH4sQQd")


def save_dataset(ds: Dataset, path: str | os.PathLike) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, b"DSET", ds.m, ds.N, ds.T))
        fh.write(ds.offsets.astype("<i8").tobytes())
        fh.write(ds.times.astype("<f8").tobytes())
        fh.write(ds.values.astype("<f8").tobytes())
    os.replace(tmp, path)


def load_dataset(path: str | os.PathLike) -> Dataset:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) < _HEADER.size:
            raise FormatError(f"{path}: truncated header")
        magic, version, kind, m, n, T = _HEADER.unpack(head)
        if magic != MAGIC or kind != b"DSET":
            raise FormatError(f"{path}: not a dataset file")
        if version != VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        nv = n + m
        body = fh.read()
    need = 8 * (m + 1) + 16 * nv
    if len(body) != need:
        raise FormatError(f"{path}: expected {need} payload bytes, found {len(body)}")
    offsets = np.frombuffer(body, "<i8", m + 1, 0)
    times = np.frombuffer(body, "<f8", nv, 8 * (m + 1))
    values = np.frombuffer(body, "<f8", nv, 8 * (m + 1) + 8 * nv)
    return Dataset(offsets.copy(), times.copy(), values.copy(), T)


def read_csv(path: str | os.PathLike, T: float | None = None) -> tuple[Dataset, np.ndarray]:
    """Parse ``object_id,t,value`` rows into a dataset.

    Objects may interleave, but each object's rows must be in ascending ``t``.
    External ids are mapped to dense ids ``1..m`` in ascending order of the
    external id; the mapping is returned as an array where entry ``i-1`` is the
    external id of dense object ``i``.
    """
    ids: list[str] = []
    ts: list[float] = []
    vs: list[float] = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if row[0].lstrip().startswith("#"):
                continue
            if len(row) != 3:
                raise FormatError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            try:
                t = float(row[1])
                v = float(row[2])
            except ValueError:
                if lineno == 1:
                    continue  # header row
                raise FormatError(f"{path}:{lineno}: non-numeric t or value") from None
            ids.append(row[0].strip())
            ts.append(t)
            vs.append(v)
    return _group(ids, np.asarray(ts, dtype=float), np.asarray(vs, dtype=float), T)


def _group(raw_ids: list[str], ts: np.ndarray, vs: np.ndarray, T: float | None) -> tuple[Dataset, np.ndarray]:
    if not raw_ids:
        return Dataset.empty(T or 0.0), np.zeros(0, dtype=object)
    try:
        keys = np.asarray([int(x) for x in raw_ids], dtype=np.int64)
    except ValueError:
        keys = np.asarray(raw_ids, dtype=object)
    uniq, inv = np.unique(keys, return_inverse=True)
    order = np.argsort(inv, kind="stable")
    counts = np.bincount(inv, minlength=len(uniq))
    offsets = np.concatenate(([0], np.cumsum(counts)))
    times = ts[order]
    values = vs[order]
    for i in np.flatnonzero(counts < 2):
        raise DomainError(f"object {uniq[i]}: need at least 2 vertices")
    step = np.diff(times)
    inner = np.ones(len(step), dtype=bool)
    inner[offsets[1:-1] - 1] = False
    bad = np.flatnonzero(inner & (step <= 0))
    if len(bad):
        obj = uniq[np.searchsorted(offsets, bad[0], side="right") - 1]
        raise DomainError(f"object {obj}: timestamps must be strictly increasing")
    if T is None:
        T = float(times.max())
    return Dataset(offsets, times, values, T), uniq


def write_csv(ds: Dataset, path: str | os.PathLike, ids: np.ndarray | None = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["object_id", "t", "value"])
        for i in range(1, ds.m + 1):
            a, b = ds.offsets[i - 1], ds.offsets[i]
            ext = ids[i - 1] if ids is not None else i
            for t, v in zip(ds.times[a:b], ds.values[a:b]):
                w.writerow([ext, repr(float(t)), repr(float(v))])


def ids_are_dense(ids: np.ndarray) -> bool:
    return len(ids) == 0 or (ids.dtype != object and np.array_equal(ids, np.arange(1, len(ids) + 1)))
