import numpy as np
import pytest

from aggtopk.errors import DiscontinuityError, DomainError, FormatError, OutOfOrderError
from aggtopk.exact import Exact1Index, Exact2Index, Exact3Index
from aggtopk.model import Dataset, QuerySpec, RankedAnswer, Segment, answers_match, brute_force_topk, polyline_integral

from helpers import random_dataset

ENGINES = [Exact1Index, Exact2Index, Exact3Index]


@pytest.mark.parametrize("cls", ENGINES)
def test_d0_examples(cls, d0):
    ix = cls.build(d0)
    got = ix.query(QuerySpec(3, 2, 4))
    assert got.ids == [2, 3, 1]
    assert np.allclose(got.scores, [6, 4.8, 4])
    assert ix.query(QuerySpec(2, 0, 10)).entries == ((2, 50), (3, 30))
    assert ix.query(QuerySpec(1, 0, 10)).entries == ((2, 50),)
    assert ix.query(QuerySpec(1, 0, 10, "avg")).entries == ((2, 5.0),)
    assert ix.n_segments == 4


@pytest.mark.parametrize("cls", ENGINES)
def test_empty(cls):
    ix = cls.build(Dataset.empty(10))
    assert ix.query(QuerySpec(3, 0, 5)) == RankedAnswer()


@pytest.mark.parametrize("cls", ENGINES)
def test_domain_errors(cls, d0):
    ix = cls.build(d0)
    with pytest.raises(DomainError):
        ix.query(QuerySpec(1, 0, 11))


def test_exact2_prefix_entries(d0):
    ix = Exact2Index.build(d0)
    o3 = ix.prefix_entries(3)
    assert list(o3["key"]) == [5, 10]
    assert list(o3["prefix"]) == [15, 30]
    o1 = ix.prefix_entries(1)
    assert list(o1["key"]) == [10] and list(o1["prefix"]) == [20]
    assert ix.score_objects(np.array([3]), 2, 4)[0] == pytest.approx(4.8)


def test_exact2_prefixes_match_integrals():
    ds = random_dataset(np.random.default_rng(5), 100, 10)
    ix = Exact2Index.build(ds)
    for i in range(1, ds.m + 1):
        p = ds.polyline(i)
        assert ix.prefix_entries(i)["prefix"][-1] == pytest.approx(polyline_integral(p, 0, ds.T))


def test_exact3_stab(d0):
    ix = Exact3Index.build(d0)
    assert len(ix.stab(3)) == 3
    assert sorted(ix.stab(7)["obj"].tolist()) == [1, 2, 3]


@pytest.mark.parametrize("mixed", [False, True])
def test_random_vs_oracle(mixed):
    rng = np.random.default_rng(6)
    ds = random_dataset(rng, 100, 100, mixed=mixed)
    ixs = [c.build(ds) for c in ENGINES]
    for _ in range(200):
        t1, t2 = np.sort(rng.uniform(0, ds.T, 2))
        q = QuerySpec(int(rng.integers(1, ds.m + 1)), t1, t2)
        want = brute_force_topk(ds, q)
        true = ds.scores(t1, t2)
        for ix in ixs:
            assert answers_match(ix.query(q), want, true)


@pytest.mark.parametrize("cls", ENGINES)
def test_append(cls, d0):
    ix = cls.build(d0)
    ix.append(Segment(10, 12, 2, 4, 1))
    assert dict(ix.query(QuerySpec(3, 0, 12)).entries)[1] == pytest.approx(26)
    with pytest.raises(OutOfOrderError):
        ix.append(Segment(5, 6, 2, 2, 2))
    with pytest.raises(DiscontinuityError):
        ix.append(Segment(10, 11, 3, 3, 2))


@pytest.mark.parametrize("cls", ENGINES)
def test_appends_equal_rebuild(cls):
    rng = np.random.default_rng(7)
    ds = random_dataset(rng, 20, 10)
    ix = cls.build(ds)
    ends = ds.ends.copy()
    last = ds.values[ds.offsets[1:] - 1].copy()
    segs = []
    for _ in range(300):
        i = int(rng.integers(ds.m))
        dt = float(rng.uniform(0.5, 5))
        v = float(abs(last[i] + rng.normal(0, 3)))
        s = Segment(float(ends[i]), float(ends[i] + dt), float(last[i]), v, i + 1)
        ix.append(s)
        segs.append(s)
        ends[i] += dt
        last[i] = v
    ext = ds.with_appended(segs)
    fresh = cls.build(ext)
    for _ in range(100):
        t1, t2 = np.sort(rng.uniform(0, ext.T, 2))
        q = QuerySpec(int(rng.integers(1, ds.m + 1)), t1, t2)
        assert answers_match(ix.query(q), fresh.query(q), ext.scores(t1, t2))


@pytest.mark.parametrize("cls", ENGINES)
def test_persistence(cls, tmp_path, d0):
    path = tmp_path / "ix"
    ix = cls.build(d0, path)
    ix.close()
    back = cls.open(path)
    assert back.query(QuerySpec(2, 0, 10)).entries == ((2, 50), (3, 30))
    other = [c for c in ENGINES if c is not cls][0]
    with pytest.raises(FormatError):
        other.open(path)
