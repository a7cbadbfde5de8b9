import numpy as np
import pytest

from aggtopk.approx import (
    DyadicTree,
    Query1Index,
    Query2Index,
    build_approx,
    build_query1,
    build_query2,
    decompose_dyadic,
    dyadic_bound,
    query1_topk,
    query2_alpha,
    query2_plus_topk,
    query2_topk,
)
from aggtopk.breakpoints import BreakpointSet, build_breakpoints
from aggtopk.errors import CapacityError, OutOfOrderError, ParameterError
from aggtopk.eval import SynthProfile, gen_synthetic, random_queries, verify_rankwise
from aggtopk.exact import Exact2Index
from aggtopk.model import QuerySpec, RankedAnswer, Segment, answers_match, brute_force_topk, ranked


@pytest.fixture
def d0_bps():
    return BreakpointSet(np.array([0.0, 5, 10]), 0.5, 50, 100, "BP2")


def _as_answer(ents):
    return RankedAnswer.from_arrays(ents["obj"], ents["score"])


def test_query1_lists(d0, d0_bps):
    idx = build_query1(d0, d0_bps, 3, enforce_capacity=False)
    assert idx.list_for(0, 1).tolist() == [(3, 15), (2, 12.5), (1, 10)]
    assert idx.list_for(0, 2).tolist() == [(2, 50), (3, 30), (1, 20)]
    assert idx.list_for(1, 2).tolist() == [(2, 37.5), (3, 15), (1, 10)]
    assert idx.n_lists == 3


def test_query1_queries(d0, d0_bps):
    idx = build_query1(d0, d0_bps, 3, enforce_capacity=False)
    assert query1_topk(idx, QuerySpec(2, 1, 6)).entries == ((2, 37.5), (3, 15))
    assert query1_topk(idx, QuerySpec(1, 0, 10)).entries == ((2, 50),)
    assert query1_topk(idx, QuerySpec(3, 1, 4)).entries == ((1, 0), (2, 0), (3, 0))
    with pytest.raises(ParameterError):
        idx.query(QuerySpec(4, 0, 10))


def test_query1_capacity(d0, d0_bps):
    with pytest.raises(CapacityError):
        build_query1(d0, d0_bps, 3)
    with pytest.raises(ParameterError):
        build_query1(d0, d0_bps, 0, enforce_capacity=False)


def test_query2_d0(d0, d0_bps):
    idx = build_query2(d0, d0_bps, 3)
    spans = [(int(a), int(b)) for a, b in zip(idx.tree.lo, idx.tree.hi)]
    assert sorted(spans) == [(0, 1), (0, 2), (1, 2)]
    assert query2_topk(idx, QuerySpec(2, 1, 6)).entries == ((2, 37.5), (3, 15))
    assert query2_topk(idx, QuerySpec(3, 0, 10)).entries == ((2, 50), (3, 30), (1, 20))
    big = build_query2(d0, d0_bps, 10)
    assert len(big.node_list(0)) == 3


def test_decompose_examples():
    assert [(n.lo, n.hi) for n in decompose_dyadic(8, 1, 7)] == [(1, 2), (2, 4), (4, 6), (6, 7)]
    assert [(n.lo, n.hi) for n in decompose_dyadic(8, 0, 8)] == [(0, 8)]
    assert [(n.lo, n.hi) for n in decompose_dyadic(8, 3, 4)] == [(3, 4)]
    assert decompose_dyadic(8, 4, 4) == []


@pytest.mark.parametrize("G", [1, 2, 3, 5, 7, 13, 16, 31])
def test_decompose_exhaustive(G):
    tree = DyadicTree(G)
    assert len(tree) == 2 * G - 1
    for lo in range(G + 1):
        for hi in range(lo + 1, G + 1):
            nodes = tree.decompose(lo, hi)
            assert nodes[0].lo == lo and nodes[-1].hi == hi
            assert all(a.hi == b.lo for a, b in zip(nodes, nodes[1:]))
            assert len(nodes) <= dyadic_bound(G)


@pytest.fixture(scope="module")
def synth():
    ds = gen_synthetic(SynthProfile("random_walk_positive", 30, 20, seed=4))
    return ds, build_breakpoints(ds, 0.005, "BP2")


def test_lists_match_oracle(synth):
    ds, bps = synth
    q1 = build_query1(ds, bps, 8, enforce_capacity=False)
    q2 = build_query2(ds, bps, 8)
    b = bps.breakpoints
    for j in range(bps.r - 1):
        for jp in range(j + 1, bps.r):
            want = brute_force_topk(ds, QuerySpec(8, b[j], b[jp]))
            assert answers_match(_as_answer(q1.list_for(j, jp)), want, ds.scores(b[j], b[jp]), atol=1e-9)
    for n in range(len(q2.tree)):
        lo, hi = b[q2.tree.lo[n]], b[q2.tree.hi[n]]
        want = brute_force_topk(ds, QuerySpec(8, lo, hi))
        assert answers_match(_as_answer(q2.node_list(n)), want, ds.scores(lo, hi), atol=1e-9)


def test_guarantees_and_plus_exactness(synth):
    ds, bps = synth
    q1 = build_query1(ds, bps, 8, enforce_capacity=False)
    ex2 = Exact2Index.build(ds)
    q2 = build_query2(ds, bps, 8, companion=ex2)
    alpha = query2_alpha(bps.r)
    for q in random_queries(ds.T, 300, 8, seed=2):
        sc = ds.scores(q.t1, q.t2)
        truth = ranked(sc, q.k)
        for ans, a in ((q1.query(q), 1), (q2.query(q), alpha), (query2_plus_topk(q2, ex2, q), alpha)):
            assert all(verify_rankwise(ans, truth, bps.epsilon, a, bps.mass, sc[np.array(ans.ids) - 1]))
        s1, s2 = q2.effective_interval(q.t1, q.t2)
        snapped = ds.scores(s1, s2)
        for oid, s in q2.query_plus(q):
            if s1 < s2:
                assert s == pytest.approx(snapped[oid - 1], rel=1e-9, abs=1e-12)
        lo, hi = q2.snapped(q.t1, q.t2)
        assert len(q2.candidates(lo, hi, q.k)) <= 2 * q.k * max(1, int(np.ceil(np.log2(bps.r))))


def test_aligned_query1_is_exact(synth):
    ds, bps = synth
    q1 = build_query1(ds, bps, 8, enforce_capacity=False)
    b = bps.breakpoints
    q = QuerySpec(5, float(b[1]), float(b[-2]))
    assert answers_match(q1.query(q), brute_force_topk(ds, q), ds.scores(q.t1, q.t2), atol=1e-9)


@pytest.mark.parametrize("method", ["appx1b", "appx2b", "appx1", "appx2", "appx2plus"])
def test_persistence(tmp_path, synth, method):
    ds, _ = synth
    path = tmp_path / method
    kw = {"companion_path": None}
    if method == "appx2plus":
        ex2_path = tmp_path / "c.ex2"
        Exact2Index.build(ds, ex2_path).close()
        kw = {"companion_path": ex2_path, "companion": Exact2Index.open(ex2_path)}
    idx = build_approx(ds, method, 0.01, k_max=10, path=path, enforce_capacity=False, **kw)
    q = QuerySpec(5, 100, 600)
    from aggtopk.approx import approx_answer

    want = approx_answer(idx, q)
    idx.close()
    cls = Query1Index if method in ("appx1b", "appx1") else Query2Index
    back = cls.open(path)
    assert back.method == method
    assert approx_answer(back, q) == want


def test_appends_tail_and_single_rebuild():
    ds = gen_synthetic(SynthProfile("random_walk_positive", 15, 20, seed=3))
    idx = build_approx(ds, "appx2", 0.02, k_max=10)
    rng = np.random.default_rng(0)
    ends = ds.ends.copy()
    last = ds.values[ds.offsets[1:] - 1].copy()
    mass = 0.0
    segs = []
    while True:
        i = int(rng.integers(ds.m))
        v = float(abs(last[i] + rng.normal(0, 2)))
        s = Segment(float(ends[i]), float(ends[i] + 20), float(last[i]), v, i + 1)
        add = 0.5 * 20 * (last[i] + v)
        if mass + add >= ds.M:
            break
        assert idx.append(s) is False
        mass += add
        segs.append(s)
        ends[i] += 20
        last[i] = v
    assert idx.n_rebuilds == 0 and len(idx.tail) == len(segs)
    ext = ds.with_appended(segs)
    for q in random_queries(ext.T, 100, 10, seed=1):
        sc = ext.scores(q.t1, q.t2)
        ans = idx.query(q)
        assert all(verify_rankwise(ans, ranked(sc, q.k), idx.epsilon, query2_alpha(idx.r), idx.bps.mass))
    assert idx.append(Segment(float(ends[0]), float(ends[0]) + 1000, float(last[0]), 1e3, 1)) is True
    assert idx.n_rebuilds == 1 and idx.tail == []
    with pytest.raises(OutOfOrderError):
        idx.append(Segment(0.0, 1.0, 0.0, 0.0, 2))


def test_query1_tail_keeps_upper_bound():
    ds = gen_synthetic(SynthProfile("random_walk_positive", 40, 20, seed=4))
    idx = build_approx(ds, "appx1", 0.01, k_max=10, enforce_capacity=False)
    rng = np.random.default_rng(1)
    ends = ds.ends.copy()
    last = ds.values[ds.offsets[1:] - 1].copy()
    segs = []
    for _ in range(200):
        i = int(rng.integers(ds.m))
        v = float(abs(last[i] + rng.normal(0, 2)))
        segs.append(Segment(float(ends[i]), float(ends[i] + 5), float(last[i]), v, i + 1))
        ends[i] += 5
        last[i] = v
    for s in segs:
        assert idx.append(s) is False
    ext = ds.with_appended(segs)
    for q in random_queries(ext.T, 200, 10, seed=2):
        truth = ranked(ext.scores(q.t1, q.t2), q.k)
        for (_, s), (_, sigma) in zip(idx.query(q), truth):
            assert s <= sigma + idx.bps.tau * (1 + 1e-9) + 1e-9
