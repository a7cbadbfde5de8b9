import math

import numpy as np
import pytest

from aggtopk.breakpoints import (
    BreakpointSet,
    build_breakpoints,
    build_breakpoints1,
    build_breakpoints2,
    build_for_target,
    solve_crossing,
)
from aggtopk.errors import DomainError, ParameterError
from aggtopk.eval import SynthProfile, gen_synthetic
from aggtopk.model import Dataset
from helpers import random_dataset


def test_solve_crossing():
    t = solve_crossing(8, -0.2, 0, 10, 0)
    assert t == pytest.approx(1.270167, abs=1e-6)
    assert 8 * t - 0.1 * t * t == pytest.approx(10)
    assert solve_crossing(5, 0, 2, 10, 0) == pytest.approx(1.6)
    assert solve_crossing(1, 0, 0, 10, 0, 1) is None


def test_bp1_examples(d0):
    two = Dataset.from_vertices([[(0, 1), (10, 1)], [(0, 1), (10, 1)]])
    assert np.allclose(build_breakpoints1(two, 0.25).breakpoints, [0, 2.5, 5, 7.5, 10])
    assert build_breakpoints1(d0, 0.1).breakpoints[1] == pytest.approx(1.270167, abs=1e-6)
    assert list(build_breakpoints1(d0, 1).breakpoints) == [0, 10]


@pytest.mark.parametrize("variant", ["baseline", "efficient"])
def test_bp2_examples(d0, variant):
    two = Dataset.from_vertices([[(0, 1), (10, 1)], [(0, 1), (10, 1)]])
    assert np.allclose(build_breakpoints2(two, 0.25, variant).breakpoints, [0, 5, 10])
    b = build_breakpoints2(d0, 0.1, variant).breakpoints
    assert b[1] == pytest.approx(2.113249, abs=1e-6)
    assert np.allclose(b, [0, 2.11324865, 4.94629355, 6.66826963, 8.02906096, 9.19052881, 10])
    assert list(build_breakpoints2(d0, 1, variant).breakpoints) == [0, 10]


def test_snap():
    bs = BreakpointSet(np.array([0, 2.5, 5, 7.5, 10.0]), 0.25, 5, 20, "BP1")
    assert bs.snap(3.1) == 5
    assert bs.snap(2.5) == 2.5
    assert bs.snap(0) == 0
    with pytest.raises(DomainError):
        bs.snap(11)
    assert BreakpointSet.from_meta(bs.to_meta()).to_meta() == bs.to_meta()


def test_epsilon_range(d0):
    for eps in (0, -1, 1.5):
        with pytest.raises(ParameterError):
            build_breakpoints(d0, eps)


def test_zero_mass_rejected():
    with pytest.raises(DomainError):
        build_breakpoints(Dataset.from_vertices([[(0, 0), (1, 0)]]), 0.1)


@pytest.mark.parametrize("eps", [0.5, 0.25, 0.1, 0.01])
def test_bp1_count(eps):
    ds = random_dataset(np.random.default_rng(8), 30, 20)
    assert build_breakpoints1(ds, eps).r == math.ceil(1 / eps) + 1


@pytest.mark.parametrize("mixed", [False, True])
def test_bp2_matches_baseline_and_gap_property(mixed):
    ds = random_dataset(np.random.default_rng(9), 40, 30, mixed=mixed)
    mds = ds.absolute()
    for eps in (0.05, 0.01, 1e-3):
        a = build_breakpoints2(ds, eps, "baseline")
        b = build_breakpoints2(ds, eps, "efficient")
        b1 = build_breakpoints1(ds, eps)
        assert a.r == b.r <= b1.r
        assert np.max(np.abs(a.breakpoints - b.breakpoints)) <= 1e-9 * ds.T
        bp = b.breakpoints
        worst = max(mds.scores(bp[j], bp[j + 1]).max() for j in range(b.r - 1))
        assert worst <= b.tau * (1 + 1e-9)


def test_disjoint_support_equality():
    m = 20
    ds = gen_synthetic(SynthProfile("disjoint_support", m, 5, seed=1))
    for q in (1, 2, 5):
        eps = 1 / (q * m)
        assert build_breakpoints2(ds, eps).r == build_breakpoints1(ds, eps).r


def test_build_for_target():
    ds = random_dataset(np.random.default_rng(10), 50, 20)
    b = build_for_target(ds, 40, "BP2")
    assert b.r <= 40
    assert b.r >= 35
    assert build_for_target(ds, 11, "BP1").r == 11
