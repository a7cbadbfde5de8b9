import math

import numpy as np
import pytest

from aggtopk.errors import DomainError, ParameterError
from aggtopk.model import (
    Dataset,
    QuerySpec,
    RankedAnswer,
    Segment,
    answers_match,
    apply_aggregate,
    brute_force_topk,
    polyline_integral,
    segment_integral,
    segment_value,
    total_mass,
)


def test_segment_value():
    assert segment_value(Segment(0, 10, 2, 2), 7) == 2
    assert segment_value(Segment(0, 10, 0, 10), 4) == 4
    assert segment_value(Segment(0, 5, 6, 0), 3) == pytest.approx(2.4)


def test_segment_integral():
    s = Segment(0, 2, 0, 4)
    assert segment_integral(s, 0, 2) == 4
    assert segment_integral(s, 1, 2) == 3
    assert segment_integral(s, 3, 5) == 0


def test_polyline_integral(d0):
    o3 = d0.polyline(3)
    assert polyline_integral(o3, 0, 10) == pytest.approx(30)
    assert polyline_integral(o3, 2, 4) == pytest.approx(4.8)
    assert polyline_integral(o3, 4, 6) == pytest.approx(1.2)


def test_masses(d0):
    assert total_mass(d0) == 100
    neg = Dataset.from_vertices([[(0, -2), (10, -2)]])
    assert total_mass(neg, "absolute") == 20
    cross = Dataset.from_vertices([[(0, -1), (2, 1)]])
    assert total_mass(cross, "absolute") == pytest.approx(1)
    assert cross.absolute().M == pytest.approx(1)


def test_brute_force(d0):
    assert brute_force_topk(d0, QuerySpec(2, 0, 10)).entries == ((2, 50), (3, 30))
    assert brute_force_topk(d0, QuerySpec(3, 0, 5)).entries == ((3, 15), (2, 12.5), (1, 10))
    got = brute_force_topk(d0, QuerySpec(3, 2, 4))
    assert got.ids == [2, 3, 1]
    assert np.allclose(got.scores, [6, 4.8, 4])


def test_aggregate():
    assert apply_aggregate(30, QuerySpec(1, 0, 10)) == 30
    assert apply_aggregate(30, QuerySpec(1, 0, 10, "avg")) == 3
    with pytest.raises(DomainError):
        QuerySpec(1, 5, 5, "avg")


def test_tie_rule_ascending_id():
    ds = Dataset.from_vertices([[(0, 1), (1, 1)]] * 3)
    assert brute_force_topk(ds, QuerySpec(2, 0, 1)).ids == [1, 2]


def test_validation():
    with pytest.raises(DomainError):
        Segment(1, 1, 0, 0)
    with pytest.raises(DomainError):
        Dataset.from_vertices([[(0, 1), (0, 2)]])
    with pytest.raises(DomainError):
        QuerySpec(1, 3, 2)
    with pytest.raises(ParameterError):
        QuerySpec(0, 0, 1)
    with pytest.raises(DomainError):
        Segment(0, math.inf, 0, 0)


def test_with_appended(d0):
    ext = d0.with_appended([Segment(10, 12, 2, 4, 1)])
    assert ext.T == 12
    assert ext.scores(0, 12)[0] == pytest.approx(26)
    with pytest.raises(DomainError):
        d0.with_appended([Segment(10, 12, 3, 4, 1)])


def test_answers_match_tie_aware():
    a = RankedAnswer(((1, 5.0), (2, 5.0)))
    b = RankedAnswer(((2, 5.0), (1, 5.0)))
    assert not answers_match(a, b)
    assert answers_match(a, b, np.array([5.0, 5.0]))
