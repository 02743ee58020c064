"""
ValidityTimeline set algebra: normalization, intersection laws, complement
and the CSV form written by the gate stage.
"""

import numpy as np
import pytest

from app.utils.timeline import ValidityTimeline


def _random_timeline(rng, n=12, horizon=10_000):
    starts = np.sort(rng.integers(0, horizon, n))
    return ValidityTimeline.from_bounds(starts, starts + rng.integers(0, 900, n))


def _membership(timeline, horizon=11_000):
    return timeline.contains(np.arange(horizon))


def test_normalization_merges_and_sorts():
    timeline = ValidityTimeline([(50, 60), (0, 10), (10, 20), (15, 30), (40, 40)])
    assert timeline.intervals.tolist() == [[0, 30], [50, 60]]
    assert timeline.duration_ns == 40


def test_half_open_membership():
    timeline = ValidityTimeline.span(10, 20)
    assert timeline.contains([9, 10, 19, 20]).tolist() == [False, True, True, False]


def test_empty_timeline_is_falsy():
    assert not ValidityTimeline()
    assert not ValidityTimeline([(5, 5)])
    assert ValidityTimeline().contains([0, 1]).tolist() == [False, False]


@pytest.mark.parametrize("seed", range(5))
def test_intersection_is_commutative_and_associative(seed):
    rng = np.random.default_rng(seed)
    a, b, c = (_random_timeline(rng) for _ in range(3))

    assert a.intersect(b) == b.intersect(a)
    assert a.intersect(b).intersect(c) == a.intersect(b.intersect(c))
    assert np.array_equal(_membership(a.intersect(b)), _membership(a) & _membership(b))


@pytest.mark.parametrize("seed", range(3))
def test_union_and_complement_agree_with_membership(seed):
    rng = np.random.default_rng(100 + seed)
    a, b = _random_timeline(rng), _random_timeline(rng)

    assert np.array_equal(_membership(a.union(b)), _membership(a) | _membership(b))
    gaps = a.complement(0, 11_000)
    assert np.array_equal(_membership(gaps), ~_membership(a))


def test_complement_clips_to_the_span():
    timeline = ValidityTimeline([(0, 10), (20, 30)])
    assert timeline.complement(5, 25) == ValidityTimeline([(10, 20)])
    assert timeline.complement(40, 50) == ValidityTimeline.span(40, 50)


def test_csv_form(tmp_path):
    timeline = ValidityTimeline([(0, 1_000_000_000), (2_100_000_000, 3_000_000_000)])
    timeline.to_csv(tmp_path / "timeline.csv")

    assert (tmp_path / "timeline.csv").read_text().splitlines()[0] == "start_ns,end_ns"
    assert ValidityTimeline.from_csv(tmp_path / "timeline.csv") == timeline
    ValidityTimeline().to_csv(tmp_path / "empty.csv")
    assert not ValidityTimeline.from_csv(tmp_path / "empty.csv")
