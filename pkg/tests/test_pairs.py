from __future__ import annotations

import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rffkit.errors import DataError, SpecError
from rffkit.pairs import PairDataset, build_pair_dataset, matched_ratio, pair_label, plan_counts


def _plan_oracle(V, alpha, gamma):
    """Independent reimplementation of the documented rounding rule."""
    a = Fraction(alpha)
    cells = [(i, j) for i in range(V) for j in range(i, V)]
    target = {c: (a * gamma / V if c[0] == c[1] else 2 * (1 - a) * gamma / (V * (V - 1))) for c in cells}
    floor = {c: math.floor(t) for c, t in target.items()}
    rem = gamma - sum(floor.values())
    ranked = sorted(cells, key=lambda c: (-(target[c] - floor[c]), c[0], c[1]))
    for c in ranked[:rem]:
        floor[c] += 1
    return floor


def test_pair_label():
    assert pair_label(3, 3) == 1 and pair_label(1, 2) == 0
    for a in range(1, 11):
        for b in range(1, 11):
            assert pair_label(a, b) == pair_label(b, a)


def test_matched_ratio():
    assert matched_ratio(3) == 1.0 and matched_ratio(9) == 0.25
    for V in range(2, 21):
        assert matched_ratio(V) == pytest.approx(V / (V * (V - 1) / 2), abs=1e-15)
    with pytest.raises(SpecError):
        matched_ratio(1)


def test_plan_v4():
    p = plan_counts(4, 0.5, 96)
    assert np.all(np.diag(p.counts) == 12)
    off = [p.counts[i, j] for i in range(4) for j in range(i + 1, 4)]
    assert off == [8] * 6
    assert p.matched == 48 and p.unmatched == 48


def test_plan_alpha_one():
    p = plan_counts(5, 1.0, 50)
    assert p.matched == 50 and p.unmatched == 0


def test_plan_v3_remainder():
    p = plan_counts(3, 0.5, 10)
    want = _plan_oracle(3, 0.5, 10)
    assert {(i, j): int(p.counts[i, j]) for i, j in want} == want
    assert p.counts.sum() == 10


@settings(max_examples=80, deadline=None)
@given(V=st.integers(2, 12), alpha=st.floats(0.01, 1.0), gamma=st.integers(1, 5000))
def test_plan_matches_oracle(V, alpha, gamma):
    p = plan_counts(V, alpha, gamma)
    want = _plan_oracle(V, alpha, gamma)
    assert {(i, j): int(p.counts[i, j]) for i, j in want} == want
    assert int(p.counts.sum()) == gamma


def test_natural_ratio_alpha():
    for V in range(2, 13):
        nr = 2 / (V - 1)
        alpha = nr / (1 + nr)
        p = plan_counts(V, alpha, V * (V - 1) * 1000)
        assert p.matched / p.unmatched == pytest.approx(nr, rel=1e-3)


def test_plan_validation():
    with pytest.raises(SpecError):
        plan_counts(4, 0.0, 10)
    with pytest.raises(SpecError):
        plan_counts(4, 0.5, 0)
    with pytest.raises(SpecError):
        plan_counts(1, 0.5, 10)


def test_build_v4_audit():
    labels = np.repeat([1, 2, 3, 4], 100)
    pairs = build_pair_dataset(labels, 0.5, 96, seed=0)
    assert len(pairs) == 96 and pairs.y.sum() == 48
    assert np.all(pairs.i1 != pairs.i2)
    assert all(y == pair_label(labels[a], labels[b]) for a, b, y in pairs.entries)


@settings(max_examples=30, deadline=None)
@given(V=st.integers(2, 6), n=st.integers(2, 15), alpha=st.floats(0.05, 1.0), gamma=st.integers(1, 400),
       seed=st.integers(0, 10**6))
def test_build_properties(V, n, alpha, gamma, seed):
    labels = np.repeat(np.arange(1, V + 1), n)
    pairs = build_pair_dataset(labels, alpha, gamma, seed)
    plan = plan_counts(V, alpha, gamma)
    assert len(pairs) == gamma
    assert int(pairs.y.sum()) == plan.matched
    assert np.all(pairs.i1 != pairs.i2)
    assert np.array_equal(pairs.y, (labels[pairs.i1] == labels[pairs.i2]).astype(int))
    # per-cell audit against the plan
    a = np.minimum(labels[pairs.i1], labels[pairs.i2]) - 1
    b = np.maximum(labels[pairs.i1], labels[pairs.i2]) - 1
    counts = np.zeros((V, V), dtype=int)
    np.add.at(counts, (a, b), 1)
    assert np.array_equal(counts, plan.counts)


def test_build_deterministic_and_errors(tmp_path):
    labels = np.repeat([1, 2, 3], 10)
    a = build_pair_dataset(labels, 0.5, 60, seed=3)
    b = build_pair_dataset(labels, 0.5, 60, seed=3)
    assert np.array_equal(a.entries, b.entries)
    with pytest.raises(SpecError):
        build_pair_dataset(np.array([1, 2, 2]), 0.5, 10, seed=0)
    with pytest.raises(SpecError):
        build_pair_dataset(np.array([1, 1, 1]), 0.5, 10, seed=0)
    p = tmp_path / "p.json"
    a.save(p)
    back = PairDataset.load(p)
    assert np.array_equal(back.entries, a.entries) and back.alpha == 0.5 and back.gamma == 60
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(DataError):
        PairDataset.load(tmp_path / "bad.json")
