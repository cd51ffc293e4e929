import bisect
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from sklearn.metrics import f1_score

from careflow.metrics import (bin_labels, centroid_gap, cycle_error, energy_distance, gap_report, pearson,
                              task_metrics, weighted_f1)
from careflow.numkit import ShapeError, make_rng


def brute_energy(a, b):
    def mean_dist(p, q):
        total = 0.0
        for x in p:
            for y in q:
                total += math.sqrt(sum((xi - yi) ** 2 for xi, yi in zip(x, y)))
        return total / (len(p) * len(q))
    return 2 * mean_dist(a, b) - mean_dist(a, a) - mean_dist(b, b)


def test_energy_distance_matches_double_loop():
    rng = make_rng(0)
    a, b = rng.standard_normal((50, 3)), rng.standard_normal((50, 3)) + 0.5
    assert abs(energy_distance(a, b) - brute_energy(a.tolist(), b.tolist())) < 1e-12


def test_energy_distance_special_cases():
    a = make_rng(1).standard_normal((10, 2))
    assert energy_distance(a, a) == 0.0
    assert energy_distance(a, a[::-1]) == 0.0
    p, q = np.zeros((4, 2)), np.tile([3.0, 4.0], (4, 1))
    assert energy_distance(p, q) == pytest.approx(10.0)
    with pytest.raises(ValueError):
        energy_distance(a[:1], a)
    with pytest.raises(ShapeError):
        energy_distance(a, np.zeros((3, 3)))


finite = st.floats(-100, 100, allow_nan=False)


@settings(max_examples=50)
@given(a=arrays(np.float64, st.tuples(st.integers(2, 8), st.just(3)), elements=finite),
       b=arrays(np.float64, st.tuples(st.integers(2, 8), st.just(3)), elements=finite))
def test_energy_distance_symmetric_and_nonnegative(a, b):
    assert energy_distance(a, b) == energy_distance(b, a)
    assert energy_distance(a, b) >= 0.0
    assert energy_distance(a, a) == 0.0


def test_centroid_gap():
    a = make_rng(2).standard_normal((20, 3))
    c = np.array([1.0, -2.0, 2.0])
    assert centroid_gap(a, a) == 0.0
    assert centroid_gap(a, a + c) == pytest.approx(3.0, abs=1e-12)
    manual = math.sqrt(sum((np.mean(a[:, j]) - np.mean(a[:, j] + c[j])) ** 2 for j in range(3)))
    assert abs(centroid_gap(a, a + c) - manual) < 1e-12
    with pytest.raises(ValueError):
        centroid_gap(np.zeros((0, 3)), a)
    r = gap_report(a, a)
    assert r.energy_distance == 0 and r.centroid_gap == 0 and (r.n_a, r.n_b) == (20, 20)


def test_cycle_error_cases():
    x = make_rng(3).standard_normal((5, 4))
    assert cycle_error(x, x) == 0.0
    assert cycle_error(x, x + 1.0) == pytest.approx(1.0)
    with pytest.raises(ShapeError):
        cycle_error(x, x[:, :3])


def brute_bin(v, lo, hi, k):
    edges = [lo + (hi - lo) * i / k for i in range(1, k)]
    return bisect.bisect_right(edges, v)


def test_binning_matches_brute_force():
    rng = make_rng(4)
    p, y = rng.uniform(-3.5, 3.5, 1000), rng.uniform(-3.5, 3.5, 1000)
    fast = bin_labels(np.concatenate([p, y]), -3.0, 3.0, 7)
    slow = [brute_bin(v, -3.0, 3.0, 7) for v in np.concatenate([p, y])]
    assert fast.tolist() == slow
    acc7 = task_metrics(p, y, "regression", (-3.0, 3.0), 7)["Acc7"]
    hits = sum(brute_bin(a, -3, 3, 7) == brute_bin(b, -3, 3, 7) for a, b in zip(p, y))
    assert round(acc7 * 1000 / 100) == hits


def test_regression_perfect_and_negated():
    y = np.linspace(-2, 2, 21)
    m = task_metrics(y, y, "regression")
    assert m["Acc7"] == 100.0 and m["MAE"] == 0.0 and m["Corr"] == pytest.approx(1.0)
    assert task_metrics(-y, y, "regression")["Corr"] == pytest.approx(-1.0)


def test_constant_predictor_flags_correlation():
    m = task_metrics(np.zeros(5), np.arange(5.0), "regression")
    assert m["Corr"] == 0.0 and "corr_zero_variance" in m["flags"]
    assert pearson([1, 1, 1], [1, 2, 3]) == (0.0, True)


def test_classification_metrics():
    y = np.array([0, 1, 2, 3, 0, 1])
    scores = np.eye(4)[y]
    m = task_metrics(scores, y, "classification")
    assert m["Acc"] == 100.0 and m["Acc4"] == 100.0 and m["F1"] == 100.0


def test_weighted_f1_matches_sklearn():
    rng = make_rng(5)
    for _ in range(20):
        y, p = rng.integers(0, 4, 60), rng.integers(0, 4, 60)
        assert weighted_f1(y, p) == pytest.approx(f1_score(y, p, average="weighted"), abs=1e-12)


@given(seed=st.integers(0, 10**6))
def test_metrics_permutation_invariant(seed):
    rng = make_rng(seed)
    p, y = rng.uniform(-3, 3, 30), rng.uniform(-3, 3, 30)
    perm = rng.permutation(30)
    a, b = task_metrics(p, y, "regression"), task_metrics(p[perm], y[perm], "regression")
    for k in ("Acc7", "Acc2", "F1", "MAE"):
        assert a[k] == pytest.approx(b[k], abs=1e-12)
    assert a["Corr"] == pytest.approx(b["Corr"], abs=1e-12)


def test_empty_metrics():
    with pytest.raises(ValueError):
        task_metrics(np.zeros(0), np.zeros(0), "regression")
