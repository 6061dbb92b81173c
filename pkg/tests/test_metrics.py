import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from volnet.errors import EmptyInput, OneClassOnly
from volnet.metrics import (
    METRIC_ROWS, Confusion, RunMetrics, aggregate_runs, auc, confusion_at, emit_report, emit_roc, fpr_grid,
    read_roc_csv, roc_at, roc_curve, roc_envelope, threshold_metrics,
)


def pairwise_auc(scores, labels):
    """Independent oracle: average over all (pos, neg) pairs, ties worth one half."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return total / (len(pos) * len(neg))


def test_confusion_example():
    c = confusion_at([0.9, 0.7, 0.6, 0.4, 0.2], [1, 1, 0, 1, 0])
    assert c == Confusion(tp=2, fp=1, tn=1, fn=1)


def test_confusion_boundary_and_all_positive():
    assert confusion_at([0.5], [1]).tp == 1
    assert confusion_at([1.0] * 4, [1] * 4) == Confusion(4, 0, 0, 0)
    with pytest.raises(EmptyInput):
        confusion_at([], [])


def test_threshold_metrics_example():
    m = threshold_metrics(Confusion(tp=2, fp=1, tn=1, fn=1))
    assert m.sensitivity == pytest.approx(2 / 3)
    assert m.specificity == pytest.approx(1 / 2)
    assert m.ppv == pytest.approx(2 / 3)
    assert m.npv == pytest.approx(1 / 2)
    assert m.f1 == pytest.approx(2 / 3)
    assert m.auc is None


def test_threshold_metrics_undefined():
    m = threshold_metrics(Confusion(tp=0, fp=3, tn=2, fn=0))
    assert m.sensitivity is None and m.f1 is None
    assert m.ppv == 0.0


def test_f1_from_precision_and_recall():
    # precision 1/2 and recall 3/4
    m = threshold_metrics(Confusion(tp=3, fp=3, tn=0, fn=1))
    assert m.f1 == pytest.approx(0.6)


@pytest.mark.parametrize("scores,labels,expected", [
    ([0.9, 0.8, 0.3], [1, 1, 0], 1.0),
    ([0.4, 0.4, 0.4, 0.4], [1, 0, 1, 0], 0.5),
    ([0.8, 0.4, 0.6, 0.2], [1, 1, 0, 0], 0.75),
])
def test_auc_hand_cases(scores, labels, expected):
    assert auc(scores, labels) == expected
    assert roc_curve(scores, labels).area() == pytest.approx(expected, abs=1e-12)


def test_auc_one_class():
    with pytest.raises(OneClassOnly):
        auc([0.1, 0.2], [1, 1])
    with pytest.raises(OneClassOnly):
        roc_curve([0.1, 0.2], [0, 0])


def test_roc_shapes():
    perfect = roc_curve([0.9, 0.8, 0.3], [1, 1, 0])
    assert any(f == 0 and t == 1 for f, t in zip(perfect.fpr, perfect.tpr))
    tied = roc_curve([0.5] * 4, [1, 0, 1, 0])
    np.testing.assert_array_equal(tied.fpr, [0, 1])
    np.testing.assert_array_equal(tied.tpr, [0, 1])


def test_dual_oracle_random_with_ties():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(2, 51))
        labels = rng.integers(0, 2, size=n)
        labels[0], labels[1] = 0, 1
        scores = rng.integers(0, 8, size=n) / 8  # coarse grid forces ties
        oracle = pairwise_auc(scores, labels)
        assert abs(roc_curve(scores, labels).area() - oracle) <= 1e-12
        assert abs(auc(scores, labels) - oracle) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 20), st.booleans()), min_size=2, max_size=30))
def test_auc_invariances(pairs):
    # scores on a coarse grid so ties occur and transforms stay exact
    scores = np.array([p[0] / 20 for p in pairs])
    labels = np.array([int(p[1]) for p in pairs])
    if labels.min() == labels.max():
        return
    a = auc(scores, labels)
    assert 0.0 <= a <= 1.0
    # strictly increasing transform keeps the ranks
    assert auc(np.sqrt(scores) * 3 + 1, labels) == pytest.approx(a, abs=1e-12)
    # swapping the classes mirrors the AUC
    assert auc(scores, 1 - labels) == pytest.approx(1 - a, abs=1e-12)
    perm = np.random.default_rng(len(pairs)).permutation(len(pairs))
    assert auc(scores[perm], labels[perm]) == pytest.approx(a, abs=1e-12)


def test_roc_at_is_right_continuous_step():
    curve = roc_curve([0.9, 0.8, 0.7, 0.6], [1, 0, 1, 0])
    grid = np.array([0.0, 0.49, 0.5, 0.51, 1.0])
    np.testing.assert_array_equal(roc_at(curve, grid), [0.5, 0.5, 1.0, 1.0, 1.0])


def test_envelope_identical_and_single():
    c = roc_curve([0.9, 0.6, 0.7, 0.2, 0.4], [1, 1, 0, 0, 1])
    expected = roc_at(c, fpr_grid())
    for env in (roc_envelope([c, c, c]), roc_envelope([c])):
        assert env.fpr.size == 101
        for arr in (env.mean, env.min, env.max):
            np.testing.assert_array_equal(arr, expected)


def test_envelope_order_and_empty():
    rng = np.random.default_rng(3)
    curves = [roc_curve(rng.random(20), np.r_[np.zeros(10, int), np.ones(10, int)]) for _ in range(5)]
    env = roc_envelope(curves)
    assert (env.min <= env.mean + 1e-15).all() and (env.mean <= env.max + 1e-15).all()
    assert (np.diff(env.mean) >= -1e-15).all()
    with pytest.raises(EmptyInput):
        roc_envelope([])


def runs_with_auc(values, **other):
    return [RunMetrics(auc=v, **other) for v in values]


def test_aggregate_examples():
    agg = aggregate_runs(runs_with_auc([0.8, 0.8, 0.8]))
    assert agg["auc"].mean == pytest.approx(0.8) and agg["auc"].std == pytest.approx(0.0, abs=1e-15)
    agg = aggregate_runs(runs_with_auc([0.77, 0.81, 0.84]))
    assert agg["auc"].mean == pytest.approx(0.8067, abs=1e-4)
    assert agg["auc"].std == pytest.approx(np.std([0.77, 0.81, 0.84], ddof=1))


def test_aggregate_excludes_undefined():
    agg = aggregate_runs([RunMetrics(auc=0.7, sensitivity=None), RunMetrics(auc=0.9, sensitivity=0.5)])
    assert agg["sensitivity"].n == 1 and agg["sensitivity"].excluded == 1
    assert math.isnan(agg["sensitivity"].std)
    assert agg["sensitivity"].cell() == "0.50 (-)"
    assert agg["ppv"] is None
    with pytest.raises(EmptyInput):
        aggregate_runs([])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=20))
def test_aggregate_order_statistics(values):
    s = aggregate_runs(runs_with_auc(values))["auc"]
    assert s.min <= s.q25 <= s.median <= s.q75 <= s.max
    assert s.min - 1e-12 <= s.mean <= s.max + 1e-12


def test_cell_format():
    values = [0.79, 0.81, 0.83]  # mean 0.81, std 0.02
    assert aggregate_runs(runs_with_auc(values))["auc"].cell() == "0.81 (0.02)"


def test_report_text_all_half():
    half = dict(auc=0.5, sensitivity=0.5, specificity=0.5, ppv=0.5, npv=0.5, f1=0.5)
    text = emit_report({"scratch3d": aggregate_runs([RunMetrics(**half), RunMetrics(**half)])})
    lines = text.strip().splitlines()
    assert len(lines) == 7
    for line, (_, label) in zip(lines[1:], METRIC_ROWS):
        assert line.startswith(label) and line.endswith("0.50 (0.00)")


def test_report_csv_and_multiple_models():
    a = aggregate_runs(runs_with_auc([0.6, 0.7]))
    b = aggregate_runs(runs_with_auc([0.8, 0.9]))
    text = emit_report({"c3d-transfer": a, "scratch3d": b})
    header = text.splitlines()[0].split()
    assert header == ["c3d-transfer", "scratch3d"]
    csv_text = emit_report({"m": a}, "csv").splitlines()
    assert csv_text[0] == "model,metric,mean,std,min,max,median,q25,q75"
    assert [row.split(",")[1] for row in csv_text[1:]] == [label for _, label in METRIC_ROWS]
    with pytest.raises(ValueError):
        emit_report({"m": a}, "html")


def test_roc_csv_round_trip_and_svg(tmp_path):
    rng = np.random.default_rng(5)
    curves = [roc_curve(rng.random(30), np.r_[np.zeros(15, int), np.ones(15, int)]) for _ in range(3)]
    env = roc_envelope(curves)
    csv_path, svg_path = emit_roc(env, tmp_path / "roc_m", "m")
    back = read_roc_csv(csv_path)
    assert back.fpr.size == 101
    for name in ("fpr", "mean", "min", "max"):
        np.testing.assert_array_equal(getattr(back, name), getattr(env, name))
    svg = svg_path.read_text()
    for cls in ("diagonal", "envelope", "mean"):
        assert f'class="{cls}"' in svg
