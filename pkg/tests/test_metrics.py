import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crossfuse.metrics import (MetricError, MetricsReport, confusion, evaluate_scores, pair_counting_auc, rates,
                               roc_auc, write_roc_csv)


def test_perfect_and_inverted():
    assert roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])[0] == 1.0
    assert roc_auc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1])[0] == 0.0


def test_all_tied_is_half():
    auc, curve = roc_auc([0.5] * 6, [0, 1, 0, 1, 1, 0])
    assert auc == 0.5 and curve.shape == (2, 3)


def test_curve_endpoints_monotone(rng):
    _, curve = roc_auc(rng.random(40), rng.integers(0, 2, 40) | np.r_[1, 0, [0] * 38])
    assert tuple(curve[0, :2]) == (0.0, 0.0) and tuple(curve[-1, :2]) == (1.0, 1.0)
    assert np.all(np.diff(curve[:, 0]) >= 0) and np.all(np.diff(curve[:, 1]) >= 0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 1)), min_size=2, max_size=40))
def test_auc_equals_pair_count_with_ties(pairs):
    scores = [s / 5 for s, _ in pairs]
    labels = [y for _, y in pairs]
    if len(set(labels)) < 2:
        with pytest.raises(MetricError):
            roc_auc(scores, labels)
        return
    assert abs(roc_auc(scores, labels)[0] - pair_counting_auc(scores, labels)) <= 1e-9


def test_confusion_and_rates():
    cm = confusion([1, 1, 0, 0, 1], [1, 0, 0, 1, 1])
    assert cm == {"tp": 2, "fp": 1, "tn": 1, "fn": 1}
    acc, rec, prec, f1 = rates(cm)
    assert (acc, rec, prec) == (0.6, 2 / 3, 2 / 3) and f1 == pytest.approx(2 / 3)


def test_undefined_precision_reported_as_zero():
    fm = evaluate_scores([0.1, 0.2, 0.3], [0, 1, 0])
    assert fm.precision == 0.0 and fm.f1 == 0.0 and fm.recall == 0.0


def test_single_class_split_has_nan_auc():
    fm = evaluate_scores([0.1, 0.9], [1, 1])
    assert np.isnan(fm.auc) and fm.roc is None and fm.accuracy == 0.5
    with pytest.raises(MetricError):
        evaluate_scores([], [])


def test_report_mean_std_and_pooled():
    rep = MetricsReport()
    rep.add(evaluate_scores([0.1, 0.9], [0, 1]), [0.1, 0.9], [0, 1])
    rep.add(evaluate_scores([0.9, 0.1], [0, 1]), [0.9, 0.1], [0, 1])
    assert rep.mean()["auc"] == 0.5 and rep.std()["auc"] == 0.5
    assert rep.pooled().auc == 0.5


def test_roc_csv(tmp_path):
    _, curve = roc_auc([0.2, 0.7, 0.7], [0, 1, 0])
    path = tmp_path / "roc.csv"
    write_roc_csv(curve, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "fpr,tpr,threshold" and lines[1] == "0,0,inf" and lines[-1] == "1,1,0.2"
