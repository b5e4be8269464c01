from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from circformer import metrics as M
from circformer.inference import PredictionTrack


def brute_prf(p, truth, thr):
    pred = [i for i in range(len(p)) if p[i] > thr]
    tp = len([i for i in pred if i in truth])
    prec = tp / len(pred) if pred else 0.0
    rec = tp / len(truth)
    f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    return prec, rec, f1


def brute_average_precision(scores, labels):
    # sum over distinct thresholds of (recall gain) x (precision at that threshold)
    total, prev_recall = 0.0, 0.0
    for t in sorted(set(scores), reverse=True):
        sel = [i for i in range(len(scores)) if scores[i] >= t]
        tp = sum(labels[i] for i in sel)
        recall = tp / sum(labels)
        total += (recall - prev_recall) * tp / len(sel)
        prev_recall = recall
    return total


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=1, max_size=20), st.data())
def test_position_prf_oracle(vals, data):
    p = np.array(vals) / 4
    truth = set(data.draw(st.lists(st.integers(0, len(vals) - 1), min_size=1, unique=True)))
    assert M.position_prf(p, truth) == pytest.approx(brute_prf(p, truth, 0.5), abs=0)


def test_position_prf_threshold_is_strict():
    assert M.position_prf([0.5, 0.51], [0]) == (0.0, 0.0, 0.0)


def test_prf_needs_positives():
    with pytest.raises(M.MetricError):
        M.position_prf([0.9], [])


def test_top_k_accuracy_examples():
    p = np.array([0.1, 0.9, 0.2, 0.8, 0.1, 0.7])
    assert M.top_k_accuracy(p, [1, 3]) == 1.0
    assert M.top_k_accuracy(p, [1, 5]) == 0.5
    assert M.top_k_accuracy(PredictionTrack("c", p, np.ones(6)), [5]) == 0.0
    with pytest.raises(M.MetricError):
        M.top_k_accuracy(p, [])


def test_balanced_accuracy_and_counts():
    c = M.confusion_counts([0.9, 0.2, 0.7, 0.4], [1, 0, 0, 1])
    assert c == M.MetricCounts(tp=1, fp=1, tn=1, fn=1)
    assert M.balanced_accuracy(M.MetricCounts(tp=3, fn=1, tn=8, fp=2)) == pytest.approx(0.5 * (0.75 + 0.8))
    with pytest.raises(M.MetricError):
        M.balanced_accuracy(M.MetricCounts(tp=1))
    with pytest.raises(M.MetricError):
        M.MetricCounts(tp=-1)


def test_confusion_counts_from_logits():
    assert M.confusion_counts([3.0, -3.0], [1, 1], logits=True) == M.MetricCounts(tp=1, fn=1)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 5), min_size=2, max_size=15), st.data())
def test_area_under_pr_oracle(vals, data):
    labels = data.draw(st.lists(st.integers(0, 1), min_size=len(vals), max_size=len(vals)))
    if not any(labels):
        labels[0] = 1
    assert M.area_under_pr_curve(vals, labels) == pytest.approx(brute_average_precision(vals, labels))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=2, max_size=25), st.data())
def test_pr_equality_when_applicable(vals, data):
    truth = data.draw(st.lists(st.integers(0, len(vals) - 1), min_size=1, max_size=5, unique=True))
    result = M.pr_equality_consistency(np.array(vals), truth)
    assert result in (True, None)


def test_ssd_and_ssp_metric_dicts():
    track = np.array([0.1, 0.9, 0.2, 0.6, 0.0])
    m = M.ssd_metrics(track, [1, 2])
    assert m["precision"] == 0.5 and m["recall"] == 0.5 and m["top_k_accuracy"] == 0.5
    s = M.ssp_metrics([0.9, 0.1, 0.8, 0.3], [1, 0, 0, 0])
    assert s["balanced_accuracy"] == pytest.approx(0.5 * (1 + 2 / 3))


def test_write_report(tmp_path):
    M.write_report(tmp_path / "r.tsv", [("sp", "ssd", "f1", 0.5)], {"seed": 1})
    assert (tmp_path / "r.tsv").read_text() == "# seed = 1\nspecies\ttask\tmetric\tvalue\nsp\tssd\tf1\t0.500000\n"
