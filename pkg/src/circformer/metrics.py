"""Evaluation metrics for splice-site detection and pairing.

"Average" precision/recall here are micro-averages over all positions at a
fixed threshold, not areas under a curve; see :func:`area_under_pr_curve`
for the latter.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .inference import detect_peaks, top_k_select
from .tensor import _sigmoid_np


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class MetricCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise MetricError("confusion counts must be non-negative")

    @property
    def k(self) -> int:
        return self.tp + self.fn


def _probs(track, logits: bool = False) -> np.ndarray:
    p = np.asarray(getattr(track, "probs", track), dtype=np.float64)
    return _sigmoid_np(p) if logits else p


def confusion_counts(scores, labels, threshold: float = 0.5, logits: bool = False) -> MetricCounts:
    p = _probs(scores, logits)
    y = np.asarray(labels).astype(bool)
    pred = p > threshold
    return MetricCounts(tp=int(np.sum(pred & y)), fp=int(np.sum(pred & ~y)),
                        tn=int(np.sum(~pred & ~y)), fn=int(np.sum(~pred & y)))


def _truth_mask(n: int, true_positions: Iterable[int]) -> np.ndarray:
    y = np.zeros(n, dtype=bool)
    idx = np.fromiter(true_positions, dtype=np.int64)
    y[idx] = True
    return y


def prf_from_counts(c: MetricCounts) -> tuple[float, float, float]:
    if c.tp + c.fn == 0:
        raise MetricError("recall undefined: no true positives in the evaluation set")
    precision = c.tp / (c.tp + c.fp) if c.tp + c.fp else 0.0
    recall = c.tp / (c.tp + c.fn)
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def position_prf(track, true_positions: Iterable[int], threshold: float = 0.5,
                 logits: bool = False) -> tuple[float, float, float]:
    """Micro-averaged (precision, recall, f1) over all positions; positive iff p > threshold."""
    p = _probs(track, logits)
    return prf_from_counts(confusion_counts(p, _truth_mask(len(p), true_positions), threshold))


def top_k_accuracy(track, true_positions: Iterable[int], peak_threshold: float = 0.0,
                   min_separation: int = 1) -> float:
    """|top-k peaks ∩ truth| / k with k = number of true positions."""
    truth = set(int(t) for t in true_positions)
    k = len(truth)
    if k == 0:
        raise MetricError("top-k accuracy undefined for k = 0")
    peaks = detect_peaks(_probs(track), peak_threshold, min_separation)
    return len(set(top_k_select(peaks, k)) & truth) / k


def balanced_accuracy(counts: MetricCounts) -> float:
    """Mean of sensitivity TP/(TP+FN) and specificity TN/(TN+FP)."""
    if counts.tp + counts.fn == 0 or counts.tn + counts.fp == 0:
        raise MetricError("balanced accuracy needs both classes present")
    return 0.5 * (counts.tp / (counts.tp + counts.fn) + counts.tn / (counts.tn + counts.fp))


def pr_equality_consistency(track, true_positions: Iterable[int], peak_threshold: float = 0.0,
                            min_separation: int = 1) -> bool | None:
    """Check precision == recall == top-k at a threshold admitting exactly k peaks.

    Predicted positives are the detected peaks above the threshold.  Returns
    None when no tie-free threshold realizes exactly k peaks.
    """
    truth = set(int(t) for t in true_positions)
    k = len(truth)
    if k == 0:
        return None
    peaks = detect_peaks(_probs(track), peak_threshold, min_separation)
    vals = sorted((v for _, v in peaks), reverse=True)
    if len(vals) < k or (len(vals) > k and vals[k - 1] == vals[k]):
        return None
    lower = vals[k] if len(vals) > k else peak_threshold
    tau = 0.5 * (vals[k - 1] + lower)
    predicted = {p for p, v in peaks if v > tau}
    if len(predicted) != k:
        return None
    hits = len(predicted & truth)
    precision, recall = hits / len(predicted), hits / k
    topk = top_k_accuracy(track, truth, peak_threshold, min_separation)
    return abs(precision - recall) <= 1e-12 and abs(precision - topk) <= 1e-12


def area_under_pr_curve(scores, labels) -> float:
    """Step-wise area under the precision-recall curve (average-precision form)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if not y.any():
        raise MetricError("AUPR undefined without positives")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    last = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    precision = tp[last] / (tp[last] + fp[last])
    recall = tp[last] / y.sum()
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def ssp_metrics(scores, labels, threshold: float = 0.5) -> dict[str, float]:
    c = confusion_counts(scores, labels, threshold)
    p, r, f = prf_from_counts(c)
    return {"balanced_accuracy": balanced_accuracy(c), "precision": p, "recall": r, "f1": f}


def ssd_metrics(track, true_positions: Sequence[int], threshold: float = 0.5) -> dict[str, float]:
    p, r, f = position_prf(track, true_positions, threshold)
    return {"precision": p, "recall": r, "f1": f, "top_k_accuracy": top_k_accuracy(track, true_positions)}


def write_report(path, rows: Iterable[tuple[str, str, str, float]], metadata: dict) -> None:
    """TSV of (species, task, metric, value) under a '#' metadata block."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for k in sorted(metadata):
            fh.write(f"# {k} = {metadata[k]}\n")
        fh.write("species\ttask\tmetric\tvalue\n")
        for sp, task, metric, value in rows:
            fh.write(f"{sp}\t{task}\t{metric}\t{value:.6f}\n")
