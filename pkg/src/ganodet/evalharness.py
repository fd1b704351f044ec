"""Detection metrics and machine-readable reports.

Abnormal is the positive class throughout: a good detector gives
abnormal items the higher anomaly scores.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    EmptyInputError,
    EmptyMaskError,
    ShapeMismatchError,
    SingleClassError,
)


@dataclass
class ScoredItem:
    item_id: str
    true_label: int          # 1 = abnormal
    score: float

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValueError(f"non-finite score for item {self.item_id}")


@dataclass
class EvalReport:
    auc: float
    best_f1: float
    best_threshold: float
    confusion: dict
    histogram: dict

    def to_dict(self) -> dict:
        return {"auc": self.auc, "best_f1": self.best_f1,
                "best_threshold": self.best_threshold,
                "confusion": self.confusion, "histogram": self.histogram}


def _split_scores(items: list[ScoredItem]) -> tuple[np.ndarray, np.ndarray]:
    abn = np.array([it.score for it in items if it.true_label == 1])
    nor = np.array([it.score for it in items if it.true_label != 1])
    if abn.size == 0 or nor.size == 0:
        raise SingleClassError("need both normal and abnormal items")
    return abn, nor


def roc_auc(items: list[ScoredItem]) -> float:
    """Probability that a random abnormal item outscores a random normal
    one, ties counted half: the rank formulation of the pairwise count."""
    abn, nor = _split_scores(items)
    scores = np.concatenate([abn, nor])
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.size)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    rank_sum = ranks[:abn.size].sum()
    greater = rank_sum - abn.size * (abn.size + 1) / 2.0
    return greater / (abn.size * nor.size)


def best_f1_sweep(items: list[ScoredItem]) -> tuple[float, float, dict]:
    """F1 (abnormal positive) evaluated at every distinct score used as a
    `score >= threshold` rule; ties break toward the lower threshold."""
    abn, nor = _split_scores(items)
    best_f1, best_t, best_conf = -1.0, 0.0, {}
    for t in sorted(set(s.score for s in items)):
        tp = int(np.sum(abn >= t))
        fp = int(np.sum(nor >= t))
        fn = abn.size - tp
        tn = nor.size - fp
        f1 = 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0
        if f1 > best_f1:
            best_f1, best_t = f1, t
            best_conf = {"tp": tp, "fp": fp, "fn": fn, "tn": tn}
    return best_f1, best_t, best_conf


def f1_at_threshold(items: list[ScoredItem], threshold: float) -> float:
    abn, nor = _split_scores(items)
    tp = int(np.sum(abn >= threshold))
    fp = int(np.sum(nor >= threshold))
    fn = abn.size - tp
    return 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0


def per_class_histogram(values, labels, bins: int) -> dict:
    """Per-class counts over uniform bins spanning the pooled range.

    Interior boundary values go to the lower bin; the pooled maximum goes
    to the last bin, so nothing is lost to binning.
    """
    values = np.asarray(values, dtype=np.float64)
    labels = np.asarray(labels)
    if values.size == 0:
        raise EmptyInputError("histogram over an empty collection")
    if bins < 2:
        raise ValueError(f"bins must be >= 2, got {bins}")
    lo, hi = float(values.min()), float(values.max())
    if hi == lo:
        edges = np.array([lo, hi])
        out = {"bin_edges": edges.tolist(), "classes": {}}
        for cls in sorted(set(labels.tolist())):
            counts = [0] * bins
            counts[0] = int(np.sum(labels == cls))
            out["classes"][str(cls)] = counts
        return out
    edges = np.linspace(lo, hi, bins + 1)
    idx = np.searchsorted(edges, values, side="left") - 1
    idx = np.clip(idx, 0, bins - 1)
    out = {"bin_edges": edges.tolist(), "classes": {}}
    for cls in sorted(set(labels.tolist())):
        sel = idx[labels == cls]
        counts = np.bincount(sel, minlength=bins)
        out["classes"][str(cls)] = counts.astype(int).tolist()
    return out


def pixel_difference_histogram(results, labels, bins: int) -> dict:
    """Distribution of per-image mean residual, split by class: the
    reconstruction-gap picture that separates classes a generator has
    learned from ones it has not."""
    if len(results) == 0:
        raise EmptyInputError("no results to bin")
    means = [float(np.mean(r.residual_map)) for r in results]
    return per_class_histogram(means, labels, bins)


def localization_overlap(residual_map: np.ndarray, truth_mask: np.ndarray,
                         top_k: int) -> float:
    """Recall of the defect mask among the top_k highest-residual pixels."""
    residual = np.asarray(residual_map, dtype=np.float64).reshape(-1)
    mask = np.asarray(truth_mask, dtype=bool).reshape(-1)
    if residual.shape != mask.shape:
        raise ShapeMismatchError(
            f"residual has {residual.size} pixels, mask {mask.size}")
    n_true = int(mask.sum())
    if n_true == 0:
        raise EmptyMaskError("ground-truth mask is empty")
    order = np.argsort(-residual, kind="mergesort")
    top = order[:top_k]
    return float(mask[top].sum()) / n_true


def make_eval_report(items: list[ScoredItem], bins: int = 20) -> EvalReport:
    auc = roc_auc(items)
    f1, threshold, confusion = best_f1_sweep(items)
    hist = per_class_histogram([it.score for it in items],
                               [it.true_label for it in items], bins)
    return EvalReport(auc=auc, best_f1=f1, best_threshold=threshold,
                      confusion=confusion, histogram=hist)


def histogram_csv_rows(hist: dict) -> list[tuple]:
    """(bin_lo, bin_hi, class, count) rows ready for external plotting."""
    edges = hist["bin_edges"]
    rows = []
    for cls, counts in sorted(hist["classes"].items()):
        for b, count in enumerate(counts):
            lo = edges[min(b, len(edges) - 2)]
            hi = edges[min(b + 1, len(edges) - 1)]
            rows.append((repr(lo), repr(hi), cls, count))
    return rows
