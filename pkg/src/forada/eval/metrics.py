"""Frame/video metrics: ROC-AUC, step-wise AP and interpolated EER."""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata
from sklearn.metrics import average_precision_score, roc_curve


class MetricError(ValueError):
    """Raised when a metric is undefined for the given records."""


@dataclass(frozen=True)
class EvalRecord:
    video_id: str
    frame_index: int
    score: float
    label: int  # 1 = fake


def _arrays(scores, labels=None):
    if labels is None:
        records = list(scores)
        scores = [r.score for r in records]
        labels = [r.label for r in records]
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.int64).ravel()
    if s.shape != y.shape:
        raise MetricError(f"{s.size} scores but {y.size} labels")
    if not np.isin(y, (0, 1)).all():
        raise MetricError("labels must be 0 (real) or 1 (fake)")
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == y.size:
        raise MetricError("metric undefined: both real and fake samples are required")
    return s, y


def auc(scores, labels=None) -> float:
    """Mann-Whitney estimate of P(fake > real) + P(tie) / 2.

    Accepts either a sequence of EvalRecord or parallel score/label arrays.
    """
    s, y = _arrays(scores, labels)
    ranks = rankdata(s)  # ties get their average rank
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def ap(scores, labels=None) -> float:
    """Step-wise average precision: sum over thresholds of (R_k - R_{k-1}) * P_k."""
    s, y = _arrays(scores, labels)
    return float(average_precision_score(y, s))


def eer(scores, labels=None) -> float:
    """Equal error rate with linear interpolation where FNR - FPR changes sign."""
    s, y = _arrays(scores, labels)
    fpr, tpr, _ = roc_curve(y, s, drop_intermediate=False)
    fnr = 1.0 - tpr
    d = fnr - fpr
    i = int(np.argmax(d <= 0))
    if i == 0:
        return float(fpr[0])
    t = d[i - 1] / (d[i - 1] - d[i])
    return float(fpr[i - 1] + t * (fpr[i] - fpr[i - 1]))


def summary(scores, labels=None) -> dict:
    s, y = _arrays(scores, labels)
    return {"auc": auc(s, y), "ap": ap(s, y), "eer": eer(s, y), "n": int(y.size),
            "n_fake": int(y.sum())}


def video_aggregate(records, how: str = "mean") -> list[EvalRecord]:
    """One record per video; the score is the mean (or max) of its frame scores."""
    if how not in ("mean", "max"):
        raise ValueError("video aggregation must be 'mean' or 'max'")
    grouped: OrderedDict[str, list[EvalRecord]] = OrderedDict()
    for r in records:
        grouped.setdefault(r.video_id, []).append(r)
    out = []
    for vid, rs in grouped.items():
        labels = {r.label for r in rs}
        if len(labels) != 1:
            raise MetricError(f"video {vid} mixes real and fake frames")
        scores = np.array([r.score for r in rs], dtype=np.float64)
        value = scores.mean() if how == "mean" else scores.max()
        out.append(EvalRecord(vid, 0, float(value), labels.pop()))
    return out
