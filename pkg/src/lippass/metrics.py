"""Verification metrics: confusion counts, rates, ROC, EER, AUC and threshold choice.

Decision rule everywhere: accept iff ``score >= threshold``.

Two flavours of false-accept/false-reject are kept apart.  ``far_total`` and
``frr_total`` divide by the whole population (FP / n, FN / n); the ROC and
EER use the conventional rates FPR = FP / (FP + TN) and FNR = FN / (FN + TP).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dataset import ImposterCategory
from .errors import UndefinedMetricError


@dataclass(frozen=True)
class ScoredSample:
    score: float
    label: int
    category: ImposterCategory

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")
        if (self.category is ImposterCategory.GENUINE) != (self.label == 1):
            raise ValueError(f"label {self.label} inconsistent with category {self.category.value}")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    @property
    def positives(self) -> int:
        return self.tp + self.fn

    @property
    def negatives(self) -> int:
        return self.tn + self.fp

    def to_dict(self) -> dict:
        return {"TP": self.tp, "TN": self.tn, "FP": self.fp, "FN": self.fn}


def _arrays(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.size != y.size:
        raise ValueError(f"{s.size} scores but {y.size} labels")
    if s.size == 0:
        raise ValueError("no samples")
    if not np.all(np.isin(y, (0, 1))):
        raise ValueError("labels must be 0 or 1")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    return s, y.astype(np.int64)


def unpack(samples: Sequence[ScoredSample]):
    """Scores and labels arrays from scored samples."""
    return (np.array([s.score for s in samples], dtype=np.float64),
            np.array([s.label for s in samples], dtype=np.int64))


def confusion(scores, labels, threshold: float) -> ConfusionCounts:
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    return _confusion(scores, labels, threshold)


def _confusion(scores, labels, threshold):
    s, y = _arrays(scores, labels)
    accept = s >= threshold
    pos = y == 1
    return ConfusionCounts(
        tp=int(np.sum(accept & pos)),
        tn=int(np.sum(~accept & ~pos)),
        fp=int(np.sum(accept & ~pos)),
        fn=int(np.sum(~accept & pos)),
    )


def _ratio(num, den, name):
    if den == 0:
        raise UndefinedMetricError(f"{name} is undefined: zero denominator")
    return num / den


def sensitivity(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fn, "sensitivity")


def specificity(c: ConfusionCounts) -> float:
    return _ratio(c.tn, c.tn + c.fp, "specificity")


def accuracy(c: ConfusionCounts) -> float:
    return _ratio(c.tp + c.tn, c.total, "accuracy")


def far_total(c: ConfusionCounts) -> float:
    """False accepts over the whole population."""
    return _ratio(c.fp, c.total, "FAR")


def frr_total(c: ConfusionCounts) -> float:
    """False rejects over the whole population."""
    return _ratio(c.fn, c.total, "FRR")


# ---------------------------------------------------------------------------
# ROC
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RocCurve:
    """Operating points ordered by decreasing threshold.

    ``tp``/``fp`` hold the integer counts behind each point so ties can be
    compared exactly.
    """

    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    tp: np.ndarray = field(repr=False)
    fp: np.ndarray = field(repr=False)
    n_pos: int = 0
    n_neg: int = 0

    def __len__(self):
        return self.thresholds.size

    def points(self) -> list:
        return list(zip(self.thresholds.tolist(), self.fpr.tolist(), self.tpr.tolist()))


def roc_curve(scores, labels) -> RocCurve:
    """Sweep every distinct score plus one sentinel above the max and one below the min."""
    s, y = _arrays(scores, labels)
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs both positive and negative samples")
    order = np.argsort(-s, kind="mergesort")
    s_sorted = s[order]
    y_sorted = y[order]
    tp_cum = np.cumsum(y_sorted)
    fp_cum = np.cumsum(1 - y_sorted)
    # Last index of each run of equal scores: everything up to it is accepted.
    last = np.r_[np.flatnonzero(np.diff(s_sorted) != 0), s_sorted.size - 1]
    distinct = s_sorted[last]
    above = np.nextafter(distinct[0], np.inf)
    below = np.nextafter(distinct[-1], -np.inf)
    thresholds = np.r_[above, distinct, below]
    tp = np.r_[0, tp_cum[last], n_pos].astype(np.int64)
    fp = np.r_[0, fp_cum[last], n_neg].astype(np.int64)
    return RocCurve(
        thresholds=thresholds,
        fpr=fp / n_neg,
        tpr=tp / n_pos,
        tp=tp,
        fp=fp,
        n_pos=n_pos,
        n_neg=n_neg,
    )


def eer(curve: RocCurve) -> tuple[float, float]:
    """Equal error rate where the curve crosses FPR = 1 - TPR.

    Interpolates linearly between the two points that bracket the crossing;
    returns (rate, threshold).
    """
    d = curve.fpr + curve.tpr - 1.0
    k = int(np.argmax(d >= 0))
    if d[k] == 0 or k == 0:
        return float(curve.fpr[k]), float(curve.thresholds[k])
    alpha = -d[k - 1] / (d[k] - d[k - 1])
    rate = curve.fpr[k - 1] + alpha * (curve.fpr[k] - curve.fpr[k - 1])
    thr = curve.thresholds[k - 1] + alpha * (curve.thresholds[k] - curve.thresholds[k - 1])
    return float(rate), float(thr)


def auc(curve: RocCurve) -> float:
    """Trapezoidal area under the ROC curve."""
    dx = np.diff(curve.fpr)
    return float(np.sum(dx * (curve.tpr[1:] + curve.tpr[:-1]) / 2.0))


def choose_threshold(curve: RocCurve) -> float:
    """Threshold maximising Youden's J = TPR - FPR.

    Ties go to the lower FPR, then to the higher threshold.  J is compared
    in integer arithmetic (TP * N - FP * P) so ties are exact.
    """
    j = curve.tp * curve.n_neg - curve.fp * curve.n_pos
    best = j.max()
    cand = np.flatnonzero(j == best)
    cand = cand[curve.fp[cand] == curve.fp[cand].min()]
    return float(curve.thresholds[cand].max())


def operating_threshold(curve: RocCurve) -> float:
    """Midpoint of the threshold interval that realises :func:`choose_threshold`.

    With accept-iff-``>=``, every cut in (next lower score, chosen] gives
    the same confusion counts; the midpoint keeps the widest margin to both
    sides when the cut is applied to unseen scores.  The bottom sentinel
    is never the lower neighbour, so the result stays above the lowest score.
    """
    chosen = choose_threshold(curve)
    k = int(np.flatnonzero(curve.thresholds == chosen)[0])
    if k + 1 >= len(curve.thresholds) - 1:
        return chosen
    return float((chosen + curve.thresholds[k + 1]) / 2.0)


# ---------------------------------------------------------------------------
# Per-category and full reports
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CategoryStats:
    category: ImposterCategory
    count: int
    metric: str  # "sensitivity" for Genuine, "specificity" otherwise
    value: float

    def to_dict(self) -> dict:
        return {"count": self.count, "metric": self.metric, "value": self.value}


def category_report(samples: Sequence[ScoredSample], threshold: float) -> dict:
    """Specificity within each imposter category (sensitivity for Genuine).

    Categories with no samples are left out and reported with a warning.
    """
    out = {}
    missing = []
    for cat in ImposterCategory:
        group = [s for s in samples if s.category is cat]
        if not group:
            missing.append(cat.value)
            continue
        scores, labels = unpack(group)
        c = _confusion(scores, labels, threshold)
        if cat is ImposterCategory.GENUINE:
            out[cat] = CategoryStats(cat, len(group), "sensitivity", sensitivity(c))
        else:
            out[cat] = CategoryStats(cat, len(group), "specificity", specificity(c))
    if missing:
        warnings.warn(f"no samples for categories: {', '.join(missing)}", stacklevel=2)
    return out


@dataclass(frozen=True)
class EvalReport:
    confusion: ConfusionCounts
    sensitivity: float
    specificity: float
    accuracy: float
    far_total: float
    frr_total: float
    eer: float
    eer_threshold: float
    auc: float
    chosen_threshold: float
    categories: dict = field(repr=False)
    roc: RocCurve | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "threshold": self.chosen_threshold,
            "confusion": self.confusion.to_dict(),
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
            "accuracy": self.accuracy,
            "far_total": self.far_total,
            "frr_total": self.frr_total,
            "eer": self.eer,
            "eer_threshold": self.eer_threshold,
            "auc": self.auc,
            "categories": {c.value: s.to_dict() for c, s in self.categories.items()},
        }


def evaluate(samples: Sequence[ScoredSample], threshold: float | None = None) -> EvalReport:
    """Full report on ``samples``.  Without a threshold, Youden's J picks one.

    A threshold above every score (possible when J picks the top sentinel)
    simply rejects everything.
    """
    scores, labels = unpack(samples)
    curve = roc_curve(scores, labels)
    if threshold is None:
        threshold = choose_threshold(curve)
    c = _confusion(scores, labels, threshold)
    rate, thr = eer(curve)
    return EvalReport(
        confusion=c,
        sensitivity=sensitivity(c),
        specificity=specificity(c),
        accuracy=accuracy(c),
        far_total=far_total(c),
        frr_total=frr_total(c),
        eer=rate,
        eer_threshold=thr,
        auc=auc(curve),
        chosen_threshold=float(threshold),
        categories=category_report(samples, threshold),
        roc=curve,
    )


def write_roc(curve: RocCurve, path) -> None:
    """Tab-separated threshold, FPR, TPR per line, with a header."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("threshold\tfpr\ttpr\n")
        for t, x, y in curve.points():
            fh.write(f"{t!r}\t{x!r}\t{y!r}\n")


def write_report(report: EvalReport, path, extra: dict | None = None) -> None:
    d = report.to_dict()
    if extra:
        d.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(d, fh, indent=1, sort_keys=True)
        fh.write("\n")
