"""Screening, segmentation and agreement metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np


# ---------------------------------------------------------------- confusion

@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self):
        for k in ("tp", "tn", "fp", "fn"):
            v = getattr(self, k)
            if int(v) != v or v < 0:
                raise ValueError(f"{k} must be a nonnegative integer, got {v!r}")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    @classmethod
    def from_labels(cls, truth: Sequence, pred: Sequence) -> "ConfusionCounts":
        t = np.asarray(truth, dtype=bool)
        p = np.asarray(pred, dtype=bool)
        if t.shape != p.shape:
            raise ValueError("truth and prediction lengths differ")
        return cls(int(np.sum(t & p)), int(np.sum(~t & ~p)), int(np.sum(~t & p)), int(np.sum(t & ~p)))


def _ratio(num: float, den: float) -> Optional[float]:
    return None if den == 0 else num / den


def confusion_metrics(c: ConfusionCounts) -> dict:
    """Accuracy, TPR, TNR, FPR, PPV and F1; a rate with a zero denominator is None."""
    tpr = _ratio(c.tp, c.tp + c.fn)
    tnr = _ratio(c.tn, c.tn + c.fp)
    ppv = _ratio(c.tp, c.tp + c.fp)
    f1 = None
    if tpr is not None and ppv is not None and ppv + tpr > 0:
        f1 = 2 * ppv * tpr / (ppv + tpr)
    return {
        "acc": _ratio(c.tp + c.tn, c.total),
        "tpr": tpr,
        "tnr": tnr,
        "fpr": None if tnr is None else 1.0 - tnr,
        "ppv": ppv,
        "f1": f1,
    }


def accuracy(truth: Sequence, pred: Sequence) -> float:
    t, p = list(truth), list(pred)
    if len(t) != len(p) or not t:
        raise ValueError("need equally long, non-empty label sequences")
    return sum(a == b for a, b in zip(t, p)) / len(t)


# ------------------------------------------------------------- segmentation

def _pixel_counts(pred, gt, class_id):
    p, g = np.asarray(pred), np.asarray(gt)
    if p.shape != g.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {g.shape}")
    pc, gc = p == class_id, g == class_id
    return int(np.sum(pc & gc)), int(np.sum(pc & ~gc)), int(np.sum(~pc & gc))


def dice_with_flag(pred, gt, class_id: int) -> tuple[float, bool]:
    """Dice and whether it was vacuous (class absent from both masks)."""
    tp, fp, fn = _pixel_counts(pred, gt, class_id)
    den = 2 * tp + fn + fp
    if den == 0:
        return 1.0, True
    return 2 * tp / den, False


def dice(pred, gt, class_id: int) -> float:
    return dice_with_flag(pred, gt, class_id)[0]


def mask_precision(pred, gt, class_id: int) -> float:
    """Pixel precision when dice reaches 0.5, else 0."""
    tp, fp, fn = _pixel_counts(pred, gt, class_id)
    den = 2 * tp + fn + fp
    d = 1.0 if den == 0 else 2 * tp / den
    if d < 0.5:
        return 0.0
    return 1.0 if tp + fp == 0 else tp / (tp + fp)


@dataclass
class SegmentationScore:
    classes: tuple
    dice: dict            # class -> list of per-scan dice (None when vacuous)
    mask_precision: dict  # class -> list of per-scan m_p (None when vacuous)

    def mean_dice(self, class_id: Optional[int] = None) -> Optional[float]:
        return _mean_over(self.dice, self.classes if class_id is None else (class_id,))

    def mean_mask_precision(self, class_id: Optional[int] = None) -> Optional[float]:
        return _mean_over(self.mask_precision, self.classes if class_id is None else (class_id,))

    def to_json_dict(self, names: Optional[dict] = None) -> dict:
        names = names or {}
        per = {names.get(c, str(c)): {"dice": self.mean_dice(c), "mask_precision": self.mean_mask_precision(c)}
               for c in self.classes}
        return {"per_class": per, "mean_dice": self.mean_dice(),
                "mean_mask_precision": self.mean_mask_precision()}


def _mean_over(table: dict, classes) -> Optional[float]:
    vals = [v for c in classes for v in table[c] if v is not None]
    return float(np.mean(vals)) if vals else None


def segmentation_score(preds: Sequence, gts: Sequence, classes=(1, 2)) -> SegmentationScore:
    """Per-scan dice and mask precision; vacuous scans are kept out of the means."""
    if len(preds) != len(gts):
        raise ValueError("prediction and ground-truth counts differ")
    d = {c: [] for c in classes}
    m = {c: [] for c in classes}
    for p, g in zip(preds, gts):
        for c in classes:
            val, vacuous = dice_with_flag(p, g, c)
            d[c].append(None if vacuous else val)
            m[c].append(None if vacuous else mask_precision(p, g, c))
    return SegmentationScore(tuple(classes), d, m)


# ---------------------------------------------------------------------- ROC

@dataclass(frozen=True)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float

    def points(self) -> list:
        return [[float(a), float(b)] for a, b in zip(self.fpr, self.tpr)]


def roc(scores: Sequence[float], labels: Sequence) -> RocCurve:
    """Threshold sweep over distinct scores (tied scores move together); trapezoid AUC."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be equally long 1-D sequences")
    P, N = int(y.sum()), int((~y).sum())
    if P == 0 or N == 0:
        raise ValueError("ROC needs both positive and negative samples")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    ends = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tps = np.cumsum(y)[ends]
    fps = np.cumsum(~y)[ends]
    tpr = np.r_[0.0, tps / P]
    fpr = np.r_[0.0, fps / N]
    thr = np.r_[np.inf, s[ends]]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(fpr, tpr, thr, auc)


# --------------------------------------------------------------- correlation

class UndefinedCorrelation(ValueError):
    pass


@dataclass(frozen=True)
class CorrelationResult:
    r: float
    p: float
    n: int

    def to_json_dict(self) -> dict:
        return {"r": self.r, "p": self.p, "n": self.n}


def _betacf(a: float, b: float, x: float, tol: float = 1e-12, max_iter: int = 10000) -> float:
    # modified Lentz evaluation of the incomplete-beta continued fraction
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c, d = 1.0, 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc_regularized(a: float, b: float, x: float) -> float:
    """I_x(a, b) for a, b > 0 and 0 <= x <= 1."""
    if a <= 0 or b <= 0:
        raise ValueError("a and b must be positive")
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_two_tailed_p(t: float, df: float) -> float:
    if math.isinf(t):
        return 0.0
    return betainc_regularized(df / 2.0, 0.5, df / (df + t * t))


def pearson(x: Sequence[float], y: Sequence[float]) -> CorrelationResult:
    """Product-moment r with a two-tailed Student-t p-value on n - 2 degrees of freedom."""
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(y, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("x and y must be equally long 1-D sequences")
    n = a.size
    if n < 3:
        raise UndefinedCorrelation(f"need at least 3 paired samples, got {n}")
    da, db = a - a.mean(), b - b.mean()
    sa, sb = float(da @ da), float(db @ db)
    if sa == 0 or sb == 0:
        raise UndefinedCorrelation("correlation is undefined: one input has zero variance")
    r = float(np.clip((da @ db) / math.sqrt(sa * sb), -1.0, 1.0))
    df = n - 2
    t = math.inf if abs(r) == 1.0 else r * math.sqrt(df / (1.0 - r * r))
    return CorrelationResult(r, t_two_tailed_p(t, df), n)


# -------------------------------------------------------------------- report

def metric_report(confusion: Optional[ConfusionCounts] = None, seg: Optional[SegmentationScore] = None,
                  roc_curve: Optional[RocCurve] = None, correlation: Optional[CorrelationResult] = None,
                  class_names: Optional[dict] = None, extra: Optional[dict] = None) -> dict:
    out: dict = {}
    if confusion is not None:
        out["confusion"] = {"tp": confusion.tp, "tn": confusion.tn, "fp": confusion.fp, "fn": confusion.fn,
                            **confusion_metrics(confusion)}
    if seg is not None:
        out["seg"] = seg.to_json_dict(class_names)
    if roc_curve is not None:
        out["roc"] = {"auc": roc_curve.auc, "points": roc_curve.points()}
    if correlation is not None:
        out["correlation"] = correlation.to_json_dict()
    if extra:
        out.update(extra)
    return out
