"""Early/advanced glaucoma grading from mean thickness features."""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .profiles import GradeFeatures
from .scan import EARLY_ADVANCED_RNFL_CUT_UM, GradeLabel

STD_FLOOR = 1e-9


@dataclass(frozen=True)
class SvmModel:
    w: np.ndarray
    b: float
    mean: np.ndarray
    std: np.ndarray
    lam: float
    seed: int
    objective_history: tuple = ()

    def standardize(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def decision(self, x: np.ndarray) -> np.ndarray:
        return self.standardize(x) @ self.w + self.b

    def to_json_dict(self) -> dict:
        return {"weights": self.w.tolist(), "bias": self.b, "feature_mean": self.mean.tolist(),
                "feature_std": self.std.tolist(), "lambda": self.lam, "seed": self.seed,
                "features": ["mean_rnfl", "mean_gcip", "mean_gcc"], "positive_class": GradeLabel.ADVANCED.value}

    @classmethod
    def from_json_dict(cls, d: dict) -> "SvmModel":
        return cls(np.array(d["weights"], dtype=np.float64), float(d["bias"]),
                   np.array(d["feature_mean"], dtype=np.float64), np.array(d["feature_std"], dtype=np.float64),
                   float(d["lambda"]), int(d["seed"]))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "SvmModel":
        with open(path) as fh:
            return cls.from_json_dict(json.load(fh))


def _as_matrix(features) -> np.ndarray:
    rows = [f.vector() if isinstance(f, GradeFeatures) else np.asarray(f, dtype=np.float64) for f in features]
    return np.vstack(rows)


def _signs(labels) -> np.ndarray:
    out = []
    for lab in labels:
        g = GradeLabel.parse(lab)
        if g is GradeLabel.HEALTHY:
            raise ValueError("the grader separates early from advanced glaucoma; got a healthy label")
        out.append(1.0 if g is GradeLabel.ADVANCED else -1.0)
    return np.array(out)


def svm_objective(w, b, Z, y, lam) -> float:
    return float(lam * w @ w + np.mean(np.maximum(0.0, 1.0 - y * (Z @ w + b))))


def svm_train(features: Sequence, labels: Sequence, lam: float = 1e-2, epochs: int = 500,
              seed: int = 0, step0: float = 1.0) -> SvmModel:
    """Linear soft-margin SVM by full-batch subgradient descent.

    Minimizes ``lam * |w|^2 + mean(hinge)`` over z-scored features with steps
    ``step0 / sqrt(t)`` and returns the best iterate seen. Advanced is the
    positive class. Full-batch updates make the fit independent of sample
    order; ``seed`` is recorded with the model.
    """
    X = _as_matrix(features)
    y = _signs(labels)
    if X.shape[0] < 2:
        raise ValueError("need at least two samples")
    if np.unique(y).size < 2:
        raise ValueError("both early and advanced samples are required")
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    if np.any(std < STD_FLOOR):
        warnings.warn("zero-variance grading feature; its std is floored at 1e-9", RuntimeWarning)
        std = np.maximum(std, STD_FLOOR)
    Z = (X - mean) / std
    w, b = np.zeros(Z.shape[1]), 0.0
    best = (svm_objective(w, b, Z, y, lam), w.copy(), b)
    hist = [best[0]]
    n = Z.shape[0]
    for t in range(1, epochs + 1):
        active = y * (Z @ w + b) < 1.0
        gw = 2.0 * lam * w - (y[active, None] * Z[active]).sum(axis=0) / n
        gb = -y[active].sum() / n
        eta = step0 / np.sqrt(t)
        w, b = w - eta * gw, b - eta * gb
        obj = svm_objective(w, b, Z, y, lam)
        if obj < best[0]:
            best = (obj, w.copy(), b)
        hist.append(best[0])
    return SvmModel(best[1], float(best[2]), mean, std, lam, seed, tuple(hist))


def svm_predict(model: SvmModel, f) -> tuple[GradeLabel, float]:
    """Grade and signed margin; a margin of exactly zero grades as advanced."""
    x = f.vector() if isinstance(f, GradeFeatures) else np.asarray(f, dtype=np.float64)
    m = float(model.decision(x))
    return (GradeLabel.ADVANCED if m >= 0 else GradeLabel.EARLY), m


@dataclass(frozen=True)
class ThresholdGrader:
    rnfl_threshold_um: float = EARLY_ADVANCED_RNFL_CUT_UM

    def __post_init__(self):
        if not self.rnfl_threshold_um > 0:
            raise ValueError("threshold must be positive")


def threshold_grade(f: GradeFeatures, g: ThresholdGrader = ThresholdGrader()) -> GradeLabel:
    """Advanced iff the mean RNFL thickness is strictly below the threshold."""
    return GradeLabel.ADVANCED if f.mean_rnfl_um < g.rnfl_threshold_um else GradeLabel.EARLY
