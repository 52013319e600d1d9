"""Regression metrics for popularity prediction: nMSE, SRC, PLCC and MAE."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata


def _pair(y, yhat, min_n: int):
    y = np.asarray(y, dtype=np.float64).ravel()
    yhat = np.asarray(yhat, dtype=np.float64).ravel()
    if y.shape != yhat.shape:
        raise ValueError(f"length mismatch: {y.size} targets vs {yhat.size} predictions")
    if y.size < min_n:
        raise ValueError(f"need at least {min_n} samples, got {y.size}")
    if not (np.all(np.isfinite(y)) and np.all(np.isfinite(yhat))):
        raise ValueError("inputs must be finite")
    return y, yhat


def nmse(y, yhat) -> float:
    """Squared error normalized by N times the population variance of ``y``."""
    y, yhat = _pair(y, yhat, 2)
    var = np.mean((y - y.mean()) ** 2)
    if var == 0:
        raise ValueError("nMSE is undefined for constant targets")
    return float(np.sum((y - yhat) ** 2) / (y.size * var))


def src(y, yhat) -> float:
    """Spearman rank correlation ``1 - 6 sum d^2 / (N (N^2 - 1))`` over mid-ranks."""
    y, yhat = _pair(y, yhat, 2)
    n = y.size
    d = rankdata(y) - rankdata(yhat)
    return float(1.0 - 6.0 * np.sum(d * d) / (n * (n * n - 1.0)))


def plcc(y, yhat) -> float:
    y, yhat = _pair(y, yhat, 2)
    a = y - y.mean()
    b = yhat - yhat.mean()
    den = np.sqrt(np.sum(a * a) * np.sum(b * b))
    if den == 0:
        raise ValueError("PLCC is undefined when either series is constant")
    return float(np.clip(np.sum(a * b) / den, -1.0, 1.0))


def mae(y, yhat) -> float:
    y, yhat = _pair(y, yhat, 1)
    return float(np.mean(np.abs(y - yhat)))


@dataclass(frozen=True)
class MetricReport:
    nmse: float
    src: float
    plcc: float
    mae: float
    n: int

    @classmethod
    def compute(cls, y, yhat) -> "MetricReport":
        y, yhat = _pair(y, yhat, 2)
        return cls(nmse(y, yhat), src(y, yhat), plcc(y, yhat), mae(y, yhat), int(y.size))

    def as_dict(self) -> dict:
        return asdict(self)
