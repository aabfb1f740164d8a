from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

from ..errors import InputError, UndefinedCorrelationError

_MOD = "eval_harness"


def _pair(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(pred, dtype=np.float64).ravel()
    y = np.asarray(truth, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise InputError(f"length mismatch: {x.size} predictions vs {y.size} labels", module=_MOD)
    if x.size < 3:
        raise InputError(f"need at least 3 samples, got {x.size}", module=_MOD)
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise InputError("non-finite values in correlation input", module=_MOD)
    return x, y


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    xc = x - x.mean()
    yc = y - y.mean()
    sxx = xc @ xc
    syy = yc @ yc
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelationError("correlation undefined for a constant vector", module=_MOD)
    # sqrt(sxx * syy) rather than sqrt(sxx) * sqrt(syy): exact 1.0 for identical inputs
    r = (xc @ yc) / np.sqrt(sxx * syy)
    return float(min(1.0, max(-1.0, r)))


def plcc(pred, truth) -> float:
    """Pearson linear correlation."""
    return _pearson(*_pair(pred, truth))


def srocc(pred, truth) -> float:
    """Spearman rank-order correlation; tied values share their mid-rank."""
    x, y = _pair(pred, truth)
    return _pearson(rankdata(x, method="average"), rankdata(y, method="average"))
