"""Variance-ratio F-test on prediction residuals.

Residuals are the differences between subjective scores and model predictions
after a monotonic logistic mapping (the usual IQA convention). The model with
the smaller residual variance is the better one.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import optimize, stats

from ..errors import InputError, NumericError

_MOD = "eval_harness"

SUPERIOR, INFERIOR, INDISTINGUISHABLE = "superior", "inferior", "indistinguishable"
SYMBOL = {SUPERIOR: "1", INFERIOR: "0", INDISTINGUISHABLE: "-"}


@dataclass(frozen=True)
class FTestResult:
    ratio: float
    verdict: str  # verdict for model a against model b
    lower: float
    upper: float
    dof: tuple[int, int]

    @property
    def symbol(self) -> str:
        return SYMBOL[self.verdict]

    @property
    def significant(self) -> bool:
        return self.verdict != INDISTINGUISHABLE


def f_test(residuals_a, residuals_b, confidence: float = 0.95) -> FTestResult:
    """Compare residual variances of models a and b.

    ratio = var(a) / var(b). Above the ``confidence`` quantile of
    F(n_a-1, n_b-1) model a is inferior; below the ``1-confidence`` quantile it
    is superior; otherwise the two are indistinguishable.
    """
    a = np.asarray(residuals_a, dtype=np.float64).ravel()
    b = np.asarray(residuals_b, dtype=np.float64).ravel()
    if a.size < 2 or b.size < 2:
        raise InputError("F-test needs at least 2 residuals per model", module=_MOD)
    var_a, var_b = a.var(ddof=1), b.var(ddof=1)
    if var_b == 0.0:
        raise NumericError("zero residual variance in the denominator", module=_MOD)
    dfa, dfb = a.size - 1, b.size - 1
    ratio = float(var_a / var_b)
    upper = float(stats.f.ppf(confidence, dfa, dfb))
    lower = float(stats.f.ppf(1.0 - confidence, dfa, dfb))
    if ratio > upper:
        verdict = INFERIOR
    elif ratio < lower:
        verdict = SUPERIOR
    else:
        verdict = INDISTINGUISHABLE
    return FTestResult(ratio, verdict, lower, upper, (dfa, dfb))


def logistic(x, b1, b2, b3, b4, b5):
    return b1 * (0.5 - 1.0 / (1.0 + np.exp(b2 * (x - b3)))) + b4 * x + b5


def logistic_residuals(pred, mos) -> np.ndarray:
    """Residuals of ``mos`` after fitting the five-parameter logistic map from
    predictions to subjective scores."""
    x = np.asarray(pred, dtype=np.float64)
    y = np.asarray(mos, dtype=np.float64)
    p0 = [np.ptp(y) or 1.0, 1.0 / (x.std() or 1.0), float(np.mean(x)), 0.0, float(np.mean(y))]
    try:
        params, _ = optimize.curve_fit(logistic, x, y, p0=p0, maxfev=20000)
        fitted = logistic(x, *params)
    except (RuntimeError, optimize.OptimizeWarning):
        slope, intercept = np.polyfit(x, y, 1)
        fitted = slope * x + intercept
    return y - fitted
