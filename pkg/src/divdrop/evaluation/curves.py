"""Curve builders and percentile statistics used by the evaluation protocols."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_FRACTIONS = tuple(round(0.1 * i, 1) for i in range(1, 11))


@dataclass(frozen=True, eq=False)
class CurvePoints:
    x: np.ndarray
    y: np.ndarray
    x_label: str
    y_label: str

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.float64)
        if x.shape != y.shape or x.ndim != 1:
            raise ValueError("curve x and y must be 1-D arrays of equal length")
        if x.size > 1 and np.any(np.diff(x) <= 0):
            raise ValueError("curve x values must be strictly increasing")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    def to_dict(self) -> dict:
        return {"x_label": self.x_label, "y_label": self.y_label, "x": self.x.tolist(), "y": self.y.tolist()}

    def at(self, x0: float) -> float:
        i = int(np.argmin(np.abs(self.x - x0)))
        return float(self.y[i])


def ue_accuracy_curve(scores, correct, fractions=DEFAULT_FRACTIONS) -> CurvePoints:
    """Accuracy over the most certain fraction of samples.

    Samples are ordered by ascending uncertainty (stable, so ties keep input
    order) and for each retained fraction ``tau`` the first
    ``ceil(tau * n)`` of them are scored.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    correct = np.asarray(correct, dtype=bool).ravel()
    if scores.size != correct.size or scores.size < 1:
        raise ValueError("scores and correctness flags must be non-empty and equally long")
    order = np.argsort(scores, kind="stable")
    hits = np.cumsum(correct[order])
    n = scores.size
    ys = []
    for tau in fractions:
        m = min(max(int(np.ceil(tau * n - 1e-9)), 1), n)
        ys.append(hits[m - 1] / m)
    return CurvePoints(np.asarray(fractions, dtype=np.float64), np.asarray(ys), "retained_fraction", "accuracy")


def count_vs_uncertainty_curve(scores, grid_size: int = 50) -> CurvePoints:
    """Number of samples with uncertainty ``<= u`` on a uniform grid of ``u``."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    if scores.size < 1:
        raise ValueError("scores must be non-empty")
    if grid_size < 2:
        raise ValueError("grid_size must be >= 2")
    lo, hi = float(scores.min()), float(scores.max())
    if hi <= lo:
        pad = 0.5 * max(1.0, abs(lo))
        lo, hi = lo - pad, hi + pad
    grid = np.linspace(lo, hi, grid_size)
    counts = np.searchsorted(np.sort(scores), grid, side="right")
    return CurvePoints(grid, counts.astype(np.float64), "uncertainty", "count")


def percentile(values, q: float) -> float:
    """Percentile with linear interpolation between order statistics."""
    return float(np.percentile(np.asarray(values, dtype=np.float64), q, method="linear"))


def exceedance(reference, scores, q: float) -> float:
    """Percentage of ``scores`` strictly above the ``q``-th percentile of ``reference``."""
    threshold = percentile(reference, q)
    return 100.0 * float(np.mean(np.asarray(scores) > threshold))
