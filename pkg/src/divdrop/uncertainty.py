"""Reductions of T stochastic passes into uncertainty scores.

Regression predictions are arrays of shape ``(..., T)``; classification
predictions are probability arrays of shape ``(..., T, C)``. Every
reduction acts on the trailing pass axis, so a single input and a batch of
inputs go through the same code. Entropies are in nats.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from divdrop.masks import MaskBank
from divdrop.network import NetworkWeights, forward_masked

LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True, eq=False)
class EnsemblePrediction:
    """Stochastic outputs for a batch: ``(n, T)`` or ``(n, T, C)``."""

    values: np.ndarray
    task: str = "regression"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if self.task == "regression":
            if v.ndim != 2 or v.shape[1] < 1:
                raise ValueError("regression predictions must have shape (n, T) with T >= 1")
        elif self.task == "classification":
            if v.ndim != 3 or v.shape[1] < 1:
                raise ValueError("classification predictions must have shape (n, T, C)")
            if np.any(v < 0) or np.any(np.abs(v.sum(axis=-1) - 1.0) > 1e-8):
                raise ValueError("each pass must be a probability vector")
        else:
            raise ValueError(f"unknown task {self.task!r}")
        object.__setattr__(self, "values", v)

    @property
    def T(self) -> int:
        return self.values.shape[1]

    def prefix(self, t: int) -> EnsemblePrediction:
        return EnsemblePrediction(self.values[:, :t], self.task)


def _values(pred) -> np.ndarray:
    return pred.values if isinstance(pred, EnsemblePrediction) else np.asarray(pred, dtype=np.float64)


def mean_variance(pred) -> tuple[np.ndarray, np.ndarray]:
    """Ensemble mean and variance over passes (divisor T)."""
    v = _values(pred)
    mean = v.mean(axis=-1)
    var = np.mean((v - mean[..., None]) ** 2, axis=-1)
    return mean, var


def gaussian_loglik(mean, var, y, var_floor: float = 1e-6):
    """Gaussian log density of ``y`` with the variance floored at ``var_floor``."""
    if var_floor <= 0:
        raise ValueError("var_floor must be > 0")
    var_eff = np.maximum(np.asarray(var, dtype=np.float64), var_floor)
    resid = np.asarray(y, dtype=np.float64) - np.asarray(mean, dtype=np.float64)
    return -0.5 * (LOG_2PI + np.log(var_eff)) - resid**2 / (2.0 * var_eff)


def softmax(z, axis: int = -1) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def entropy(p, axis: int = -1) -> np.ndarray:
    """Shannon entropy with ``0 log 0 = 0``."""
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return -terms.sum(axis=axis)


def mean_probs(pred) -> np.ndarray:
    return _values(pred).mean(axis=-2)


def predictive_entropy(pred) -> np.ndarray:
    return entropy(mean_probs(pred))


def max_prob_score(pred) -> np.ndarray:
    """``1 - max_c pbar_c``."""
    return 1.0 - mean_probs(pred).max(axis=-1)


def bald(pred, check: bool = True) -> np.ndarray:
    """Mutual information: entropy of the mean minus the mean per-pass entropy.

    Values down to ``-1e-10`` are rounding and clamp to zero; with ``check``
    anything further out of ``[0, H(pbar)]`` raises ``ArithmeticError``.
    """
    v = _values(pred)
    total = entropy(v.mean(axis=-2))
    expected = entropy(v).mean(axis=-1)
    mi = total - expected
    if check and (np.any(mi < -1e-10) or np.any(mi > total + 1e-10)):
        raise ArithmeticError("BALD outside [0, H(mean)]")
    return np.clip(mi, 0.0, None)


def pass_votes(pred) -> np.ndarray:
    """Per-pass predicted class (argmax, ties to the lowest index)."""
    return np.argmax(_values(pred), axis=-1)


def variation_ratio(pred) -> np.ndarray:
    """``1 - (modal vote count) / T``."""
    v = _values(pred)
    votes = pass_votes(v)
    n_classes = v.shape[-1]
    counts = (votes[..., None] == np.arange(n_classes)).sum(axis=-2)
    return 1.0 - counts.max(axis=-1) / v.shape[-2]


MEASURES = {
    "bald": bald,
    "entropy": predictive_entropy,
    "max_prob": max_prob_score,
    "variation_ratio": variation_ratio,
}


def score(pred, measure: str = "bald") -> np.ndarray:
    try:
        return MEASURES[measure](pred)
    except KeyError:
        raise ValueError(f"unknown measure {measure!r}; choose from {sorted(MEASURES)}") from None


def run_inference(net: NetworkWeights, bank: MaskBank, x) -> EnsemblePrediction:
    """One Horvitz-Thompson masked pass per mask set; softmax for classifiers."""
    if len(bank) < 1:
        raise ValueError("mask bank is empty")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    outs = np.stack([forward_masked(net, x, masks) for masks in bank], axis=1)
    if net.spec.task == "classification":
        return EnsemblePrediction(softmax(outs), "classification")
    return EnsemblePrediction(outs[..., 0], "regression")


def run_ensemble_inference(members: Sequence[tuple[NetworkWeights, MaskBank]], x) -> EnsemblePrediction:
    """Concatenate the passes of several (network, bank) pairs."""
    if not members:
        raise ValueError("ensemble is empty")
    preds = [run_inference(net, bank, x) for net, bank in members]
    task = preds[0].task
    return EnsemblePrediction(np.concatenate([p.values for p in preds], axis=1), task)
