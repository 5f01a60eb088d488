"""Neuron correlation / covariance kernels estimated from hidden activations."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from divdrop.errors import DegenerateKernel, EmptyCalibration, ShapeError
from divdrop.network import NetworkWeights, hidden_outputs
from divdrop.numerics import EigenDecomposition, as_symmetric, eigh, project_psd

KERNEL_KINDS = ("correlation", "covariance")
DEAD_RELATIVE_STD = 1e-8


@dataclass(frozen=True, eq=False)
class ActivationSample:
    layer: int
    rows: np.ndarray

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.float64)
        if rows.ndim != 2:
            raise ShapeError("activation rows must be a 2-D array")
        if not np.all(np.isfinite(rows)):
            raise ValueError("activations contain non-finite values")
        object.__setattr__(self, "rows", rows)


@dataclass(frozen=True, eq=False)
class NeuronKernel:
    """Symmetric PSD kernel over the neurons of one hidden layer."""

    layer: int
    kind: str
    matrix: np.ndarray
    dead: tuple[int, ...] = ()
    _spectrum: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise ValueError(f"kernel kind must be one of {KERNEL_KINDS}")
        object.__setattr__(self, "matrix", as_symmetric(self.matrix))

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    def spectrum(self) -> EigenDecomposition:
        if not self._spectrum:
            self._spectrum.append(eigh(self.matrix))
        return self._spectrum[0]


def capture_activations(net: NetworkWeights, calibration, layer: int) -> ActivationSample:
    """Dropout-free outputs of hidden ``layer`` for every calibration row."""
    x = np.asarray(calibration, dtype=np.float64)
    if x.size == 0 or x.shape[0] == 0:
        raise EmptyCalibration("calibration set is empty")
    if layer not in net.spec.dropout_layers:
        raise ShapeError(f"layer {layer} carries no dropout (dropout layers: {net.spec.dropout_layers})")
    return ActivationSample(layer, hidden_outputs(net, x, layer))


def estimate_kernel(sample: ActivationSample, kind: str = "correlation") -> NeuronKernel:
    """Empirical covariance (divisor n-1) or correlation of the activation columns.

    Neurons whose standard deviation falls below ``1e-8`` times the largest
    one are reported as dead; in a correlation kernel they get a unit
    diagonal and zero off-diagonals. The result is projected onto the PSD
    cone, and correlation kernels are rescaled back to a unit diagonal.
    """
    if kind not in KERNEL_KINDS:
        raise ValueError(f"kernel kind must be one of {KERNEL_KINDS}")
    rows = sample.rows
    if rows.shape[0] < 2:
        raise EmptyCalibration("need at least two calibration rows to estimate a kernel")
    centered = rows - rows.mean(axis=0)
    cov = centered.T @ centered / (rows.shape[0] - 1)
    std = np.sqrt(np.maximum(np.diag(cov), 0.0))
    top = std.max()
    if not np.isfinite(top) or top <= 0:
        raise DegenerateKernel(f"layer {sample.layer}: every neuron is constant on the calibration set")
    dead = std < DEAD_RELATIVE_STD * top
    if kind == "covariance":
        mat = project_psd(cov, 0.0)
    else:
        live_std = np.where(dead, 1.0, std)
        corr = cov / np.outer(live_std, live_std)
        corr[dead, :] = 0.0
        corr[:, dead] = 0.0
        np.fill_diagonal(corr, 1.0)
        mat = project_psd(np.clip(corr, -1.0, 1.0), 0.0)
        d = np.sqrt(np.diag(mat))
        mat = np.clip(mat / np.outer(d, d), -1.0, 1.0)
        np.fill_diagonal(mat, 1.0)
    return NeuronKernel(sample.layer, kind, mat, tuple(int(i) for i in np.flatnonzero(dead)))


def layer_kernels(net: NetworkWeights, calibration, kind: str) -> dict[int, NeuronKernel]:
    """One kernel per dropout layer of ``net``."""
    return {
        h: estimate_kernel(capture_activations(net, calibration, h), kind) for h in net.spec.dropout_layers
    }


def save_kernel_csv(kernel: NeuronKernel, path) -> None:
    np.savetxt(Path(path), kernel.matrix, delimiter=",", fmt="%.17g")


def load_kernel_csv(path, layer: int, kind: str) -> NeuronKernel:
    mat = np.loadtxt(Path(path), delimiter=",", ndmin=2)
    return NeuronKernel(layer, kind, mat)
