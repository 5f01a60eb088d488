"""Diversity-aware dropout masks for uncertainty estimation in MLPs.

Masks are drawn from Bernoulli, ridge-leverage, DPP or k-DPP samplers over
neuron correlation kernels and applied with Horvitz-Thompson reweighting.
"""

from divdrop.errors import (
    DegenerateKernel,
    DegenerateSampler,
    DivdropError,
    DivergedTraining,
    EmptyCalibration,
    IngestError,
    InvalidMask,
    InvalidMatrix,
    RankDeficient,
    ShapeError,
)
from divdrop.kernels import NeuronKernel, estimate_kernel, layer_kernels
from divdrop.masks import LayerMask, MaskBank, MaskSet
from divdrop.network import NetworkSpec, NetworkWeights, TrainConfig, forward_deterministic, forward_masked, train
from divdrop.numerics import eigh, elementary_symmetric, make_rng
from divdrop.samplers import SamplerConfig, build_mask_bank
from divdrop.uncertainty import EnsemblePrediction, bald, gaussian_loglik, mean_variance, run_inference

__version__ = "0.1.0"

__all__ = [
    "DegenerateKernel",
    "DegenerateSampler",
    "DivdropError",
    "DivergedTraining",
    "EmptyCalibration",
    "EnsemblePrediction",
    "IngestError",
    "InvalidMask",
    "InvalidMatrix",
    "LayerMask",
    "MaskBank",
    "MaskSet",
    "NetworkSpec",
    "NetworkWeights",
    "NeuronKernel",
    "RankDeficient",
    "SamplerConfig",
    "ShapeError",
    "TrainConfig",
    "bald",
    "build_mask_bank",
    "eigh",
    "elementary_symmetric",
    "estimate_kernel",
    "forward_deterministic",
    "forward_masked",
    "gaussian_loglik",
    "layer_kernels",
    "make_rng",
    "mean_variance",
    "run_inference",
    "train",
]
