"""Dropout mask distributions: Bernoulli, leverage scores, DPP and k-DPP.

Each sampler returns kept-neuron indicators together with the exact
marginal inclusion probabilities ``pi_j`` that the Horvitz-Thompson forward
pass divides by. DPP and k-DPP draws use the spectral algorithm: pick a set
of eigenvectors, then sample items one at a time from the projection DPP
they span, conditioning by a Gram-Schmidt (Cholesky-style) update so each
draw costs ``O(N k^2)`` after a single eigendecomposition.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping

import numba
import numpy as np

from divdrop.errors import DegenerateSampler, RankDeficient, ShapeError
from divdrop.kernels import KERNEL_KINDS, NeuronKernel
from divdrop.masks import LayerMask, MaskBank, bank_from_layers, stack_layer_masks
from divdrop.numerics import EIGEN_FLOOR, EigenDecomposition, eigh, elementary_symmetric, make_rng

SAMPLER_KINDS = ("bernoulli", "leverage", "dpp", "kdpp")
DEFAULT_KERNEL = {"bernoulli": None, "leverage": "correlation", "dpp": "correlation", "kdpp": "covariance"}
LEVERAGE_FLOOR = 1e-6


@dataclass(frozen=True)
class SamplerConfig:
    kind: str
    dropout_rate: float = 0.5
    ridge: float = 1.0
    kernel_kind: str | None = None
    max_attempts: int = 100
    rescale_leverage: bool = False
    name: str | None = None

    def __post_init__(self):
        if self.kind not in SAMPLER_KINDS:
            raise ValueError(f"sampler kind must be one of {SAMPLER_KINDS}, got {self.kind!r}")
        if not 0.0 < self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in (0, 1)")
        if self.ridge < 0:
            raise ValueError("ridge must be >= 0")
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        kernel = DEFAULT_KERNEL[self.kind] if self.kernel_kind is None else self.kernel_kind
        if self.kind == "bernoulli":
            kernel = None
        elif kernel not in KERNEL_KINDS:
            raise ValueError(f"kernel_kind must be one of {KERNEL_KINDS}")
        object.__setattr__(self, "kernel_kind", kernel)
        if self.name is None:
            object.__setattr__(self, "name", self.kind)

    def k_for(self, n: int) -> int:
        """Target k-DPP size ``(1-p) n`` rounded half-up, clamped to ``[1, n]``."""
        return int(min(max(np.floor((1.0 - self.dropout_rate) * n + 0.5), 1), n))

    def to_dict(self) -> dict:
        return asdict(self)


def _spectrum(kernel) -> EigenDecomposition:
    if isinstance(kernel, EigenDecomposition):
        return kernel
    if isinstance(kernel, NeuronKernel):
        return kernel.spectrum()
    return eigh(kernel)


@numba.njit(cache=True)
def _projection_draw(vs, u, out):
    """Sample from the projection DPP spanned by the orthonormal columns of ``vs``."""
    n, r = vs.shape
    norms = np.zeros(n)
    for i in range(n):
        acc = 0.0
        for c in range(r):
            acc += vs[i, c] * vs[i, c]
        norms[i] = acc
    chol = np.zeros((n, r))
    for it in range(r):
        total = 0.0
        for i in range(n):
            total += norms[i]
        if total <= 0.0:
            break
        target = u[it] * total
        acc = 0.0
        j = -1
        for i in range(n):
            if norms[i] > 0.0:
                acc += norms[i]
                j = i
                if acc >= target:
                    break
        out[j] = True
        nj = np.sqrt(norms[j])
        for i in range(n):
            kij = 0.0
            for c in range(r):
                kij += vs[i, c] * vs[j, c]
            for t in range(it):
                kij -= chol[i, t] * chol[j, t]
            chol[i, it] = kij / nj
        for i in range(n):
            norms[i] -= chol[i, it] * chol[i, it]
            if norms[i] < 0.0:
                norms[i] = 0.0
        norms[j] = 0.0


@numba.njit(cache=True)
def _dpp_batch(lam, vecs, u_sel, u_proj):
    size, n = u_sel.shape
    out = np.zeros((size, n), dtype=np.bool_)
    incl = lam / (1.0 + lam)
    for d in range(size):
        cols = np.flatnonzero(u_sel[d] < incl)
        if cols.size == 0:
            continue
        vs = np.ascontiguousarray(vecs[:, cols])
        _projection_draw(vs, u_proj[d], out[d])
    return out


@numba.njit(cache=True)
def _kdpp_batch(lam, vecs, esym, k, u_sel, u_proj):
    size, n = u_sel.shape
    out = np.zeros((size, n), dtype=np.bool_)
    cols = np.empty(k, dtype=np.int64)
    for d in range(size):
        rem = k
        i = n
        while rem > 0:
            if i == rem:
                marg = 1.0
            else:
                marg = lam[i - 1] * esym[rem - 1, i - 1] / esym[rem, i]
            if u_sel[d, i - 1] < marg:
                cols[k - rem] = i - 1
                rem -= 1
            i -= 1
        vs = np.ascontiguousarray(vecs[:, cols])
        _projection_draw(vs, u_proj[d], out[d])
    return out


def _with_rejection(draw, size: int, n: int, max_attempts: int, reject_empty: bool, what: str) -> np.ndarray:
    out = draw(size)
    if not reject_empty:
        return out
    pending = np.flatnonzero(~out.any(axis=1))
    attempts = 1
    while pending.size:
        if attempts >= max_attempts:
            raise DegenerateSampler(f"{what}: still empty after {max_attempts} attempts")
        out[pending] = draw(pending.size)
        pending = pending[~out[pending].any(axis=1)]
        attempts += 1
    return out


def draw_independent(probs, rng: np.random.Generator, size: int, max_attempts: int = 100, reject_empty: bool = True) -> np.ndarray:
    """``(size, N)`` independent Bernoulli(probs) indicators, empty rows redrawn."""
    probs = np.asarray(probs, dtype=np.float64)
    return _with_rejection(
        lambda m: rng.random((m, probs.size)) < probs, size, probs.size, max_attempts, reject_empty, "independent sampler"
    )


def bernoulli_marginals(n: int, p: float) -> np.ndarray:
    return np.full(n, 1.0 - p)


def sample_bernoulli(n: int, p: float, rng: np.random.Generator, layer: int = 0, max_attempts: int = 100) -> LayerMask:
    """MC-dropout mask: each neuron kept independently with probability ``1-p``."""
    if not 0.0 < p < 1.0:
        raise ValueError("dropout rate must lie in (0, 1)")
    marg = bernoulli_marginals(n, p)
    return LayerMask(layer, draw_independent(marg, rng, 1, max_attempts)[0], marg)


def leverage_scores(kernel, ridge: float = 1.0) -> np.ndarray:
    """Ridge leverage scores ``diag(C (C + ridge I)^{-1})`` from the spectrum."""
    if ridge <= 0:
        raise ValueError("ridge must be > 0")
    dec = _spectrum(kernel)
    lam = dec.clipped()
    return (dec.eigenvectors**2) @ (lam / (lam + ridge))


def leverage_marginals(kernel, ridge: float = 1.0, target_rate: float | None = None) -> np.ndarray:
    """Inclusion probabilities for leverage sampling.

    Scores are used as probabilities directly; with ``target_rate`` they are
    first rescaled so their mean equals it. Either way they are clamped to
    ``[1e-6, 1]``.
    """
    scores = leverage_scores(kernel, ridge)
    if target_rate is not None and scores.sum() > 0:
        scores = scores * (target_rate * scores.size / scores.sum())
    if np.all(scores < LEVERAGE_FLOOR):
        raise DegenerateSampler("all leverage scores fall below the probability floor")
    return np.clip(scores, LEVERAGE_FLOOR, 1.0)


def sample_leverage(kernel, ridge: float, rng: np.random.Generator, layer: int = 0, max_attempts: int = 100, target_rate: float | None = None) -> LayerMask:
    marg = leverage_marginals(kernel, ridge, target_rate)
    return LayerMask(layer, draw_independent(marg, rng, 1, max_attempts)[0], marg)


def dpp_marginals(kernel) -> np.ndarray:
    """Exact (unconditioned) DPP inclusion probabilities ``diag(L (L + I)^{-1})``."""
    return leverage_scores(kernel, 1.0)


def draw_dpp(kernel, rng: np.random.Generator, size: int, max_attempts: int = 100, reject_empty: bool = True) -> np.ndarray:
    """``(size, N)`` indicators of independent L-ensemble DPP draws."""
    dec = _spectrum(kernel)
    lam = dec.clipped()
    n = dec.n
    vecs = dec.eigenvectors

    def draw(m):
        u_sel = rng.random((m, n))
        u_proj = rng.random((m, n))
        return _dpp_batch(lam, vecs, u_sel, u_proj)

    return _with_rejection(draw, size, n, max_attempts, reject_empty, "DPP sampler")


def sample_dpp(kernel, rng: np.random.Generator, layer: int = 0, max_attempts: int = 100) -> LayerMask:
    return LayerMask(layer, draw_dpp(kernel, rng, 1, max_attempts)[0], dpp_marginals(kernel))


def _kdpp_prepare(dec: EigenDecomposition, k: int):
    lam = dec.clipped()
    rank = int(np.count_nonzero(lam))
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > rank:
        raise RankDeficient(f"k={k} exceeds the numerical rank {rank} of the kernel")
    # k-DPP probabilities are invariant to scaling L; keep the polynomials in range
    lam = lam / lam[lam > 0].mean()
    return lam, elementary_symmetric(lam, k)


def kdpp_marginals(kernel, k: int) -> np.ndarray:
    """Exact k-DPP inclusion probabilities.

    ``pi_j = sum_n u_{jn}^2 lam_n e_{k-1}(lam without n) / e_k(lam)``, with the
    leave-one-out polynomials built by the same recurrence for every ``n``.
    """
    dec = _spectrum(kernel)
    lam, esym = _kdpp_prepare(dec, k)
    n = lam.size
    loo = np.zeros((n, k))
    loo[:, 0] = 1.0
    for i in range(n):
        saved = loo[i].copy()
        loo[:, 1:] += lam[i] * loo[:, :-1]
        loo[i] = saved
    weights = lam * loo[:, k - 1] / esym[k, n]
    return np.clip((dec.eigenvectors**2) @ weights, 0.0, 1.0)


def draw_kdpp(kernel, k: int, rng: np.random.Generator, size: int) -> np.ndarray:
    """``(size, N)`` indicators of k-DPP draws; every row has exactly ``k`` ones."""
    dec = _spectrum(kernel)
    lam, esym = _kdpp_prepare(dec, k)
    u_sel = rng.random((size, dec.n))
    u_proj = rng.random((size, k))
    return _kdpp_batch(lam, dec.eigenvectors, esym, k, u_sel, u_proj)


def sample_kdpp(kernel, k: int, rng: np.random.Generator, layer: int = 0) -> LayerMask:
    return LayerMask(layer, draw_kdpp(kernel, k, rng, 1)[0], kdpp_marginals(kernel, k))


def clamp_k(config: SamplerConfig, kernel) -> int:
    """Configured k-DPP size clamped to the kernel's numerical rank."""
    dec = _spectrum(kernel)
    return max(1, min(config.k_for(dec.n), dec.rank(EIGEN_FLOOR)))


def draw_layer(config: SamplerConfig, n: int, kernel, rng: np.random.Generator, size: int):
    """Draw ``size`` masks for one layer; returns ``(kept, marginals)``."""
    if config.kind == "bernoulli":
        marg = bernoulli_marginals(n, config.dropout_rate)
        return draw_independent(marg, rng, size, config.max_attempts), marg
    if kernel is None:
        raise ValueError(f"sampler {config.kind!r} needs a kernel")
    if isinstance(kernel, NeuronKernel) and kernel.kind != config.kernel_kind:
        raise ValueError(f"sampler {config.name!r} expects a {config.kernel_kind} kernel, got {kernel.kind}")
    dec = _spectrum(kernel)
    if dec.n != n:
        raise ShapeError(f"kernel has size {dec.n}, layer has {n} neurons")
    if config.kind == "leverage":
        target = 1.0 - config.dropout_rate if config.rescale_leverage else None
        marg = leverage_marginals(dec, config.ridge, target)
        return draw_independent(marg, rng, size, config.max_attempts), marg
    if config.kind == "dpp":
        return draw_dpp(dec, rng, size, config.max_attempts), dpp_marginals(dec)
    k = clamp_k(config, dec)
    return draw_kdpp(dec, k, rng, size), kdpp_marginals(dec, k)


def build_mask_bank(net, kernels: Mapping[int, object] | None, config: SamplerConfig, T: int, seed: int) -> MaskBank:
    """Precompute ``T`` mask sets, one independent draw per dropout layer.

    ``net`` may be a ``NetworkSpec`` or ``NetworkWeights``. Layer ``h`` uses
    the random stream ``(seed, h)``, so a bank is a pure function of
    ``(config, seed, kernels)``.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    spec = getattr(net, "spec", net)
    kernels = kernels or {}
    per_layer = []
    for h, n in spec.dropout_sizes().items():
        kernel = kernels.get(h) if config.kind != "bernoulli" else None
        if config.kind != "bernoulli" and kernel is None:
            raise ValueError(f"no kernel supplied for dropout layer {h}")
        kept, marg = draw_layer(config, n, kernel, make_rng(seed, h), T)
        per_layer.append(stack_layer_masks(h, kept, marg))
    provenance = {"sampler": config.to_dict(), "seed": int(seed), "T": int(T)}
    return bank_from_layers(per_layer, config.name, provenance)
