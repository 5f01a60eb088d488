"""Dense symmetric linear algebra and reproducible random streams.

Everything here runs in float64. The eigensolver is a cyclic Jacobi method
(Brent-Luk parallel ordering) compiled with numba; it is slower than LAPACK but accurate to rounding and
fully self-contained, which matters for the determinant ratios used by the
DPP samplers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from divdrop.errors import InvalidMatrix

_MASK64 = (1 << 64) - 1

# Rank decisions and lambda/(1+lambda) computations treat anything smaller as zero.
EIGEN_FLOOR = 1e-12


def as_symmetric(a) -> np.ndarray:
    """Return ``(A + A^T) / 2`` as a fresh float64 array.

    Raises ``InvalidMatrix`` for non-square, empty or non-finite input.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 1:
        raise InvalidMatrix(f"expected a non-empty square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidMatrix("matrix contains non-finite entries")
    return 0.5 * (a + a.T)


@dataclass(frozen=True)
class EigenDecomposition:
    """Eigenpairs of a symmetric matrix, eigenvalues ascending."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    @property
    def n(self) -> int:
        return self.eigenvalues.shape[0]

    def reconstruct(self) -> np.ndarray:
        v = self.eigenvectors
        return (v * self.eigenvalues) @ v.T

    def clipped(self, floor: float = EIGEN_FLOOR) -> np.ndarray:
        """Eigenvalues with everything below ``floor`` set to exactly zero."""
        lam = self.eigenvalues.copy()
        lam[lam < floor] = 0.0
        return lam

    def rank(self, floor: float = EIGEN_FLOOR) -> int:
        return int(np.count_nonzero(self.eigenvalues > floor))


@numba.njit(cache=True)
def _round_robin(n):
    """Brent-Luk tournament ordering: each round pairs every index once."""
    m = n + (n % 2)
    players = np.arange(m)
    rounds = np.full((m - 1, m // 2, 2), -1, dtype=np.int64)
    for r in range(m - 1):
        for i in range(m // 2):
            p = players[i]
            q = players[m - 1 - i]
            if p < n and q < n:
                rounds[r, i, 0] = min(p, q)
                rounds[r, i, 1] = max(p, q)
        last = players[m - 1]
        for i in range(m - 1, 1, -1):
            players[i] = players[i - 1]
        players[1] = last
    return rounds


@numba.njit(cache=True)
def _jacobi_sweeps(a, max_sweeps):
    n = a.shape[0]
    A = a.copy()
    Vt = np.eye(n)
    if n == 1:
        return A[0].copy(), Vt, 0
    rounds = _round_robin(n)
    npairs = rounds.shape[1]
    cos = np.ones(npairs)
    sin = np.zeros(npairs)
    sweeps = 0
    for sweep in range(max_sweeps):
        off = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                off += A[p, q] * A[p, q]
        if off == 0.0:
            break
        sweeps = sweep + 1
        for r in range(rounds.shape[0]):
            active = 0
            for i in range(npairs):
                p = rounds[r, i, 0]
                q = rounds[r, i, 1]
                cos[i] = 1.0
                sin[i] = 0.0
                if p < 0:
                    continue
                apq = A[p, q]
                if apq == 0.0:
                    continue
                app = A[p, p]
                aqq = A[q, q]
                g = 100.0 * abs(apq)
                # off-diagonal below rounding of both diagonal entries: drop it
                if sweep > 3 and abs(app) + g == abs(app) and abs(aqq) + g == abs(aqq):
                    A[p, q] = 0.0
                    A[q, p] = 0.0
                    continue
                tau = (aqq - app) / (2.0 * apq)
                sgn = 1.0 if tau >= 0.0 else -1.0
                t = sgn / (abs(tau) + np.hypot(1.0, tau))
                c = 1.0 / np.sqrt(1.0 + t * t)
                cos[i] = c
                sin[i] = t * c
                active += 1
            if active == 0:
                continue
            # rows: A <- J^T A, Vt <- J^T Vt
            for i in range(npairs):
                if sin[i] == 0.0:
                    continue
                p = rounds[r, i, 0]
                q = rounds[r, i, 1]
                c = cos[i]
                s = sin[i]
                for k in range(n):
                    apk = A[p, k]
                    aqk = A[q, k]
                    A[p, k] = c * apk - s * aqk
                    A[q, k] = s * apk + c * aqk
                    vpk = Vt[p, k]
                    vqk = Vt[q, k]
                    Vt[p, k] = c * vpk - s * vqk
                    Vt[q, k] = s * vpk + c * vqk
            # columns: A <- A J, row by row
            for k in range(n):
                for i in range(npairs):
                    if sin[i] == 0.0:
                        continue
                    p = rounds[r, i, 0]
                    q = rounds[r, i, 1]
                    c = cos[i]
                    s = sin[i]
                    akp = A[k, p]
                    akq = A[k, q]
                    A[k, p] = c * akp - s * akq
                    A[k, q] = s * akp + c * akq
            for i in range(npairs):
                if sin[i] != 0.0:
                    p = rounds[r, i, 0]
                    q = rounds[r, i, 1]
                    A[p, q] = 0.0
                    A[q, p] = 0.0
    w = np.empty(n)
    for i in range(n):
        w[i] = A[i, i]
    return w, Vt.T.copy(), sweeps


def eigh(a, max_sweeps: int = 100) -> EigenDecomposition:
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    The input is symmetrized first. Eigenvalues come back in ascending
    order with the matching orthonormal eigenvectors as columns.
    """
    sym = as_symmetric(a)
    w, v, _ = _jacobi_sweeps(sym, max_sweeps)
    order = np.argsort(w, kind="stable")
    return EigenDecomposition(eigenvalues=w[order], eigenvectors=np.ascontiguousarray(v[:, order]))


def elementary_symmetric(lam, k_max: int) -> np.ndarray:
    """Table ``e[k, n]`` of elementary symmetric polynomials.

    ``e[k, n]`` is the k-th polynomial of the first ``n`` entries of ``lam``,
    for ``0 <= k <= k_max`` and ``0 <= n <= len(lam)``. Filled with the usual
    recurrence ``e[k, n] = e[k, n-1] + lam[n-1] * e[k-1, n-1]``.
    """
    lam = np.asarray(lam, dtype=np.float64).ravel()
    n = lam.shape[0]
    if k_max < 0 or k_max > n:
        raise ValueError(f"k_max must lie in [0, {n}], got {k_max}")
    e = np.zeros((k_max + 1, n + 1))
    e[0, :] = 1.0
    for i in range(1, n + 1):
        e[1:, i] = e[1:, i - 1] + lam[i - 1] * e[:-1, i - 1]
    return e


def project_psd(a, floor: float = 0.0) -> np.ndarray:
    """Clip the spectrum of a symmetric matrix from below at ``floor``.

    Matrices whose eigenvalues already satisfy the bound come back unchanged
    (after symmetrization).
    """
    if floor < 0:
        raise ValueError("floor must be non-negative")
    sym = as_symmetric(a)
    dec = eigh(sym)
    if dec.eigenvalues[0] >= floor:
        return sym
    lam = np.maximum(dec.eigenvalues, floor)
    v = dec.eigenvectors
    return as_symmetric((v * lam) @ v.T)


@dataclass(frozen=True)
class RngStream:
    """A (seed, stream id) pair naming one reproducible random sequence.

    Backed by numpy's Philox4x64 counter-based generator with the two
    64-bit words of its key set to the seed and the stream id, so the
    sequence depends only on those two integers.
    """

    seed: int
    stream_id: int = 0

    def __post_init__(self):
        if not (0 <= self.seed <= _MASK64 and 0 <= self.stream_id <= _MASK64):
            raise ValueError("seed and stream id must be unsigned 64-bit integers")

    def generator(self) -> np.random.Generator:
        key = np.array([self.seed & _MASK64, self.stream_id & _MASK64], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))


def make_rng(seed: int, stream_id: int = 0) -> np.random.Generator:
    return RngStream(seed, stream_id).generator()


def derive_seed(seed: int, *keys: int) -> int:
    """Mix a base seed with integer keys into a new 64-bit seed."""
    ss = np.random.SeedSequence(entropy=seed & _MASK64, spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint64)[0])
