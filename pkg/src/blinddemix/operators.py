"""Structured measurement operators.

The channel subspace is spanned by the first ``K`` columns of the unitary
``L``-point DFT, written ``B`` below. ``B`` is never formed; it is applied
through zero-padded FFTs with ``norm="ortho"``. Source ``i`` is encoded by
an ``L x N`` matrix ``A_i``, either stored densely (complex Gaussian) or
described by a sign vector and a shared partial Hadamard matrix
(``A_i = F diag(d_i) H``).

For a ``K x N`` matrix ``Z`` the lifted measurement of source ``i`` has
entries ``b_l^* Z a_il`` where ``b_l^*`` is row ``l`` of ``B`` and ``a_il^*``
is row ``l`` of ``A_i``. For a rank-one ``Z = h x^*`` this is
``(B h) * conj(A_i x)``.
"""

from dataclasses import dataclass
from enum import Enum
from functools import cached_property

import numpy as np
import scipy.linalg

from . import _kernels
from .exceptions import ConvergenceError, DimensionError


class EnsembleKind(str, Enum):
    GAUSSIAN = "gaussian"
    HADAMARD = "hadamard"


def _is_pow2(n):
    return n >= 1 and (n & (n - 1)) == 0


def _readonly(a):
    a = np.array(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class MeasurementEnsemble:
    """Immutable bundle of the operators for one demixing problem.

    Attributes
    ----------
    L, K, N, s : int
        Measurements, channel dimension, signal dimension, number of sources.
    kind : EnsembleKind
    matrices : ndarray or None
        ``(s, L, N)`` complex encoding matrices (Gaussian kind).
    signs : ndarray or None
        ``(s, L)`` diagonal of each ``D_i`` (Hadamard kind).
    hadamard : ndarray or None
        Shared ``(L, N)`` partial Sylvester Hadamard matrix with +-1 entries.
    seed : int or None
        Seed the ensemble was drawn from, if any.
    """

    L: int
    K: int
    N: int
    s: int
    kind: EnsembleKind
    matrices: np.ndarray = None
    signs: np.ndarray = None
    hadamard: np.ndarray = None
    seed: int = None

    def __post_init__(self):
        for name in ("L", "K", "N", "s"):
            if int(getattr(self, name)) < 1:
                raise DimensionError(f"{name} must be a positive integer")
        if self.K > self.L:
            raise DimensionError(f"K={self.K} exceeds L={self.L}")
        if self.kind is EnsembleKind.GAUSSIAN:
            if self.matrices is None or self.matrices.shape != (self.s, self.L, self.N):
                raise DimensionError("Gaussian ensemble needs (s, L, N) matrices")
        else:
            if not (_is_pow2(self.L) and _is_pow2(self.N)) or self.N > self.L:
                raise DimensionError("Hadamard ensemble needs powers of two with N <= L")
            if self.signs is None or self.signs.shape != (self.s, self.L):
                raise DimensionError("Hadamard ensemble needs (s, L) sign vectors")

    @classmethod
    def from_matrices(cls, matrices, K, seed=None):
        """Wrap explicit ``(s, L, N)`` encoding matrices (treated as dense)."""
        m = np.asarray(matrices, dtype=np.complex128)
        if m.ndim == 2:
            m = m[None]
        s, L, N = m.shape
        return cls(L=L, K=K, N=N, s=s, kind=EnsembleKind.GAUSSIAN,
                   matrices=_readonly(m), seed=seed)

    @cached_property
    def dense_matrices(self):
        """All encoding matrices as one ``(s, L, N)`` array."""
        if self.kind is EnsembleKind.GAUSSIAN:
            return self.matrices
        cols = self.signs[:, :, None] * self.hadamard[None, :, :]
        return _readonly(np.fft.fft(cols, axis=1, norm="ortho"))

    def encoding_matrix(self, i):
        self._check_index(i)
        return self.dense_matrices[i]

    def _check_index(self, i):
        if not 0 <= i < self.s:
            raise DimensionError(f"source index {i} out of range for s={self.s}")

    # -- batched encoders, rows are sources ---------------------------------

    def apply_A(self, x):
        """Return ``A_i x_i`` for every source; ``x`` has shape ``(s, N)``."""
        x = np.asarray(x)
        if x.shape != (self.s, self.N):
            raise DimensionError(f"expected x of shape {(self.s, self.N)}, got {x.shape}")
        if self.kind is EnsembleKind.GAUSSIAN:
            return np.einsum("sln,sn->sl", self.matrices, x)
        padded = np.zeros((self.s, self.L), dtype=np.complex128)
        padded[:, : self.N] = x
        return np.fft.fft(self.signs * _kernels.fwht(padded), axis=-1, norm="ortho")

    def apply_A_adjoint(self, w):
        """Return ``A_i^* w_i`` for every source; ``w`` has shape ``(s, L)``."""
        w = np.asarray(w)
        if w.shape != (self.s, self.L):
            raise DimensionError(f"expected w of shape {(self.s, self.L)}, got {w.shape}")
        if self.kind is EnsembleKind.GAUSSIAN:
            return np.einsum("sln,sl->sn", self.matrices.conj(), w)
        v = self.signs * np.fft.ifft(w, axis=-1, norm="ortho")
        return _kernels.fwht(v)[:, : self.N]

    def apply_A_i(self, x, i):
        self._check_index(i)
        x = np.asarray(x)
        if x.shape != (self.N,):
            raise DimensionError(f"expected x of length {self.N}, got shape {x.shape}")
        if self.kind is EnsembleKind.GAUSSIAN:
            return self.matrices[i] @ x
        padded = np.zeros((1, self.L), dtype=np.complex128)
        padded[0, : self.N] = x
        return np.fft.fft(self.signs[i] * _kernels.fwht(padded)[0], norm="ortho")

    def apply_A_i_adjoint(self, w, i):
        self._check_index(i)
        w = np.asarray(w)
        if w.shape != (self.L,):
            raise DimensionError(f"expected w of length {self.L}, got shape {w.shape}")
        if self.kind is EnsembleKind.GAUSSIAN:
            return self.matrices[i].conj().T @ w
        v = self.signs[i] * np.fft.ifft(w, norm="ortho")
        return _kernels.fwht(v[None, :])[0, : self.N]


@dataclass(frozen=True, eq=False)
class LiftedBlockDiag:
    """Block-diagonal ``Ks x Ns`` matrix stored as ``s`` dense ``K x N`` blocks."""

    blocks: np.ndarray

    def __post_init__(self):
        if np.ndim(self.blocks) != 3:
            raise DimensionError("blocks must have shape (s, K, N)")

    @classmethod
    def from_pair(cls, h, x):
        """The lifted matrix ``H(h, x)`` with block ``i`` equal to ``h_i x_i^*``."""
        h = np.asarray(h, dtype=np.complex128)
        x = np.asarray(x, dtype=np.complex128)
        return cls(np.einsum("sk,sn->skn", h, x.conj()))

    @classmethod
    def zeros(cls, s, K, N):
        return cls(np.zeros((s, K, N), dtype=np.complex128))

    @property
    def shape(self):
        return self.blocks.shape

    def frobenius_norm(self):
        return float(np.linalg.norm(self.blocks.ravel()))

    def inner(self, other):
        """Trace inner product ``<self, other> = tr(other^* self)``."""
        return complex(np.vdot(other.blocks.ravel(), self.blocks.ravel()))

    def to_dense(self):
        return scipy.linalg.block_diag(*self.blocks)

    def __add__(self, other):
        return LiftedBlockDiag(self.blocks + other.blocks)

    def __sub__(self, other):
        return LiftedBlockDiag(self.blocks - other.blocks)

    def __mul__(self, alpha):
        return LiftedBlockDiag(alpha * self.blocks)

    __rmul__ = __mul__


# ---------------------------------------------------------------------------
# The partial DFT
# ---------------------------------------------------------------------------


def apply_B(ens, h):
    """Apply ``B`` along the last axis: zero-pad to ``L`` then unitary FFT."""
    h = np.asarray(h)
    if h.shape[-1] != ens.K:
        raise DimensionError(f"expected trailing dimension K={ens.K}, got {h.shape[-1]}")
    return np.fft.fft(h, n=ens.L, axis=-1, norm="ortho")


def apply_B_adjoint(ens, z):
    """Apply ``B^*`` along the last axis: unitary inverse FFT, keep ``K`` entries."""
    z = np.asarray(z)
    if z.shape[-1] != ens.L:
        raise DimensionError(f"expected trailing dimension L={ens.L}, got {z.shape[-1]}")
    return np.fft.ifft(z, axis=-1, norm="ortho")[..., : ens.K]


# ---------------------------------------------------------------------------
# Per-source lifted operators
# ---------------------------------------------------------------------------


def _check_block(ens, Z):
    Z = np.asarray(Z)
    if Z.shape != (ens.K, ens.N):
        raise DimensionError(f"expected a {ens.K}x{ens.N} block, got {Z.shape}")
    return Z


def _check_vec(v, n, what):
    v = np.asarray(v)
    if v.shape != (n,):
        raise DimensionError(f"expected {what} of length {n}, got shape {v.shape}")
    return v


def lift_forward_i(ens, Z, i):
    """General lifted measurement ``{b_l^* Z a_il}_l`` for an arbitrary block."""
    Z = _check_block(ens, Z)
    A = ens.encoding_matrix(i)
    BZ = np.fft.fft(Z, n=ens.L, axis=0, norm="ortho")
    return np.sum(BZ * A.conj(), axis=1)


def lift_forward_rank1(ens, h, x, i):
    """Lifted measurement of ``h x^*`` without forming the outer product."""
    h = _check_vec(h, ens.K, "h")
    x = _check_vec(x, ens.N, "x")
    return apply_B(ens, h) * np.conj(ens.apply_A_i(x, i))


def lift_adjoint_i(ens, z, i):
    """Dense ``K x N`` matrix ``B^* diag(z) A_i``."""
    z = _check_vec(z, ens.L, "z")
    A = ens.encoding_matrix(i)
    return np.fft.ifft(z[:, None] * A, axis=0, norm="ortho")[: ens.K]


def lift_adjoint_apply_right(ens, z, x, i):
    """``lift_adjoint_i(z, i) @ x`` computed as ``B^*(z * A_i x)``."""
    z = _check_vec(z, ens.L, "z")
    x = _check_vec(x, ens.N, "x")
    return apply_B_adjoint(ens, z * ens.apply_A_i(x, i))


def lift_adjoint_apply_left(ens, z, h, i):
    """``lift_adjoint_i(z, i)^* @ h`` computed as ``A_i^*(conj(z) * B h)``."""
    z = _check_vec(z, ens.L, "z")
    h = _check_vec(h, ens.K, "h")
    return ens.apply_A_i_adjoint(np.conj(z) * apply_B(ens, h), i)


# ---------------------------------------------------------------------------
# Block-diagonal operator and its adjoint
# ---------------------------------------------------------------------------


def _blocks_of(ens, X):
    blocks = X.blocks if isinstance(X, LiftedBlockDiag) else np.asarray(X)
    if blocks.shape != (ens.s, ens.K, ens.N):
        raise DimensionError(f"expected blocks {(ens.s, ens.K, ens.N)}, got {blocks.shape}")
    return blocks


def forward(ens, X):
    """``A(X) = sum_i A_i(X_i)`` for a block-diagonal ``X``."""
    blocks = _blocks_of(ens, X)
    BZ = np.fft.fft(blocks, n=ens.L, axis=1, norm="ortho")
    return np.einsum("sln,sln->l", BZ, ens.dense_matrices.conj())


def adjoint(ens, z):
    """``A^*(z)`` as a :class:`LiftedBlockDiag` with block ``i = A_i^*(z)``."""
    z = _check_vec(z, ens.L, "z")
    scaled = z[None, :, None] * ens.dense_matrices
    return LiftedBlockDiag(np.fft.ifft(scaled, axis=1, norm="ortho")[:, : ens.K, :])


def forward_rank1_all(ens, h, x):
    """Per-source rank-one measurements as an ``(s, L)`` array.

    ``h`` is ``(s, K)`` and ``x`` is ``(s, N)``; summing over rows gives
    ``A(H(h, x))``.
    """
    return apply_B(ens, h) * np.conj(ens.apply_A(x))


def operator_norm_estimate(ens, tol=1e-8, max_iter=5000, seed=0):
    """Estimate ``||A||`` by power iteration on ``A^* A``.

    Iterates until successive Rayleigh quotients agree to ``tol`` (relative)
    and returns the square root of the final quotient.

    Raises
    ------
    ConvergenceError
        If ``max_iter`` is reached; ``last`` holds the current estimate.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    rng = np.random.default_rng(seed)
    shape = (ens.s, ens.K, ens.N)
    Z = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    Z /= np.linalg.norm(Z)
    prev = None
    for it in range(1, max_iter + 1):
        W = adjoint(ens, forward(ens, Z)).blocks
        rq = float(np.real(np.vdot(Z, W)))
        nrm = np.linalg.norm(W)
        if nrm == 0.0:
            return 0.0
        if prev is not None and abs(rq - prev) < tol * max(rq, np.finfo(float).tiny):
            return float(np.sqrt(rq))
        prev = rq
        Z = W / nrm
    raise ConvergenceError(
        f"power iteration did not converge in {max_iter} iterations",
        last=float(np.sqrt(prev)), iterations=max_iter,
    )


def make_ensemble(L, K, N, s, kind="gaussian", seed=0):
    """Draw a measurement ensemble deterministically from ``seed``.

    Gaussian entries are CN(0, 1): real and imaginary parts independent with
    variance 1/2. The Hadamard kind uses one shared Sylvester matrix (first
    ``N`` columns, +-1 entries, so column norms are ``sqrt(L)``) and an
    independent random sign diagonal per source. Each source draws from its
    own child stream of ``SeedSequence(seed)``.
    """
    kind = EnsembleKind(kind)
    for name, v in (("L", L), ("K", K), ("N", N), ("s", s)):
        if int(v) != v or v < 1:
            raise DimensionError(f"{name} must be a positive integer, got {v!r}")
    L, K, N, s = int(L), int(K), int(N), int(s)
    streams = [np.random.default_rng(c) for c in np.random.SeedSequence(seed).spawn(s)]
    if kind is EnsembleKind.GAUSSIAN:
        if K > L:
            raise DimensionError(f"K={K} exceeds L={L}")
        mats = np.empty((s, L, N), dtype=np.complex128)
        for i, g in enumerate(streams):
            mats[i].real = g.standard_normal((L, N))
            mats[i].imag = g.standard_normal((L, N))
        mats *= np.sqrt(0.5)
        return MeasurementEnsemble(L=L, K=K, N=N, s=s, kind=kind,
                                   matrices=_readonly(mats), seed=seed)
    if not (_is_pow2(L) and _is_pow2(N)) or N > L:
        raise DimensionError("Hadamard ensemble needs L, N powers of two with N <= L")
    signs = np.stack([g.choice(np.array([-1.0, 1.0]), size=L) for g in streams])
    had = scipy.linalg.hadamard(L).astype(np.float64)[:, :N]
    return MeasurementEnsemble(L=L, K=K, N=N, s=s, kind=kind, signs=_readonly(signs),
                               hadamard=_readonly(had), seed=seed)
