"""Problem instances, the measurement map and error metrics."""

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .exceptions import DimensionError
from .operators import (
    EnsembleKind,
    LiftedBlockDiag,
    MeasurementEnsemble,
    apply_B,
    forward_rank1_all,
)

FORMAT_VERSION = 1


@dataclass
class BlockPair:
    """Stacked unknowns: ``h`` is ``(s, K)``, ``x`` is ``(s, N)``; row ``i`` is source ``i``."""

    h: np.ndarray
    x: np.ndarray

    def __post_init__(self):
        self.h = np.asarray(self.h, dtype=np.complex128)
        self.x = np.asarray(self.x, dtype=np.complex128)
        if self.h.ndim != 2 or self.x.ndim != 2 or self.h.shape[0] != self.x.shape[0]:
            raise DimensionError(
                f"h and x must be 2-D with equal block counts, got {self.h.shape}, {self.x.shape}"
            )

    @property
    def s(self):
        return self.h.shape[0]

    def check(self, ens):
        if self.h.shape != (ens.s, ens.K) or self.x.shape != (ens.s, ens.N):
            raise DimensionError(
                f"expected blocks h{(ens.s, ens.K)} x{(ens.s, ens.N)}, "
                f"got h{self.h.shape} x{self.x.shape}"
            )
        return self

    def lifted(self):
        return LiftedBlockDiag.from_pair(self.h, self.x)

    def copy(self):
        return BlockPair(self.h.copy(), self.x.copy())

    def stacked(self):
        """Flatten to the long vectors ``(h, x)`` in ``C^{Ks} x C^{Ns}``."""
        return self.h.ravel(), self.x.ravel()


@dataclass(frozen=True, eq=False)
class ProblemInstance:
    ensemble: MeasurementEnsemble
    truth: BlockPair
    d_i0: np.ndarray
    d_0: float
    kappa: float
    sigma: float
    e: np.ndarray
    y: np.ndarray
    seed: int = None
    scale_profile: tuple = None
    mu_h: float = field(default=None)


def _balanced_truth(h, x, scales):
    nh = np.linalg.norm(h, axis=1)
    nx = np.linalg.norm(x, axis=1)
    root = np.sqrt(np.asarray(scales, dtype=float))
    return h * (root / nh)[:, None], x * (root / nx)[:, None]


def _mu_h(ens, h0):
    Bh = apply_B(ens, h0)
    return float(np.max(math.sqrt(ens.L) * np.max(np.abs(Bh), axis=1)
                        / np.linalg.norm(h0, axis=1)))


def _assemble(ens, h0, x0, e, sigma, seed, profile):
    d_i0 = np.linalg.norm(h0, axis=1) * np.linalg.norm(x0, axis=1)
    for a in (h0, x0, e, d_i0):
        a.setflags(write=False)
    y = measure(ens, BlockPair(h0, x0), e)
    y.setflags(write=False)
    return ProblemInstance(
        ensemble=ens,
        truth=BlockPair(h0, x0),
        d_i0=d_i0,
        d_0=float(np.linalg.norm(d_i0)),
        kappa=float(d_i0.max() / d_i0.min()),
        sigma=float(sigma),
        e=e,
        y=y,
        seed=seed,
        scale_profile=None if profile is None else tuple(float(p) for p in profile),
        mu_h=_mu_h(ens, h0),
    )


def generate_instance(ens, scale_profile=None, sigma=0.0, seed=0):
    """Draw ground truth and noise, then form the observation.

    ``h_i0`` and ``x_i0`` are drawn CN(0, I) and rescaled so that
    ``||h_i0|| = ||x_i0|| = sqrt(scale_profile[i])``. With
    ``scale_profile=None`` each pair keeps its natural product
    ``||h_i0|| ||x_i0||`` and is only balanced. Noise is CN(0, sigma^2 d_0^2 / L).
    """
    if scale_profile is not None:
        profile = np.asarray(scale_profile, dtype=float)
        if profile.shape != (ens.s,) or np.any(~np.isfinite(profile)) or np.any(profile <= 0):
            raise ValueError(f"scale_profile must hold {ens.s} positive reals")
    if sigma < 0 or not np.isfinite(sigma):
        raise ValueError("sigma must be a finite non-negative real")
    truth_seq, noise_seq = np.random.SeedSequence(seed).spawn(2)
    g = np.random.default_rng(truth_seq)

    def cn(shape):
        return (g.standard_normal(shape) + 1j * g.standard_normal(shape)) * np.sqrt(0.5)

    h = cn((ens.s, ens.K))
    x = cn((ens.s, ens.N))
    if scale_profile is None:
        scales = np.linalg.norm(h, axis=1) * np.linalg.norm(x, axis=1)
    else:
        scales = profile
    h0, x0 = _balanced_truth(h, x, scales)
    d_0 = float(np.linalg.norm(scales))
    if sigma > 0:
        gn = np.random.default_rng(noise_seq)
        std = sigma * d_0 / math.sqrt(2 * ens.L)
        e = std * (gn.standard_normal(ens.L) + 1j * gn.standard_normal(ens.L))
    else:
        e = np.zeros(ens.L, dtype=np.complex128)
    return _assemble(ens, h0, x0, e, sigma, seed, scale_profile)


def instance_from_truth(ens, h0, x0, e=None, sigma=0.0, seed=None):
    """Build an instance from a user-supplied truth, rebalancing if needed."""
    pair = BlockPair(h0, x0).check(ens)
    nh = np.linalg.norm(pair.h, axis=1)
    nx = np.linalg.norm(pair.x, axis=1)
    if np.any(nh == 0) or np.any(nx == 0):
        raise ValueError("ground-truth blocks must be nonzero")
    h0, x0 = pair.h.copy(), pair.x.copy()
    if not np.allclose(nh, nx, rtol=1e-12, atol=0):
        warnings.warn("ground truth is not balanced; rescaling so ||h_i0|| = ||x_i0||",
                      stacklevel=2)
        h0, x0 = _balanced_truth(h0, x0, nh * nx)
    if e is None:
        e = np.zeros(ens.L, dtype=np.complex128)
    e = np.array(e, dtype=np.complex128)
    if e.shape != (ens.L,):
        raise DimensionError(f"noise must have length L={ens.L}")
    return _assemble(ens, h0, x0, e, sigma, seed, None)


def measure(ens, z, e=None):
    """``sum_i diag(B h_i) conj(A_i x_i) + e``."""
    z.check(ens)
    y = forward_rank1_all(ens, z.h, z.x).sum(axis=0)
    if e is not None:
        y = y + e
    return y


def _block_diff_norms(h, x, h0, x0):
    """Per-block ``||h_i x_i^* - h_i0 x_i0^*||_F`` without forming K x N matrices.

    The difference equals ``[h, h0] diag(1, -1) [x, x0]^*``; after thin QR
    of both ``K x 2`` and ``N x 2`` factors the norm is that of a tiny core,
    which avoids the cancellation of the expanded Gram formula near zero.
    """
    U = np.stack([h, h0], axis=-1)
    V = np.stack([x, x0], axis=-1)
    Ru = np.linalg.qr(U, mode="r")
    Rv = np.linalg.qr(V, mode="r")
    core = Ru * np.array([1.0, -1.0]) @ np.conj(np.swapaxes(Rv, -1, -2))
    return np.linalg.norm(core, axis=(-2, -1))


def block_errors(z, inst):
    """Absolute per-block Frobenius errors as an ``(s,)`` array."""
    t = inst.truth
    return _block_diff_norms(z.h, z.x, t.h, t.x)


def relative_error(z, inst):
    """Global relative error ``||H(h, x) - H(h0, x0)||_F / d_0``."""
    z.check(inst.ensemble)
    return float(np.linalg.norm(block_errors(z, inst)) / inst.d_0)


def per_block_error(z, inst, i):
    """Relative error of block ``i`` normalised by ``d_i0``."""
    z.check(inst.ensemble)
    if not 0 <= i < z.s:
        raise DimensionError(f"block index {i} out of range")
    t = inst.truth
    err = _block_diff_norms(z.h[i : i + 1], z.x[i : i + 1], t.h[i : i + 1], t.x[i : i + 1])
    return float(err[0] / inst.d_i0[i])


def snr_db(inst):
    """``20 log10(||y|| / ||e||)``; ``inf`` for a noiseless instance."""
    ne = np.linalg.norm(inst.e)
    if ne == 0:
        return math.inf
    return 20.0 * math.log10(np.linalg.norm(inst.y) / ne)


def incoherence_mu_h(inst):
    """``max_i sqrt(L) ||B h_i0||_inf / ||h_i0||``."""
    return _mu_h(inst.ensemble, inst.truth.h)


def sigma_for_snr(snr):
    """Noise level whose expected SNR (in dB) is ``snr``.

    Uses ``||y||^2 ~ (1 + sigma^2) d_0^2`` and ``||e||^2 ~ sigma^2 d_0^2``.
    """
    ratio = 10.0 ** (snr / 10.0)
    if ratio <= 1.0:
        raise ValueError("SNR must be positive in dB")
    return 1.0 / math.sqrt(ratio - 1.0)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def save_instance(inst, path):
    """Write an instance to a ``.npz`` container with a JSON metadata record."""
    ens = inst.ensemble
    meta = {
        "format_version": FORMAT_VERSION,
        "L": ens.L, "K": ens.K, "N": ens.N, "s": ens.s,
        "kind": ens.kind.value,
        "ensemble_seed": ens.seed,
        "seed": inst.seed,
        "sigma": inst.sigma,
        "scale_profile": None if inst.scale_profile is None else list(inst.scale_profile),
    }
    arrays = {"h0": inst.truth.h, "x0": inst.truth.x, "e": inst.e, "y": inst.y}
    if ens.kind is EnsembleKind.GAUSSIAN:
        arrays["matrices"] = ens.matrices
    else:
        arrays["signs"] = ens.signs
        arrays["hadamard"] = ens.hadamard
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta, sort_keys=True)), **arrays)


def load_instance(path):
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if meta.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported instance format {meta.get('format_version')}")
        kind = EnsembleKind(meta["kind"])
        common = dict(L=meta["L"], K=meta["K"], N=meta["N"], s=meta["s"], kind=kind,
                      seed=meta["ensemble_seed"])
        if kind is EnsembleKind.GAUSSIAN:
            m = data["matrices"]
            m.setflags(write=False)
            ens = MeasurementEnsemble(matrices=m, **common)
        else:
            sg, hd = data["signs"], data["hadamard"]
            sg.setflags(write=False)
            hd.setflags(write=False)
            ens = MeasurementEnsemble(signs=sg, hadamard=hd, **common)
        h0, x0, e, y = data["h0"], data["x0"], data["e"], data["y"]
    inst = _assemble(ens, h0, x0, e, meta["sigma"], meta["seed"], meta["scale_profile"])
    if not np.array_equal(inst.y, y):
        raise ValueError("stored observation does not match the reconstructed measurement")
    return inst
