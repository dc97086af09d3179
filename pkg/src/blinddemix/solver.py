"""Regularized Wirtinger gradient descent.

The objective is ``F + G`` with ``F(h, x) = ||A(H(h, x)) - y||^2`` and the
regularizer

    G = rho * sum_i [ G0(||h_i||^2 / 2d_i) + G0(||x_i||^2 / 2d_i)
                      + sum_l G0(L |b_l^* h_i|^2 / (8 d_i mu^2)) ],

``G0(t) = max(t - 1, 0)^2``. Gradients are taken with respect to the
conjugated variables, so for a direction ``w`` the first-order change of the
objective is ``2 Re(w^T conj(grad))``.
"""

import csv
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels
from .exceptions import DimensionError, SolverError
from .initialization import default_mu
from .model import BlockPair, relative_error
from .operators import apply_B, apply_B_adjoint, forward_rank1_all

TRACE_FIELDS = ("iter", "objective", "loss_f", "loss_g", "grad_norm", "step",
                "rel_error", "elapsed_ms")
MIN_STEP = 1e-18


@dataclass
class SolverConfig:
    """Parameters of one descent run.

    ``rho`` defaults to ``d^2`` and ``step_init`` to ``1 / (K + N)`` when
    left as ``None``; :meth:`resolve` fills them in.
    """

    d_i: np.ndarray
    d: float
    mu: float
    rho: float = None
    step_init: float = None
    backtracking: bool = True
    shrink: float = 0.5
    max_iters: int = 500
    stop_tol: float = 1e-6
    record_timing: bool = False

    def __post_init__(self):
        self.d_i = np.asarray(self.d_i, dtype=float)
        if np.any(self.d_i <= 0) or self.d <= 0 or self.mu <= 0:
            raise ValueError("d_i, d and mu must be positive")
        if self.rho is not None and self.rho < 0:
            raise ValueError("rho must be non-negative")
        if self.step_init is not None and self.step_init <= 0:
            raise ValueError("step_init must be positive")
        if not 0 < self.shrink < 1:
            raise ValueError("shrink factor must lie in (0, 1)")
        if self.max_iters < 0 or self.stop_tol < 0:
            raise ValueError("max_iters and stop_tol must be non-negative")

    @classmethod
    def from_init(cls, init, sigma=None, **overrides):
        """Config seeded from an initialization.

        With a known noise level ``sigma`` the default ``rho`` becomes
        ``d^2 (1 + 2 sigma^2)``, a stand-in for ``d^2 + 2 ||e||^2``.
        """
        rho = None
        if sigma:
            rho = init.d**2 * (1.0 + 2.0 * sigma**2)
        kwargs = dict(d_i=init.d_i, d=init.d, mu=init.mu, rho=rho)
        kwargs.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**kwargs)

    def resolve(self, ens):
        rho = self.d**2 if self.rho is None else self.rho
        step = 1.0 / (ens.K + ens.N) if self.step_init is None else self.step_init
        if self.d_i.shape != (ens.s,):
            raise DimensionError(f"need {ens.s} scale estimates, got {self.d_i.shape}")
        return replace(self, rho=rho, step_init=step)


@dataclass
class SolverTrace:
    rows: list = field(default_factory=list)
    stop_reason: str = ""

    def append(self, **row):
        self.rows.append(row)

    def __len__(self):
        return len(self.rows)

    def column(self, name):
        return np.array([r[name] for r in self.rows], dtype=float)

    @property
    def iterations(self):
        return self.rows[-1]["iter"] if self.rows else 0

    def write_csv(self, fh, header_lines=()):
        for line in header_lines:
            fh.write(f"# {line}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRACE_FIELDS)
        for r in self.rows:
            writer.writerow([_fmt(r[k]) for k in TRACE_FIELDS])


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


# ---------------------------------------------------------------------------
# Objective pieces
# ---------------------------------------------------------------------------


def g0(t):
    return max(t - 1.0, 0.0) ** 2


def g0_prime(t):
    return 2.0 * max(t - 1.0, 0.0)


def residual(z, inst):
    return forward_rank1_all(inst.ensemble, z.h, z.x).sum(axis=0) - inst.y


def loss_F(z, inst):
    z.check(inst.ensemble)
    r = residual(z, inst)
    return float(np.vdot(r, r).real)


def _penalty_threshold(ens, cfg):
    return 8.0 * cfg.d_i * cfg.mu**2 / ens.L


def _loss_G(ens, h, x, Bh, cfg):
    nh = np.sum(np.abs(h) ** 2, axis=1) / (2.0 * cfg.d_i)
    nx = np.sum(np.abs(x) ** 2, axis=1) / (2.0 * cfg.d_i)
    spec, _ = _kernels.spectral_penalty(Bh, _penalty_threshold(ens, cfg))
    norm_terms = np.maximum(nh - 1, 0) ** 2 + np.maximum(nx - 1, 0) ** 2
    return float(cfg.rho * np.sum(norm_terms + spec))


def loss_G(z, inst, cfg):
    ens = inst.ensemble
    z.check(ens)
    cfg = cfg.resolve(ens)
    return _loss_G(ens, z.h, z.x, apply_B(ens, z.h), cfg)


def objective(z, inst, cfg):
    """``F + G`` at ``z``."""
    return loss_F(z, inst) + loss_G(z, inst, cfg)


def _grad(ens, h, x, r, Bh, Ax, cfg):
    grad_h = apply_B_adjoint(ens, r[None, :] * Ax)
    grad_x = ens.apply_A_adjoint(np.conj(r)[None, :] * Bh)

    scale = cfg.rho / (2.0 * cfg.d_i)
    nh = np.sum(np.abs(h) ** 2, axis=1) / (2.0 * cfg.d_i)
    nx = np.sum(np.abs(x) ** 2, axis=1) / (2.0 * cfg.d_i)
    gh = 2.0 * np.maximum(nh - 1.0, 0.0)
    gx = 2.0 * np.maximum(nx - 1.0, 0.0)
    _, weights = _kernels.spectral_penalty(Bh, _penalty_threshold(ens, cfg))
    grad_h = grad_h + scale[:, None] * gh[:, None] * h
    if np.any(weights):
        spec = apply_B_adjoint(ens, weights * Bh)
        grad_h = grad_h + (scale * ens.L / (4.0 * cfg.mu**2))[:, None] * spec
    grad_x = grad_x + scale[:, None] * gx[:, None] * x
    return grad_h, grad_x


def gradient(z, inst, cfg):
    """Wirtinger gradient of ``F + G`` as a :class:`BlockPair` of the same shape."""
    ens = inst.ensemble
    z.check(ens)
    cfg = cfg.resolve(ens)
    Bh = apply_B(ens, z.h)
    Ax = ens.apply_A(z.x)
    r = (Bh * np.conj(Ax)).sum(axis=0) - inst.y
    gh, gx = _grad(ens, z.h, z.x, r, Bh, Ax, cfg)
    return BlockPair(gh, gx)


class _State:
    """Cached quantities at one iterate."""

    __slots__ = ("h", "x", "Bh", "Ax", "r", "F", "G")

    def __init__(self, ens, h, x, y, cfg):
        self.h, self.x = h, x
        self.Bh = apply_B(ens, h)
        self.Ax = ens.apply_A(x)
        self.r = (self.Bh * np.conj(self.Ax)).sum(axis=0) - y
        self.F = float(np.vdot(self.r, self.r).real)
        self.G = _loss_G(ens, h, x, self.Bh, cfg)

    @property
    def total(self):
        return self.F + self.G


def descend(init, inst, cfg, truth_available=True):
    """Run gradient descent from an initialization.

    Each iteration starts from ``cfg.step_init`` and, with backtracking,
    shrinks the step until the objective does not increase. Iteration stops
    when ``||A(H(z_{t+1}) - H(z_t))|| < stop_tol * ||y||`` or after
    ``max_iters`` steps.

    Returns
    -------
    BlockPair, SolverTrace

    Raises
    ------
    SolverError
        On stepsize underflow or a non-finite objective.
    """
    ens = inst.ensemble
    cfg = cfg.resolve(ens)
    start = init.pair if hasattr(init, "pair") else init
    start.check(ens)
    y_norm = float(np.linalg.norm(inst.y))
    trace = SolverTrace()
    t0 = time.perf_counter()

    def record(t, st, gnorm, step):
        trace.append(
            iter=t, objective=st.total, loss_f=st.F, loss_g=st.G, grad_norm=gnorm,
            step=step,
            rel_error=relative_error(BlockPair(st.h, st.x), inst) if truth_available else None,
            elapsed_ms=(time.perf_counter() - t0) * 1e3 if cfg.record_timing else None,
        )

    st = _State(ens, start.h.copy(), start.x.copy(), inst.y, cfg)
    if not math.isfinite(st.total):
        raise SolverError("objective is not finite at the starting point", iteration=0)
    gh, gx = _grad(ens, st.h, st.x, st.r, st.Bh, st.Ax, cfg)
    gnorm = math.sqrt(float(np.vdot(gh, gh).real + np.vdot(gx, gx).real))
    record(0, st, gnorm, None)

    for t in range(1, cfg.max_iters + 1):
        if gnorm == 0.0:
            trace.stop_reason = "stationary"
            break
        step = cfg.step_init
        while True:
            cand = _State(ens, st.h - step * gh, st.x - step * gx, inst.y, cfg)
            if not cfg.backtracking:
                break
            if math.isfinite(cand.total) and cand.total <= st.total:
                break
            step *= cfg.shrink
            if step < MIN_STEP:
                raise SolverError(f"stepsize underflow at iteration {t}", iteration=t)
        if not math.isfinite(cand.total):
            raise SolverError(f"objective became non-finite at iteration {t}", iteration=t)
        change = float(np.linalg.norm(cand.r - st.r))
        st = cand
        gh, gx = _grad(ens, st.h, st.x, st.r, st.Bh, st.Ax, cfg)
        gnorm = math.sqrt(float(np.vdot(gh, gh).real + np.vdot(gx, gx).real))
        record(t, st, gnorm, step)
        if change < cfg.stop_tol * y_norm:
            trace.stop_reason = "converged"
            break
    else:
        trace.stop_reason = "max_iters"
    return BlockPair(st.h, st.x), trace


def default_config(init, inst, **overrides):
    """Solver config from an initialization, using the instance's noise level."""
    return SolverConfig.from_init(init, sigma=inst.sigma, **overrides)


__all__ = [
    "SolverConfig", "SolverTrace", "TRACE_FIELDS", "default_config", "default_mu",
    "descend", "g0", "g0_prime", "gradient", "loss_F", "loss_G", "objective",
    "residual",
]
