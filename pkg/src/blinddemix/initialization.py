"""Spectral initialization followed by projection onto the incoherence ball."""

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .exceptions import ConvergenceError, DimensionError
from .model import BlockPair
from .operators import apply_B, apply_B_adjoint, lift_adjoint_i

SINGULAR_TOL = 1e-10
PROJECTION_TOL = 1e-9
MAX_ITER = 10_000
POLISH_EVERY = 50


def default_mu(L):
    """Default incoherence parameter ``6 sqrt(log L)``."""
    return 6.0 * math.sqrt(math.log(max(L, 2)))


@dataclass
class InitOutput:
    u0: np.ndarray
    v0: np.ndarray
    d_i: np.ndarray
    d: float
    mu: float

    @property
    def pair(self):
        return BlockPair(self.u0, self.v0)


def _fix_phase(left, right):
    k = int(np.argmax(np.abs(left)))
    if left[k] == 0:
        return left, right
    rot = np.conj(left[k]) / abs(left[k])
    return left * rot, right * rot


def leading_singular_triple(M, tol=SINGULAR_TOL, max_iter=MAX_ITER):
    """Top singular value and unit singular vectors of a dense matrix.

    Power iteration on ``M M^*`` from the normalized all-ones vector. The
    loop stops once ``||M v - d u|| <= tol * d``. The returned pair is
    rotated so the largest-modulus entry of the left vector is real and
    non-negative.

    Returns
    -------
    d : float
    left : ndarray, shape (K,)
    right : ndarray, shape (N,)

    Raises
    ------
    ValueError
        If ``M`` is identically zero.
    ConvergenceError
        If ``max_iter`` is exceeded; ``last`` holds ``(d, left, right)``.
    """
    M = np.asarray(M, dtype=np.complex128)
    if M.ndim != 2:
        raise DimensionError("expected a 2-D matrix")
    if tol <= 0:
        raise ValueError("tol must be positive")
    fro2 = float(np.vdot(M, M).real)
    if fro2 == 0.0:
        raise ValueError("leading singular triple of a zero matrix is undefined")
    # sigma_1^2 >= ||M||_F^2 / rank; falling short means the start vector
    # missed the top singular subspace, so restart from the heaviest column.
    floor = fro2 / min(M.shape) * (1 - 1e-6)
    starts = [np.ones(M.shape[0], dtype=np.complex128)]
    starts.append(M[:, int(np.argmax(np.linalg.norm(M, axis=0)))].copy())

    last = None
    for u in starts:
        u = u / np.linalg.norm(u)
        for it in range(max_iter):
            w = M.conj().T @ u
            d = float(np.linalg.norm(w))
            if d == 0.0:
                break
            v = w / d
            Mv = M @ v
            resid = float(np.linalg.norm(Mv - d * u))
            last = (d, u, v)
            if resid <= tol * d:
                break
            u = Mv / np.linalg.norm(Mv)
        else:
            left, right = _fix_phase(*last[1:])
            raise ConvergenceError(
                f"singular triple did not converge in {max_iter} iterations",
                last=(last[0], left, right), iterations=max_iter,
            )
        if d > 0.0 and d * d >= floor:
            left, right = _fix_phase(u, v)
            return d, left, right
    left, right = _fix_phase(*last[1:])
    return last[0], left, right


def _realify(C):
    return np.block([[C.real, -C.imag], [C.imag, C.real]])


def _kkt_solve(ens, z0, radius, active, z, newton_steps=30):
    """Newton's method on the KKT system for a fixed active set ``S``.

    Stationarity ``z - z0 + B_S^* diag(lam) B_S z = 0`` with ``|b_l^* z| = r``
    on ``S``.
    """
    K, m = ens.K, active.size
    BS = np.exp(-2j * np.pi * np.outer(active, np.arange(K)) / ens.L) / math.sqrt(ens.L)
    BSh = BS.conj().T
    cols = BSh * (BS @ z)
    lam, *_ = np.linalg.lstsq(np.vstack([cols.real, cols.imag]),
                              np.concatenate([(z0 - z).real, (z0 - z).imag]), rcond=None)
    scale = max(1.0, float(np.linalg.norm(z0)))
    for _ in range(newton_steps):
        c = BS @ z
        r1 = z + BSh @ (lam * c) - z0
        r2 = np.abs(c) ** 2 - radius**2
        res = np.concatenate([r1.real, r1.imag, r2])
        if not np.all(np.isfinite(res)) or np.linalg.norm(res) <= 1e-14 * scale:
            break
        J = np.zeros((2 * K + m, 2 * K + m))
        J[: 2 * K, : 2 * K] = _realify(np.eye(K) + BSh @ (lam[:, None] * BS))
        cols = BSh * c
        J[: 2 * K, 2 * K:] = np.vstack([cols.real, cols.imag])
        g = np.conj(c)[:, None] * BS
        J[2 * K:, :K] = 2 * g.real
        J[2 * K:, K: 2 * K] = -2 * g.imag
        step, *_ = np.linalg.lstsq(J, -res, rcond=None)
        z = z + step[:K] + 1j * step[K: 2 * K]
        lam = lam + step[2 * K:]
    stat = z - z0 + BSh @ (lam * (BS @ z))
    return z, lam, float(np.linalg.norm(stat)) / scale


def _kkt_polish(ens, z0, radius, active, z, tol):
    """Primal-dual active-set refinement of a Dykstra iterate.

    Starting from the clipped entries, constraints with negative multipliers
    are released and violated ones added until the KKT conditions hold.
    Returns ``None`` if no certified point is found.
    """
    active = np.sort(active)
    for _ in range(2 * ens.K + 2):
        if active.size == 0 or active.size > 2 * ens.K:
            return None
        z, lam, stat = _kkt_solve(ens, z0, radius, active, z)
        if not np.all(np.isfinite(z)) or stat > tol:
            return None
        if np.any(lam < -tol):
            active = np.delete(active, int(np.argmin(lam)))
            continue
        w = np.abs(apply_B(ens, z))
        worst = int(np.argmax(w))
        if w[worst] > radius * (1 + tol):
            active = np.sort(np.append(active, worst))
            continue
        return z
    return None


def project_mu_ball(ens, z0, c, tol=PROJECTION_TOL, max_iter=MAX_ITER):
    """Euclidean projection of ``z0`` onto ``{z : sqrt(L) ||B z||_inf <= c}``.

    Works on ``w = B z``: since ``B`` is an isometry the problem is the
    projection of ``B z0`` onto ``range(B)`` intersected with the modulus box
    ``|w_l| <= c / sqrt(L)``, solved with Dykstra's algorithm. Dykstra is
    slow once many constraints bind, so every ``POLISH_EVERY`` sweeps the
    entries it currently clips are taken as the active set and the KKT
    system is solved by Newton's method; a point passing the KKT check is
    the exact projection and is returned.

    Raises
    ------
    ConvergenceError
        If ``max_iter`` is exceeded; ``last`` holds a feasible point obtained
        by clipping the last iterate and pulling it back into ``range(B)``.
    """
    z0 = np.asarray(z0, dtype=np.complex128)
    if z0.shape != (ens.K,):
        raise DimensionError(f"expected z0 of length K={ens.K}")
    if c <= 0:
        raise ValueError("bound c must be positive")
    radius = c / math.sqrt(ens.L)
    w0 = apply_B(ens, z0)
    if np.max(np.abs(w0)) <= radius:
        return z0.copy()
    if ens.K == ens.L:
        return apply_B_adjoint(ens, _kernels.radial_clip(w0, radius))

    # Dykstra with P1 = B B^* (subspace) and P2 = modulus box.
    x = w0
    p = np.zeros_like(w0)
    q = np.zeros_like(w0)
    for it in range(1, max_iter + 1):
        y = apply_B(ens, apply_B_adjoint(ens, x + p))
        p = x + p - y
        x_new = _kernels.radial_clip(y + q, radius)
        if it % POLISH_EVERY == 0:
            active = np.flatnonzero(np.abs(y + q) > radius)
            z = _kkt_polish(ens, z0, radius, active, apply_B_adjoint(ens, y), tol)
            if z is not None:
                return z
        q = y + q - x_new
        moved = np.linalg.norm(x_new - x)
        x = x_new
        scale = tol * max(1.0, np.linalg.norm(x))
        if moved < scale and np.linalg.norm(x - y) < scale:
            return apply_B_adjoint(ens, x)
    z = apply_B_adjoint(ens, x)
    w = apply_B(ens, z)
    peak = np.max(np.abs(w))
    if peak > radius:
        z = z * (radius / peak)
    raise ConvergenceError(
        f"Dykstra projection did not converge in {max_iter} iterations",
        last=z, iterations=max_iter,
    )


def spectral_init(inst, mu=None, tol=SINGULAR_TOL, proj_tol=PROJECTION_TOL,
                  max_iter=MAX_ITER):
    """Spectral initialization for every source.

    For source ``i`` the leading singular triple ``(d_i, h_hat, x_hat)`` of
    ``A_i^*(y)`` gives ``v0_i = sqrt(d_i) x_hat`` and ``u0_i``, the
    projection of ``sqrt(d_i) h_hat`` onto
    ``{z : sqrt(L) ||B z||_inf <= 2 sqrt(d_i) mu}``.
    """
    ens = inst.ensemble
    if mu is None:
        mu = default_mu(ens.L)
    if mu <= 0:
        raise ValueError("mu must be positive")
    u0 = np.empty((ens.s, ens.K), dtype=np.complex128)
    v0 = np.empty((ens.s, ens.N), dtype=np.complex128)
    d_i = np.empty(ens.s)
    for i in range(ens.s):
        M = lift_adjoint_i(ens, inst.y, i)
        d, left, right = leading_singular_triple(M, tol=tol, max_iter=max_iter)
        root = math.sqrt(d)
        u0[i] = project_mu_ball(ens, root * left, 2.0 * root * mu, tol=proj_tol,
                                max_iter=max_iter)
        v0[i] = root * right
        d_i[i] = d
    return InitOutput(u0=u0, v0=v0, d_i=d_i, d=float(np.linalg.norm(d_i)), mu=float(mu))
