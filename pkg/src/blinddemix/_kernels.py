"""Hot elementwise and butterfly kernels.

Each kernel has a numba implementation and a pure-numpy implementation with
identical semantics. The active backend is picked once at import time:
numba is used when it imports cleanly, unless the environment variable
``BLINDDEMIX_DISABLE_NUMBA`` is set to a truthy value. Both variants stay
importable under explicit names so tests and benchmarks can compare them.
"""

import os

import numpy as np

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency in CI
    _HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def decorator(func):
            return func

        if args and callable(args[0]):
            return args[0]
        return decorator


def _env_disabled():
    flag = os.environ.get("BLINDDEMIX_DISABLE_NUMBA", "").strip().lower()
    return flag not in ("", "0", "false", "no")


USE_NUMBA = _HAVE_NUMBA and not _env_disabled()
BACKEND = "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# Fast Walsh-Hadamard transform (Sylvester ordering, unnormalized)
# ---------------------------------------------------------------------------


@njit(cache=True)
def _fwht_numba(a):
    out = a.copy()
    rows, n = out.shape
    for r in range(rows):
        h = 1
        while h < n:
            for start in range(0, n, 2 * h):
                for j in range(start, start + h):
                    u = out[r, j]
                    v = out[r, j + h]
                    out[r, j] = u + v
                    out[r, j + h] = u - v
            h *= 2
    return out


def _fwht_numpy(a):
    out = np.array(a, copy=True)
    rows, n = out.shape
    h = 1
    while h < n:
        view = out.reshape(rows, n // (2 * h), 2, h)
        u = view[:, :, 0, :].copy()
        v = view[:, :, 1, :]
        view[:, :, 0, :] = u + v
        view[:, :, 1, :] = u - v
        h *= 2
    return out


def fwht_numba(a):
    """Walsh-Hadamard transform along the last axis using the numba kernel."""
    a = np.ascontiguousarray(a, dtype=np.complex128)
    return _fwht_numba(a.reshape(-1, a.shape[-1])).reshape(a.shape)


def fwht_numpy(a):
    """Walsh-Hadamard transform along the last axis using numpy reshapes."""
    a = np.asarray(a, dtype=np.complex128)
    return _fwht_numpy(a.reshape(-1, a.shape[-1])).reshape(a.shape)


# ---------------------------------------------------------------------------
# Radial clip onto a per-entry modulus box
# ---------------------------------------------------------------------------


@njit(cache=True)
def _radial_clip_numba(w, radius):
    out = np.empty_like(w)
    for k in range(w.size):
        mag = abs(w[k])
        if mag > radius:
            out[k] = w[k] * (radius / mag)
        else:
            out[k] = w[k]
    return out


def radial_clip_numba(w, radius):
    w = np.ascontiguousarray(w, dtype=np.complex128)
    return _radial_clip_numba(w.ravel(), float(radius)).reshape(w.shape)


def radial_clip_numpy(w, radius):
    w = np.asarray(w, dtype=np.complex128)
    mag = np.abs(w)
    scale = np.ones_like(mag)
    over = mag > radius
    scale[over] = radius / mag[over]
    return w * scale


# ---------------------------------------------------------------------------
# Spectral incoherence penalty: per row, sum_l G0(|w_l|^2 / t) and G0' weights
# ---------------------------------------------------------------------------


@njit(cache=True)
def _spectral_penalty_numba(w, thresholds):
    rows, n = w.shape
    totals = np.zeros(rows)
    weights = np.zeros((rows, n))
    for r in range(rows):
        t = thresholds[r]
        for k in range(n):
            excess = (w[r, k].real ** 2 + w[r, k].imag ** 2) / t - 1.0
            if excess > 0.0:
                totals[r] += excess * excess
                weights[r, k] = 2.0 * excess
    return totals, weights


def spectral_penalty_numba(w, thresholds):
    """Row-wise penalty sums and derivative weights, numba kernel.

    ``w`` is a 2-D complex array and ``thresholds`` holds one positive scale
    per row. Returns ``(totals, weights)`` where ``totals[r]`` is
    ``sum_k max(|w[r, k]|^2 / t_r - 1, 0)^2`` and ``weights`` holds
    ``2 * max(|w|^2 / t - 1, 0)`` entrywise.
    """
    w = np.ascontiguousarray(w, dtype=np.complex128)
    t = np.ascontiguousarray(thresholds, dtype=np.float64)
    return _spectral_penalty_numba(w, t)


def spectral_penalty_numpy(w, thresholds):
    w = np.asarray(w, dtype=np.complex128)
    t = np.asarray(thresholds, dtype=np.float64)[:, None]
    excess = np.maximum((w.real**2 + w.imag**2) / t - 1.0, 0.0)
    return np.sum(excess * excess, axis=1), 2.0 * excess


if USE_NUMBA:
    fwht = fwht_numba
    radial_clip = radial_clip_numba
    spectral_penalty = spectral_penalty_numba
else:
    fwht = fwht_numpy
    radial_clip = radial_clip_numpy
    spectral_penalty = spectral_penalty_numpy
