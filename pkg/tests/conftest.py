import numpy as np
import pytest

from blinddemix.operators import make_ensemble


def dense_B(L, K):
    """Partial unitary DFT built entry by entry (no FFT)."""
    l = np.arange(L)[:, None]
    k = np.arange(K)[None, :]
    return np.exp(-2j * np.pi * l * k / L) / np.sqrt(L)


def dense_lift(ens, Z, i):
    """``{b_l^* Z a_il}`` evaluated literally from explicit rows and columns."""
    B = dense_B(ens.L, ens.K)
    A = ens.encoding_matrix(i)
    out = np.empty(ens.L, dtype=complex)
    for l in range(ens.L):
        b_l = B[l].conj()  # column l of B^*
        a_il = A[l].conj()  # column l of A_i^*
        out[l] = b_l.conj() @ Z @ a_il
    return out


def dense_lift_adjoint(ens, z, i):
    B = dense_B(ens.L, ens.K)
    A = ens.encoding_matrix(i)
    out = np.zeros((ens.K, ens.N), dtype=complex)
    for l in range(ens.L):
        out += z[l] * np.outer(B[l].conj(), A[l])  # b_l a_il^*
    return out


def crandn(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def small_ens():
    return make_ensemble(16, 3, 2, 2, "gaussian", seed=11)


@pytest.fixture
def hadamard_ens():
    return make_ensemble(16, 3, 4, 2, "hadamard", seed=12)


ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
