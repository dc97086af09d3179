import io
import math

import numpy as np
import pytest

from blinddemix.exceptions import DimensionError, SolverError
from blinddemix.initialization import InitOutput, spectral_init
from blinddemix.model import BlockPair, generate_instance, relative_error
from blinddemix.operators import make_ensemble
from blinddemix.solver import (
    TRACE_FIELDS,
    SolverConfig,
    default_config,
    descend,
    g0,
    g0_prime,
    gradient,
    loss_F,
    loss_G,
    objective,
)

from .conftest import crandn, dense_lift


def truth_config(inst, mu=None, **kw):
    mu = 2 * inst.mu_h if mu is None else mu
    return SolverConfig(d_i=inst.d_i0, d=inst.d_0, mu=mu, **kw)


def test_g0_examples():
    assert g0(0.5) == 0.0 and g0_prime(0.5) == 0.0
    assert g0(1.0) == 0.0
    assert g0(2.0) == 1.0 and g0_prime(2.0) == 2.0
    t = 1e-6
    fd = (g0(1.5 + t) - g0(1.5 - t)) / (2 * t)
    assert abs(fd - g0_prime(1.5)) <= 1e-6


# -- losses -------------------------------------------------------------------


def test_loss_F_examples(small_ens):
    inst = generate_instance(small_ens, seed=3)
    assert loss_F(inst.truth, inst) <= 1e-24
    zero = BlockPair(np.zeros((2, 3)), np.zeros((2, 2)))
    assert abs(loss_F(zero, inst) - np.linalg.norm(inst.y) ** 2) <= 1e-12 * loss_F(zero, inst)


def test_loss_F_dense_oracle(small_ens, rng):
    inst = generate_instance(small_ens, sigma=0.1, seed=3)
    z = BlockPair(crandn(rng, 2, 3), crandn(rng, 2, 2))
    r = sum(dense_lift(small_ens, np.outer(z.h[i], z.x[i].conj()), i) for i in range(2)) - inst.y
    assert abs(loss_F(z, inst) - np.linalg.norm(r) ** 2) <= 1e-10 * np.linalg.norm(r) ** 2


def test_loss_F_blockwise_scale_invariance(small_ens, rng):
    inst = generate_instance(small_ens, seed=3)
    z = BlockPair(crandn(rng, 2, 3), crandn(rng, 2, 2))
    alpha = np.array([[3.0], [-0.2]])
    scaled = BlockPair(alpha * z.h, z.x / alpha)
    assert abs(loss_F(scaled, inst) - loss_F(z, inst)) <= 1e-10 * loss_F(z, inst)


def test_loss_G_examples(small_ens):
    inst = generate_instance(small_ens, seed=3)
    cfg = truth_config(inst)
    assert loss_G(inst.truth, inst, cfg) == 0.0
    big = BlockPair(10 * inst.truth.h, inst.truth.x)
    assert loss_G(big, inst, cfg) > 0


def test_loss_G_spectral_term_by_hand(small_ens, rng):
    inst = generate_instance(small_ens, seed=3)
    cfg = truth_config(inst, mu=0.3, rho=2.5)
    z = BlockPair(crandn(rng, 2, 3), crandn(rng, 2, 2))
    B = np.exp(-2j * np.pi * np.outer(np.arange(16), np.arange(3)) / 16) / 4
    expected = 0.0
    for i in range(2):
        di = inst.d_i0[i]
        expected += g0(np.linalg.norm(z.h[i]) ** 2 / (2 * di))
        expected += g0(np.linalg.norm(z.x[i]) ** 2 / (2 * di))
        expected += sum(g0(16 * abs(B[l] @ z.h[i]) ** 2 / (8 * di * 0.3**2)) for l in range(16))
    assert abs(loss_G(z, inst, cfg) - 2.5 * expected) <= 1e-10 * 2.5 * expected


# -- gradient -----------------------------------------------------------------


def test_gradient_vanishes_at_truth(small_ens):
    inst = generate_instance(small_ens, seed=3)
    g = gradient(inst.truth, inst, truth_config(inst))
    assert np.linalg.norm(g.h) <= 1e-10 and np.linalg.norm(g.x) <= 1e-10


def test_regularizer_gradient_zero_when_inactive(small_ens):
    inst = generate_instance(small_ens, seed=3)
    cfg = truth_config(inst)
    z = BlockPair(0.5 * inst.truth.h, 0.5 * inst.truth.x)
    with_reg = gradient(z, inst, cfg)
    without = gradient(z, inst, truth_config(inst, rho=0.0))
    np.testing.assert_array_equal(with_reg.h, without.h)
    np.testing.assert_array_equal(with_reg.x, without.x)


def _directional_check(z, inst, cfg, w):
    t = 1e-6
    plus = BlockPair(z.h + t * w.h, z.x + t * w.x)
    minus = BlockPair(z.h - t * w.h, z.x - t * w.x)
    fd = (objective(plus, inst, cfg) - objective(minus, inst, cfg)) / (2 * t)
    g = gradient(z, inst, cfg)
    analytic = 2 * (np.vdot(g.h, w.h) + np.vdot(g.x, w.x)).real
    return abs(fd - analytic) / abs(analytic)


@pytest.mark.parametrize("kind,N", [("gaussian", 2), ("hadamard", 4)])
def test_gradient_finite_differences(kind, N):
    g = np.random.default_rng(7)
    ens = make_ensemble(16, 3, N, 2, kind, seed=7)
    inst = generate_instance(ens, sigma=0.05, seed=7)
    for k in range(10):
        z = BlockPair(crandn(g, 2, 3), crandn(g, 2, N))
        w = BlockPair(crandn(g, 2, 3), crandn(g, 2, N))
        # alternate between an inactive and a strongly active regularizer
        cfg = truth_config(inst) if k % 2 else truth_config(inst, mu=0.2, rho=3.0)
        if k % 2 == 0:
            assert loss_G(z, inst, cfg) > 0
        assert _directional_check(z, inst, cfg, w) <= 1e-5


def test_gradient_dimension_error(small_ens):
    inst = generate_instance(small_ens, seed=3)
    with pytest.raises(DimensionError):
        gradient(BlockPair(np.zeros((2, 4)), np.zeros((2, 2))), inst, truth_config(inst))


# -- configuration ------------------------------------------------------------


def test_config_defaults(small_ens):
    cfg = SolverConfig(d_i=[1.0, 2.0], d=math.sqrt(5), mu=3.0).resolve(small_ens)
    assert abs(cfg.rho - 5.0) <= 1e-12
    assert cfg.step_init == 1.0 / (3 + 2)
    assert cfg.backtracking and cfg.shrink == 0.5 and cfg.max_iters == 500
    assert cfg.stop_tol == 1e-6


def test_config_rho_with_known_noise():
    init = InitOutput(u0=np.zeros((1, 2)), v0=np.zeros((1, 2)), d_i=np.array([2.0]), d=2.0,
                      mu=1.0)
    cfg = SolverConfig.from_init(init, sigma=0.5)
    assert abs(cfg.rho - 4.0 * 1.5) <= 1e-12


@pytest.mark.parametrize("bad", [dict(mu=0.0), dict(shrink=1.0), dict(step_init=-1.0),
                                 dict(rho=-1.0), dict(d_i=[0.0, 1.0])])
def test_config_validation(bad):
    kw = dict(d_i=[1.0, 1.0], d=1.0, mu=1.0)
    kw.update(bad)
    with pytest.raises(ValueError):
        SolverConfig(**kw)


# -- descent ------------------------------------------------------------------


def test_start_at_truth_terminates(small_ens):
    inst = generate_instance(small_ens, seed=3)
    z, trace = descend(inst.truth, inst, truth_config(inst))
    assert trace.iterations <= 1
    assert relative_error(z, inst) <= 1e-12


def test_trace_is_monotone_and_well_formed():
    ens = make_ensemble(120, 10, 10, 2, seed=1)
    inst = generate_instance(ens, seed=1)
    init = spectral_init(inst)
    z, trace = descend(init, inst, default_config(init, inst, max_iters=200))
    obj = trace.column("objective")
    assert np.all(np.diff(obj) <= 0)
    assert trace.stop_reason in ("converged", "max_iters", "stationary")
    assert set(trace.rows[0]) == set(TRACE_FIELDS)
    assert trace.rows[0]["step"] is None and trace.rows[0]["elapsed_ms"] is None
    assert relative_error(z, inst) == trace.rows[-1]["rel_error"]


def test_constant_step_and_timing():
    ens = make_ensemble(120, 10, 10, 2, seed=1)
    inst = generate_instance(ens, seed=1)
    init = spectral_init(inst)
    cfg = default_config(init, inst, backtracking=False, max_iters=20, record_timing=True)
    _, trace = descend(init, inst, cfg)
    assert np.all(trace.column("step")[1:] == 1.0 / 20)
    assert all(r["elapsed_ms"] is not None for r in trace.rows)


def test_step_underflow_raises(small_ens):
    inst = generate_instance(small_ens, seed=3)
    g = np.random.default_rng(0)
    z = BlockPair(crandn(g, 2, 3), crandn(g, 2, 2))
    # a tiny shrink factor drives the step below the floor immediately
    cfg = truth_config(inst, step_init=1e10, shrink=1e-30)
    with pytest.raises(SolverError):
        descend(z, inst, cfg)


def test_no_truth_leaves_error_blank(small_ens):
    inst = generate_instance(small_ens, seed=3)
    init = spectral_init(inst)
    _, trace = descend(init, inst, default_config(init, inst, max_iters=3),
                       truth_available=False)
    assert all(r["rel_error"] is None for r in trace.rows)


def test_trace_csv_header():
    ens = make_ensemble(60, 10, 10, 1, seed=2)
    inst = generate_instance(ens, seed=2)
    init = spectral_init(inst)
    _, trace = descend(init, inst, default_config(init, inst, max_iters=5))
    buf = io.StringIO()
    trace.write_csv(buf, header_lines=["blinddemix test"])
    lines = buf.getvalue().splitlines()
    assert lines[0] == "# blinddemix test"
    assert lines[1] == "iter,objective,loss_f,loss_g,grad_norm,step,rel_error,elapsed_ms"
    assert len(lines) == 2 + len(trace)
    assert lines[2].split(",")[5] == "" and lines[2].split(",")[7] == ""


@pytest.mark.slow
def test_noiseless_recovery_L200():
    hits = 0
    for seed in range(25):
        ens = make_ensemble(200, 10, 10, 2, seed=seed)
        inst = generate_instance(ens, seed=seed)
        init = spectral_init(inst)
        z, _ = descend(init, inst, default_config(init, inst))
        hits += relative_error(z, inst) <= 1e-3
    assert hits >= 22


@pytest.mark.slow
def test_linear_convergence_near_truth():
    hits = 0
    for seed in range(100):
        ens = make_ensemble(512, 8, 8, 2, seed=seed)
        inst = generate_instance(ens, seed=seed)
        init = spectral_init(inst)
        _, trace = descend(init, inst, default_config(init, inst, max_iters=100))
        err = trace.column("rel_error")
        hits += err[min(100, len(err) - 1)] <= 0.5 * err[10]
    assert hits >= 90


@pytest.mark.slow
def test_noisy_floor_shrinks_with_L():
    medians = []
    for L in (256, 512):
        errs = []
        for seed in range(25):
            ens = make_ensemble(L, 8, 8, 2, seed=seed)
            inst = generate_instance(ens, sigma=0.1, seed=seed)
            init = spectral_init(inst)
            z, trace = descend(init, inst, default_config(init, inst))
            errs.append(relative_error(z, inst))
            assert np.isfinite(errs[-1]) and errs[-1] < 1
        medians.append(np.median(errs))
    assert 0.5 <= medians[1] / medians[0] <= 1.0
