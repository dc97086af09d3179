"""Empirical checks of the local conditions behind the convergence guarantee.

Probes sample points in the basin around the ground truth and report how
often each inequality holds. Out-of-regime violations are data; nothing here
raises because an inequality fails.
"""

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConvergenceError
from .initialization import leading_singular_triple
from .model import BlockPair, block_errors
from .operators import apply_B, forward_rank1_all, lift_adjoint_i
from .solver import SolverConfig, gradient, objective

EPS_MAX = 1.0 / 15.0
RIP_LOWER, RIP_UPPER = 2.0 / 3.0, 3.0 / 2.0


@dataclass
class NeighborhoodSpec:
    """Basin parameters. ``mu=None`` means use the instance's own ``mu_h``."""

    epsilon: float = EPS_MAX
    mu: float = None

    def __post_init__(self):
        if not 0 < self.epsilon <= EPS_MAX + 1e-15:
            raise ValueError("epsilon must lie in (0, 1/15]")

    def resolve_mu(self, inst):
        mu = inst.mu_h if self.mu is None else float(self.mu)
        if mu < inst.mu_h * (1 - 1e-12):
            raise ValueError(f"mu={mu} is below the instance incoherence mu_h={inst.mu_h}")
        return mu


@dataclass
class ProbeReport:
    name: str
    params: dict
    records: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    passed: bool = True

    def summary_line(self):
        parts = [f"{k}={_short(v)}" for k, v in self.summary.items()]
        return f"{self.name}: {'PASS' if self.passed else 'FAIL'} " + " ".join(parts)

    def to_text(self):
        lines = [f"# probe {self.name}"]
        lines += [f"# {k}={_short(v)}" for k, v in self.params.items()]
        for rec in self.records:
            lines.append(" ".join(f"{k}={_short(v)}" for k, v in rec.items()))
        lines.append(self.summary_line())
        return "\n".join(lines) + "\n"

    def write_csv(self, fh, include_header=True):
        if not self.records:
            return
        cols = ["probe"] + list(self.records[0])
        writer = csv.writer(fh, lineterminator="\n")
        if include_header:
            writer.writerow(cols)
        for rec in self.records:
            writer.writerow([self.name] + [_short(rec[c]) for c in cols[1:]])

    def to_dict(self):
        return {"name": self.name, "params": self.params, "summary": self.summary,
                "passed": self.passed, "records": self.records}

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, default=_jsonable)


def _short(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _jsonable(v):
    if isinstance(v, np.generic):
        return v.item()
    raise TypeError(f"not serializable: {type(v)}")


def _params(inst, spec, mu, **extra):
    ens = inst.ensemble
    out = {"L": ens.L, "K": ens.K, "N": ens.N, "s": ens.s, "kind": ens.kind.value,
           "instance_seed": inst.seed, "sigma": inst.sigma, "mu": mu,
           "epsilon": spec.epsilon}
    out.update(extra)
    return out


# ---------------------------------------------------------------------------
# Neighborhood membership and sampling
# ---------------------------------------------------------------------------


def in_neighborhoods(z, inst, spec):
    """Membership of ``z`` in the norm, incoherence and closeness neighborhoods.

    Returns ``(in_norm_ball, in_incoherence_ball, in_closeness_ball)``.
    """
    ens = inst.ensemble
    z.check(ens)
    mu = spec.resolve_mu(inst)
    root = np.sqrt(inst.d_i0)
    tiny = 1e-12
    nh = np.linalg.norm(z.h, axis=1)
    nx = np.linalg.norm(z.x, axis=1)
    in_d = bool(np.all(nh <= 2 * root * (1 + tiny)) and np.all(nx <= 2 * root * (1 + tiny)))
    peak = math.sqrt(ens.L) * np.max(np.abs(apply_B(ens, z.h)), axis=1)
    in_mu = bool(np.all(peak <= 4 * root * mu * (1 + tiny)))
    deltas = block_errors(z, inst) / inst.d_i0
    in_eps = bool(np.all(deltas <= spec.epsilon * (1 + tiny)))
    return in_d, in_mu, in_eps


def perturb(inst, g_h, g_x, r):
    """Truth plus ``r`` times the direction ``(g_h, g_x)``."""
    t = inst.truth
    return BlockPair(t.h + r * g_h, t.x + r * g_x)


def _max_delta(inst, z):
    return float(np.max(block_errors(z, inst) / inst.d_i0))


def _radius_for(inst, g_h, g_x, target, rel=0.01, max_steps=200):
    hi = 1.0
    while _max_delta(inst, perturb(inst, g_h, g_x, hi)) < target:
        hi *= 2.0
        if hi > 1e12:
            raise RuntimeError("perturbation never reaches the target error")
    lo = 0.0
    for _ in range(max_steps):
        mid = 0.5 * (lo + hi)
        val = _max_delta(inst, perturb(inst, g_h, g_x, mid))
        if abs(val - target) <= rel * target:
            return mid
        if val < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def sample_neighborhood(inst, spec, n_samples, seed=0, max_tries=100):
    """Draw points of the basin by perturbing the ground truth.

    Each sample uses its own child stream of ``SeedSequence(seed)``. A target
    ``max_i delta_i`` is drawn uniformly from ``[0.2 eps, 0.99 eps]`` and the
    radius along a random Gaussian direction is found by bisection to 1%;
    draws that leave the norm or incoherence neighborhoods are rejected.

    Raises
    ------
    RuntimeError
        If ``max_tries`` consecutive draws are rejected for one sample.
    """
    ens = inst.ensemble
    root = np.sqrt(inst.d_i0)[:, None]
    eps = spec.epsilon
    samples = []
    for child in np.random.SeedSequence(seed).spawn(n_samples):
        g = np.random.default_rng(child)
        for _ in range(max_tries):
            g_h = g.standard_normal((ens.s, ens.K)) + 1j * g.standard_normal((ens.s, ens.K))
            g_x = g.standard_normal((ens.s, ens.N)) + 1j * g.standard_normal((ens.s, ens.N))
            g_h *= root / np.linalg.norm(g_h, axis=1, keepdims=True)
            g_x *= root / np.linalg.norm(g_x, axis=1, keepdims=True)
            target = g.uniform(0.2 * eps, 0.99 * eps)
            r = _radius_for(inst, g_h, g_x, target)
            z = perturb(inst, g_h, g_x, r)
            if all(in_neighborhoods(z, inst, spec)):
                samples.append(z)
                break
        else:
            raise RuntimeError(f"rejection sampling failed after {max_tries} draws")
    return samples


# ---------------------------------------------------------------------------
# Condition probes
# ---------------------------------------------------------------------------


def probe_local_rip(inst, spec, n_samples=100, seed=0):
    """Ratio ``||A(X - X0)||^2 / ||X - X0||_F^2`` over basin samples.

    Passes when every ratio lies in ``[2/3, 3/2]``.
    """
    ens = inst.ensemble
    mu = spec.resolve_mu(inst)
    truth_meas = forward_rank1_all(ens, inst.truth.h, inst.truth.x).sum(axis=0)
    report = ProbeReport("local_rip", _params(inst, spec, mu, seed=seed, n_samples=n_samples))
    ratios = []
    for k, z in enumerate(sample_neighborhood(inst, spec, n_samples, seed)):
        diff = forward_rank1_all(ens, z.h, z.x).sum(axis=0) - truth_meas
        fro2 = float(np.sum(block_errors(z, inst) ** 2))
        ratio = float(np.vdot(diff, diff).real) / fro2
        ok = RIP_LOWER <= ratio <= RIP_UPPER
        ratios.append(ratio)
        report.records.append({"sample": k, "rel_error": math.sqrt(fro2) / inst.d_0,
                               "ratio": ratio, "pass": ok})
    ratios = np.array(ratios)
    violations = int(np.sum((ratios < RIP_LOWER) | (ratios > RIP_UPPER)))
    report.summary = {"min": float(ratios.min()), "max": float(ratios.max()),
                      "mean": float(ratios.mean()), "violations": violations}
    report.passed = violations == 0
    return report


def adjoint_noise_norm(inst, tol=1e-8, max_iter=100_000):
    """``max_i ||A_i^*(e)||`` (spectral norm of each ``K x N`` block)."""
    ens = inst.ensemble
    if not np.any(inst.e):
        return 0.0
    best = 0.0
    for i in range(ens.s):
        M = lift_adjoint_i(ens, inst.e, i)
        try:
            d, _, _ = leading_singular_triple(M, tol=tol, max_iter=max_iter)
        except ConvergenceError as exc:
            d = exc.last[0]
        best = max(best, d)
    return best


def regularity_config(inst, spec):
    """Solver config built from the true scales: ``rho = d_0^2 + 2 ||e||^2``."""
    mu = spec.resolve_mu(inst)
    e2 = float(np.vdot(inst.e, inst.e).real)
    return SolverConfig(d_i=inst.d_i0, d=inst.d_0, mu=mu, rho=inst.d_0**2 + 2 * e2)


def regularity_sides(z, inst, spec, adj_noise=None, cfg=None):
    """Both sides of ``||grad||^2 >= omega [F~(z) - c]_+``.

    ``omega = d_0 / 7000`` and ``c = ||e||^2 + 2000 s ||A^*(e)||^2``.
    """
    if cfg is None:
        cfg = regularity_config(inst, spec)
    if adj_noise is None:
        adj_noise = adjoint_noise_norm(inst)
    omega = inst.d_0 / 7000.0
    c = float(np.vdot(inst.e, inst.e).real) + 2000.0 * inst.ensemble.s * adj_noise**2
    g = gradient(z, inst, cfg)
    lhs = float(np.vdot(g.h, g.h).real + np.vdot(g.x, g.x).real)
    rhs = omega * max(objective(z, inst, cfg) - c, 0.0)
    return lhs, rhs


def probe_regularity(inst, spec, n_samples=100, seed=0):
    mu = spec.resolve_mu(inst)
    cfg = regularity_config(inst, spec)
    adj = adjoint_noise_norm(inst)
    report = ProbeReport("regularity", _params(inst, spec, mu, seed=seed, n_samples=n_samples,
                                                omega=inst.d_0 / 7000.0, adjoint_noise=adj))
    violations = 0
    margins = []
    for k, z in enumerate(sample_neighborhood(inst, spec, n_samples, seed)):
        lhs, rhs = regularity_sides(z, inst, spec, adj_noise=adj, cfg=cfg)
        ok = lhs >= rhs
        violations += not ok
        margins.append(lhs - rhs)
        report.records.append({"sample": k, "grad_sq": lhs, "rhs": rhs, "pass": ok})
    report.summary = {"violations": violations, "min_margin": float(min(margins))}
    report.passed = violations == 0
    return report


def probe_robustness(inst, spec=None):
    """Compare ``max_i ||A_i^*(e)||`` with ``eps d_0 / (10 sqrt(2) s kappa)``."""
    spec = spec or NeighborhoodSpec()
    ens = inst.ensemble
    value = adjoint_noise_norm(inst)
    bound = spec.epsilon * inst.d_0 / (10.0 * math.sqrt(2.0) * ens.s * inst.kappa)
    report = ProbeReport("robustness", _params(inst, spec, spec.mu))
    report.records.append({"adjoint_noise": value, "bound": bound, "margin": bound - value,
                           "pass": value <= bound})
    report.summary = {"adjoint_noise": value, "bound": bound, "margin": bound - value}
    report.passed = value <= bound
    return report
