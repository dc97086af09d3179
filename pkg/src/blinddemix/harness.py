"""Seeded Monte-Carlo experiments: phase transitions, noise sweeps, kappa studies.

Every trial derives its ensemble and instance seeds from the master seed,
the experiment name, the cell coordinates and the trial index, so results do
not depend on execution order or on the number of worker processes.
"""

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .exceptions import ConvergenceError, DimensionError, SolverError
from .initialization import spectral_init
from .model import generate_instance, relative_error, sigma_for_snr, snr_db
from .operators import make_ensemble
from .probes import NeighborhoodSpec, probe_local_rip, probe_regularity, probe_robustness
from .solver import default_config, descend

log = logging.getLogger(__name__)

EXPERIMENTS = ("phase_transition", "noise_sweep", "kappa_study", "probes", "solve")
PHASE_FIELDS = ("L", "s", "K", "N", "trials", "successes", "median_rel_error",
                "median_iters", "median_ms")
NOISE_FIELDS = ("sigma", "snr_db", "trial", "rel_error", "iters")
KAPPA_FIELDS = ("kappa", "iter", "median_rel_error")
SOLVER_KEYS = ("mu", "rho", "step_init", "backtracking", "shrink", "max_iters", "stop_tol")
PROBE_NAMES = ("local_rip", "regularity", "robustness")


class SpecError(ValueError):
    """The experiment description is invalid."""


def _int_list(v, name):
    if v is None:
        return None
    if isinstance(v, (int, np.integer)):
        v = [v]
    try:
        out = [int(a) for a in v]
    except (TypeError, ValueError):
        raise SpecError(f"{name} must be a list of integers") from None
    if not out or any(a < 1 for a in out) or any(a != float(b) for a, b in zip(out, v)):
        raise SpecError(f"{name} must be a non-empty list of positive integers")
    return out


def _float_list(v, name):
    if v is None:
        return None
    if isinstance(v, (int, float)):
        v = [v]
    try:
        out = [float(a) for a in v]
    except (TypeError, ValueError):
        raise SpecError(f"{name} must be a list of numbers") from None
    if not out or not all(math.isfinite(a) for a in out):
        raise SpecError(f"{name} must be a non-empty list of finite numbers")
    return out


@dataclass
class ExperimentSpec:
    """What to run. Lists are grids; every combination is one cell.

    ``L=None`` in a phase transition selects the default grid
    ``round(c s (K + N))`` for ``c`` in 0.5, 0.75, ..., 4.
    """

    experiment: str = "phase_transition"
    L: list = None
    s: list = field(default_factory=lambda: [1, 2])
    K: list = field(default_factory=lambda: [10])
    N: list = field(default_factory=lambda: [10])
    trials: int = 25
    sigma: list = None
    snr: list = None
    kappa: list = field(default_factory=lambda: [1.0, 2.0, 5.0])
    ensemble: str = "gaussian"
    seed: int = 0
    success_threshold: float = 1e-3
    solver: dict = field(default_factory=dict)
    probes: list = field(default_factory=lambda: list(PROBE_NAMES))
    epsilon: float = 1.0 / 15.0
    probe_samples: int = 100
    out: str = None
    workers: int = 1
    timing: bool = False

    def __post_init__(self):
        self.experiment = str(self.experiment).replace("-", "_")
        if self.experiment not in EXPERIMENTS:
            raise SpecError(f"unknown experiment {self.experiment!r}")
        self.L = _int_list(self.L, "L")
        self.s = _int_list(self.s, "s")
        self.K = _int_list(self.K, "K")
        self.N = _int_list(self.N, "N")
        self.sigma = _float_list(self.sigma, "sigma")
        self.snr = _float_list(self.snr, "snr")
        self.kappa = _float_list(self.kappa, "kappa")
        if int(self.trials) != self.trials or self.trials < 1:
            raise SpecError("trials must be a positive integer")
        self.trials = int(self.trials)
        if int(self.seed) != self.seed or self.seed < 0:
            raise SpecError("seed must be a non-negative integer")
        self.seed = int(self.seed)
        if self.ensemble not in ("gaussian", "hadamard"):
            raise SpecError("ensemble must be 'gaussian' or 'hadamard'")
        if self.sigma is not None and any(v < 0 for v in self.sigma):
            raise SpecError("sigma values must be non-negative")
        if self.snr is not None and any(v <= 0 for v in self.snr):
            raise SpecError("snr values must be positive (dB)")
        if self.kappa is not None and any(v < 1 for v in self.kappa):
            raise SpecError("kappa values must be >= 1")
        if not isinstance(self.solver, dict) or set(self.solver) - set(SOLVER_KEYS):
            raise SpecError(f"solver overrides must use keys from {SOLVER_KEYS}")
        bad = set(self.probes) - set(PROBE_NAMES)
        if bad or not self.probes:
            raise SpecError(f"probes must be a non-empty subset of {PROBE_NAMES}")
        if not 0 < self.epsilon <= 1.0 / 15.0 + 1e-15:
            raise SpecError("epsilon must lie in (0, 1/15]")
        if self.workers < 1 or self.probe_samples < 1:
            raise SpecError("workers and probe_samples must be positive")
        if not 0 < self.success_threshold:
            raise SpecError("success_threshold must be positive")

    @classmethod
    def from_dict(cls, data):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise SpecError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise SpecError(str(exc)) from None

    @classmethod
    def from_file(cls, path, **overrides):
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise SpecError(f"config is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise SpecError("config must be a JSON object")
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(data)

    def canonical(self):
        """Stable JSON of everything that affects results."""
        d = dataclasses.asdict(self)
        for k in ("out", "workers"):
            d.pop(k)
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    def digest(self):
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]


_EXPERIMENT_CODES = {name: k for k, name in enumerate(EXPERIMENTS)}


def trial_seeds(master, experiment, coords, trial):
    """Independent ``(ensemble_seed, instance_seed)`` for one trial."""
    key = (_EXPERIMENT_CODES[experiment], *[int(c) for c in coords], int(trial))
    state = np.random.SeedSequence(master, spawn_key=key).generate_state(2, np.uint32)
    return int(state[0]), int(state[1])


# ---------------------------------------------------------------------------
# One trial
# ---------------------------------------------------------------------------


@dataclass
class TrialResult:
    rel_error: float
    iters: int
    ms: float
    snr_db: float = math.nan
    trace: list = None
    error: str = None


def run_trial(task):
    """Generate, initialize and solve one instance; solver faults become failures."""
    (L, K, N, s, kind, ens_seed, inst_seed, profile, sigma, solver, keep_trace,
     timing) = task
    t0 = time.perf_counter()
    try:
        ens = make_ensemble(L, K, N, s, kind, seed=ens_seed)
        inst = generate_instance(ens, scale_profile=profile, sigma=sigma, seed=inst_seed)
        init = spectral_init(inst, mu=solver.get("mu"))
        cfg = default_config(init, inst, **{k: v for k, v in solver.items() if k != "mu"})
        z, trace = descend(init, inst, cfg)
        err = relative_error(z, inst)
        rel = trace.column("rel_error").tolist() if keep_trace else None
        ms = (time.perf_counter() - t0) * 1e3 if timing else math.nan
        return TrialResult(err, trace.iterations, ms, snr_db(inst), rel)
    except (SolverError, ConvergenceError, DimensionError, ValueError) as exc:
        log.warning("trial L=%d s=%d seeds=(%d,%d) failed: %s", L, s, ens_seed, inst_seed, exc)
        return TrialResult(math.inf, 0, math.nan, math.nan, None, str(exc))


def _map(tasks, workers):
    if workers <= 1 or len(tasks) <= 1:
        return [run_trial(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_trial, tasks, chunksize=max(1, len(tasks) // (4 * workers))))


def _median(values):
    vals = [v for v in values if not math.isnan(v)]
    return float(np.median(vals)) if vals else math.nan


# ---------------------------------------------------------------------------
# Results and CSV
# ---------------------------------------------------------------------------


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    fields: tuple
    rows: list
    details: dict = field(default_factory=dict)
    text: str = None

    def header_lines(self):
        return [f"blinddemix {__version__}",
                f"experiment={self.spec.experiment} seed={self.spec.seed} "
                f"spec_sha256={self.spec.digest()}"]

    def to_csv(self):
        buf = io.StringIO()
        for line in self.header_lines():
            buf.write(f"# {line}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.fields)
        for row in self.rows:
            writer.writerow([_cell(row[k]) for k in self.fields])
        return buf.getvalue()

    def write(self, path=None):
        path = path or self.spec.out
        if path is None:
            raise SpecError("no output path given")
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())
        if self.text is not None:
            with open(_text_path(path), "w") as fh:
                fh.write(self.text)
        return path


def _text_path(path):
    return path[:-4] + ".txt" if path.endswith(".csv") else path + ".txt"


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "" if math.isnan(v) else repr(float(v))
    return str(v)


def _grid(spec, name, default):
    vals = getattr(spec, name)
    return vals if vals is not None else default


def default_L_grid(s, K, N):
    return sorted({max(1, round(c * s * (K + N))) for c in np.arange(0.5, 4.0001, 0.25)})


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------


def run_phase_transition(spec):
    """Success counts over an ``(L, s)`` grid for each ``(K, N)``; noiseless only."""
    if spec.sigma and any(v > 0 for v in spec.sigma):
        raise SpecError("phase transitions are noiseless; drop sigma")
    cells = []
    for K in spec.K:
        for N in spec.N:
            for s in spec.s:
                for L in _grid(spec, "L", default_L_grid(s, K, N)):
                    cells.append((L, s, K, N))
    rows = []
    for L, s, K, N in cells:
        tasks = [(L, K, N, s, spec.ensemble, *trial_seeds(spec.seed, spec.experiment,
                                                          (L, s, K, N), t),
                  None, 0.0, spec.solver, False, spec.timing)
                 for t in range(spec.trials)]
        results = _map(tasks, spec.workers)
        errs = [r.rel_error for r in results]
        rows.append({
            "L": L, "s": s, "K": K, "N": N, "trials": spec.trials,
            "successes": sum(e <= spec.success_threshold for e in errs),
            "median_rel_error": float(np.median(errs)),
            "median_iters": float(np.median([r.iters for r in results])),
            "median_ms": _median([r.ms for r in results]),
        })
        log.info("cell L=%d s=%d: %d/%d", L, s, rows[-1]["successes"], spec.trials)
    return ExperimentResult(spec, PHASE_FIELDS, rows)


def _noise_levels(spec):
    if spec.sigma is not None:
        return spec.sigma
    if spec.snr is not None:
        return [sigma_for_snr(v) for v in spec.snr]
    return [0.0, 0.01, 0.03, 0.1, 0.3]


def run_noise_sweep(spec):
    """Per-trial and per-level median errors for each noise level.

    Levels come from ``sigma`` or, failing that, from target ``snr`` values
    converted with :func:`~blinddemix.model.sigma_for_snr`.
    """
    L, K, N, s = (_grid(spec, "L", [240])[0], spec.K[0], spec.N[0], spec.s[0])
    rows = []
    summary = []
    for idx, sigma in enumerate(_noise_levels(spec)):
        tasks = [(L, K, N, s, spec.ensemble, *trial_seeds(spec.seed, spec.experiment,
                                                          (L, s, K, N, idx), t),
                  None, sigma, spec.solver, False, spec.timing)
                 for t in range(spec.trials)]
        results = _map(tasks, spec.workers)
        for t, r in enumerate(results):
            rows.append({"sigma": sigma, "snr_db": r.snr_db, "trial": t,
                         "rel_error": r.rel_error, "iters": r.iters})
        med = {"sigma": sigma, "snr_db": _median([r.snr_db for r in results]),
               "trial": "median", "rel_error": float(np.median([r.rel_error for r in results])),
               "iters": float(np.median([r.iters for r in results]))}
        rows.append(med)
        summary.append(med)
    return ExperimentResult(spec, NOISE_FIELDS, rows, details={"levels": summary})


def noise_slope(result):
    """Least-squares slope of median ``20 log10(rel_error)`` against median SNR."""
    pts = [(m["snr_db"], 20 * math.log10(m["rel_error"])) for m in result.details["levels"]
           if math.isfinite(m["snr_db"]) and m["rel_error"] > 0]
    if len(pts) < 2:
        raise SpecError("need at least two noisy levels to fit a slope")
    x, y = np.array(pts).T
    return float(np.polyfit(x, y, 1)[0])


def iterations_to_threshold(trace, threshold):
    hits = [k for k, v in enumerate(trace) if v <= threshold]
    return hits[0] if hits else math.inf


def run_kappa_study(spec):
    """Median relative-error traces for two sources with scales ``(1, kappa)``.

    Defaults to ``step_init = 1`` with backtracking.
    """
    L, K, N = _grid(spec, "L", [240])[0], spec.K[0], spec.N[0]
    solver = {"step_init": 1.0, **spec.solver}
    rows = []
    per_kappa = {}
    for idx, kappa in enumerate(spec.kappa):
        tasks = [(L, K, N, 2, spec.ensemble, *trial_seeds(spec.seed, spec.experiment,
                                                          (L, 2, K, N, idx), t),
                  (1.0, kappa), 0.0, solver, True, spec.timing)
                 for t in range(spec.trials)]
        results = _map(tasks, spec.workers)
        traces = [r.trace or [math.inf] for r in results]
        length = max(len(tr) for tr in traces)
        padded = np.array([tr + [tr[-1]] * (length - len(tr)) for tr in traces])
        med = np.median(padded, axis=0)
        for it, v in enumerate(med):
            rows.append({"kappa": kappa, "iter": it, "median_rel_error": float(v)})
        hits = [iterations_to_threshold(tr, spec.success_threshold) for tr in traces]
        per_kappa[kappa] = {"iterations_to_threshold": hits,
                            "median_iterations_to_threshold": float(np.median(hits))}
    return ExperimentResult(spec, KAPPA_FIELDS, rows, details=per_kappa)


def run_probes(spec):
    """Run the configured condition probes on one instance per grid point."""
    L, K, N, s = _grid(spec, "L", [1024])[0], spec.K[0], spec.N[0], spec.s[0]
    sigma = (spec.sigma or [0.0])[0]
    ens_seed, inst_seed = trial_seeds(spec.seed, spec.experiment, (L, s, K, N), 0)
    ens = make_ensemble(L, K, N, s, spec.ensemble, seed=ens_seed)
    inst = generate_instance(ens, sigma=sigma, seed=inst_seed)
    nspec = NeighborhoodSpec(epsilon=spec.epsilon, mu=spec.solver.get("mu"))
    reports = []
    for name in spec.probes:
        if name == "local_rip":
            reports.append(probe_local_rip(inst, nspec, spec.probe_samples, seed=spec.seed))
        elif name == "regularity":
            reports.append(probe_regularity(inst, nspec, spec.probe_samples, seed=spec.seed))
        else:
            reports.append(probe_robustness(inst, nspec))
    rows = []
    for rep in reports:
        for rec in rep.records:
            rows.append({"probe": rep.name, "sample": rec.get("sample", 0),
                         "value": rec.get("ratio", rec.get("grad_sq", rec.get("adjoint_noise"))),
                         "bound": rec.get("rhs", rec.get("bound")),
                         "pass": rec["pass"]})
    text = "".join(rep.to_text() for rep in reports)
    return ExperimentResult(spec, ("probe", "sample", "value", "bound", "pass"), rows,
                            details={r.name: r for r in reports}, text=text)


RUNNERS = {
    "phase_transition": run_phase_transition,
    "noise_sweep": run_noise_sweep,
    "kappa_study": run_kappa_study,
    "probes": run_probes,
}


def run(spec):
    return RUNNERS[spec.experiment](spec)
