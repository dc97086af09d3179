"""Command-line entry point.

Exit codes: 0 success, 1 invalid spec, 2 I/O failure, 3 internal solver fault.
"""

import argparse
import json
import logging
import sys

from . import __version__
from .exceptions import ConvergenceError, DimensionError, SolverError
from .harness import ExperimentSpec, SpecError, run, trial_seeds
from .initialization import spectral_init
from .model import (
    generate_instance,
    load_instance,
    relative_error,
    save_instance,
    snr_db,
)
from .operators import make_ensemble
from .solver import default_config, descend

EXIT_OK, EXIT_SPEC, EXIT_IO, EXIT_SOLVER = 0, 1, 2, 3

SUBCOMMANDS = ("phase-transition", "noise-sweep", "kappa-study", "probes", "solve")


def _ints(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="blinddemix",
        description="Blind deconvolution and demixing experiments.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON experiment description")
        p.add_argument("--L", type=_ints, help="measurement counts (comma list)")
        p.add_argument("--K", type=_ints)
        p.add_argument("--N", type=_ints)
        p.add_argument("--s", type=_ints)
        p.add_argument("--sigma", type=_floats, help="noise levels (comma list)")
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--trials", type=int)
        p.add_argument("--out", help="output CSV path")
        p.add_argument("--ensemble", choices=("gaussian", "hadamard"))
        p.add_argument("--workers", type=int, help="parallel worker processes")
        p.add_argument("--timing", action="store_true", default=None,
                       help="record wall-clock columns (makes output non-reproducible)")
        p.add_argument("--step-init", type=float, dest="step_init")
        p.add_argument("--max-iters", type=int, dest="max_iters")
        p.add_argument("--mu", type=float)
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "noise-sweep":
            p.add_argument("--snr", type=_floats, help="target SNR levels in dB")
        if name == "kappa-study":
            p.add_argument("--kappa", type=_floats)
        if name == "probes":
            p.add_argument("--epsilon", type=float)
            p.add_argument("--samples", type=int, dest="probe_samples")
            p.add_argument("--probes", type=lambda t: t.split(","),
                           help="comma list of local_rip,regularity,robustness")
        if name == "solve":
            p.add_argument("--instance", help="load a saved instance instead of drawing one")
            p.add_argument("--save-instance", dest="save_instance")
    return parser


def spec_from_args(args):
    fields = ("L", "K", "N", "s", "sigma", "seed", "trials", "out", "ensemble", "workers",
              "timing", "snr", "kappa", "epsilon", "probe_samples", "probes")
    overrides = {f: getattr(args, f, None) for f in fields}
    overrides = {k: v for k, v in overrides.items() if v is not None}
    solver = {k: getattr(args, k) for k in ("step_init", "max_iters", "mu")
              if getattr(args, k) is not None}
    experiment = args.command.replace("-", "_")
    if args.config:
        spec = ExperimentSpec.from_file(args.config, **overrides)
        spec.experiment = experiment
        spec.solver = {**spec.solver, **solver}
        spec.__post_init__()
        return spec
    return ExperimentSpec(experiment=experiment, solver=solver, **overrides)


def _solve(spec, args):
    if getattr(args, "instance", None):
        inst = load_instance(args.instance)
    else:
        L = (spec.L or [120])[0]
        K, N, s = spec.K[0], spec.N[0], spec.s[0]
        ens_seed, inst_seed = trial_seeds(spec.seed, "solve", (L, s, K, N), 0)
        ens = make_ensemble(L, K, N, s, spec.ensemble, seed=ens_seed)
        inst = generate_instance(ens, sigma=(spec.sigma or [0.0])[0], seed=inst_seed)
    if getattr(args, "save_instance", None):
        save_instance(inst, args.save_instance)
    init = spectral_init(inst, mu=spec.solver.get("mu"))
    overrides = {k: v for k, v in spec.solver.items() if k != "mu"}
    cfg = default_config(init, inst, record_timing=spec.timing, **overrides)
    z, trace = descend(init, inst, cfg)
    ens = inst.ensemble
    summary = {"L": ens.L, "K": ens.K, "N": ens.N, "s": ens.s, "kind": ens.kind.value,
               "seed": spec.seed, "sigma": inst.sigma, "iterations": trace.iterations,
               "stop_reason": trace.stop_reason, "rel_error": relative_error(z, inst),
               "init_rel_error": relative_error(init.pair, inst),
               "snr_db": None if inst.sigma == 0 else snr_db(inst)}
    header = [f"blinddemix {__version__}",
              f"experiment=solve seed={spec.seed} spec_sha256={spec.digest()}"]
    if spec.out:
        with open(spec.out, "w", newline="") as fh:
            trace.write_csv(fh, header_lines=header)
    else:
        trace.write_csv(sys.stdout, header_lines=header)
    print(json.dumps(summary, sort_keys=True), file=sys.stderr if not spec.out else sys.stdout)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        spec = spec_from_args(args)
        if spec.experiment == "solve":
            _solve(spec, args)
            return EXIT_OK
        result = run(spec)
        if spec.out:
            result.write(spec.out)
        else:
            sys.stdout.write(result.to_csv())
            if result.text:
                sys.stderr.write(result.text)
    except (SpecError, DimensionError) as exc:
        print(f"invalid spec: {exc}", file=sys.stderr)
        return EXIT_SPEC
    except OSError as exc:
        print(f"I/O failure: {exc}", file=sys.stderr)
        return EXIT_IO
    except (SolverError, ConvergenceError) as exc:
        print(f"solver fault: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (ValueError, ArithmeticError) as exc:
        print(f"internal fault: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
