import csv
import io
import json
import math

import numpy as np
import pytest

from blinddemix.harness import (
    ExperimentSpec,
    PHASE_FIELDS,
    SpecError,
    default_L_grid,
    iterations_to_threshold,
    noise_slope,
    run,
    trial_seeds,
)
from blinddemix.initialization import spectral_init
from blinddemix.model import generate_instance
from blinddemix.operators import make_ensemble
from blinddemix.solver import default_config, descend


def rows_of(csv_text):
    body = [ln for ln in csv_text.splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(io.StringIO("\n".join(body))))


# -- spec ---------------------------------------------------------------------


@pytest.mark.parametrize("bad", [
    dict(experiment="bogus"), dict(L=[]), dict(L=[0]), dict(K=[2.5]), dict(trials=0),
    dict(seed=-1), dict(ensemble="bernoulli"), dict(sigma=[-0.1]), dict(snr=[0.0]),
    dict(kappa=[0.5]), dict(solver={"eta": 1}), dict(probes=["nope"]), dict(epsilon=0.5),
    dict(workers=0),
])
def test_spec_validation(bad):
    with pytest.raises(SpecError):
        ExperimentSpec(**bad)


def test_spec_from_file_and_digest(tmp_path):
    cfg = tmp_path / "spec.json"
    cfg.write_text(json.dumps({"experiment": "phase_transition", "L": [40], "s": [1],
                               "trials": 3, "seed": 5}))
    spec = ExperimentSpec.from_file(cfg, trials=4, out="x.csv")
    assert spec.trials == 4 and spec.L == [40]
    same = ExperimentSpec.from_file(cfg, trials=4, out="y.csv", workers=3)
    assert spec.digest() == same.digest()  # output path and worker count do not matter
    other = ExperimentSpec.from_file(cfg, trials=5)
    assert spec.digest() != other.digest()


def test_spec_from_file_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(SpecError):
        ExperimentSpec.from_file(bad)
    unknown = tmp_path / "unknown.json"
    unknown.write_text(json.dumps({"grid": 1}))
    with pytest.raises(SpecError):
        ExperimentSpec.from_file(unknown)
    with pytest.raises(OSError):
        ExperimentSpec.from_file(tmp_path / "missing.json")


def test_trial_seeds_distinct_and_stable():
    a = trial_seeds(7, "phase_transition", (60, 1, 10, 10), 0)
    assert a == trial_seeds(7, "phase_transition", (60, 1, 10, 10), 0)
    others = {trial_seeds(7, "phase_transition", (60, 1, 10, 10), 1),
              trial_seeds(8, "phase_transition", (60, 1, 10, 10), 0),
              trial_seeds(7, "noise_sweep", (60, 1, 10, 10), 0),
              trial_seeds(7, "phase_transition", (61, 1, 10, 10), 0)}
    assert a not in others and len(others) == 4


def test_default_grid_brackets_boundary():
    grid = default_L_grid(2, 10, 10)
    assert grid[0] == 20 and grid[-1] == 160 and 60 in grid and len(grid) == 15


def test_iterations_to_threshold():
    assert iterations_to_threshold([1.0, 0.1, 1e-4, 1e-5], 1e-3) == 2
    assert math.isinf(iterations_to_threshold([1.0, 0.1], 1e-3))


# -- phase transition -----------------------------------------------------------


def test_phase_transition_schema_and_trivial_cell():
    spec = ExperimentSpec(experiment="phase_transition", L=[4], s=[1], K=[4], N=[4], trials=5)
    res = run(spec)
    text = res.to_csv()
    lines = text.splitlines()
    assert lines[0].startswith("# blinddemix ")
    assert "spec_sha256=" + spec.digest() in lines[1]
    assert lines[2] == ",".join(PHASE_FIELDS)
    (row,) = rows_of(text)
    assert row["successes"] == "0" and row["trials"] == "5"
    assert row["median_ms"] == ""  # timing is opt-in


def test_phase_transition_rejects_noise():
    with pytest.raises(SpecError):
        run(ExperimentSpec(experiment="phase_transition", L=[40], s=[1], sigma=[0.1]))


def test_phase_transition_timing_column():
    spec = ExperimentSpec(experiment="phase_transition", L=[40], s=[1], K=[4], N=[4], trials=2,
                          timing=True)
    (row,) = rows_of(run(spec).to_csv())
    assert float(row["median_ms"]) > 0


def test_determinism_byte_identical(tmp_path):
    spec = dict(experiment="phase_transition", L=[30, 40], s=[1], K=[5], N=[5], trials=3,
                seed=11)
    a = run(ExperimentSpec(**spec)).to_csv()
    b = run(ExperimentSpec(**spec)).to_csv()
    assert a == b
    c = run(ExperimentSpec(**spec, workers=2)).to_csv()
    assert a == c
    d = run(ExperimentSpec(**{**spec, "seed": 12})).to_csv()
    assert a != d


@pytest.mark.slow
def test_phase_transition_s1_cell():
    spec = ExperimentSpec(experiment="phase_transition", L=[60], s=[1], K=[10], N=[10],
                          trials=25)
    (row,) = run(spec).rows
    assert row["successes"] >= 0.9 * 25


@pytest.mark.slow
def test_success_rate_monotone_in_L():
    spec = ExperimentSpec(experiment="phase_transition", s=[1], K=[5], N=[5], trials=10,
                          seed=3)
    rates = [r["successes"] for r in run(spec).rows]
    inversions = sum(b < a for a, b in zip(rates, rates[1:]))
    assert inversions <= 1
    assert rates[0] == 0 and rates[-1] >= 9


# -- noise sweep ----------------------------------------------------------------


def test_noise_sweep_rows():
    spec = ExperimentSpec(experiment="noise_sweep", L=[120], s=[2], sigma=[0.0, 0.1],
                          trials=3)
    res = run(spec)
    rows = rows_of(res.to_csv())
    assert len(rows) == 2 * (3 + 1)
    assert [r["trial"] for r in rows[:4]] == ["0", "1", "2", "median"]
    clean = res.details["levels"][0]
    assert clean["sigma"] == 0.0 and clean["rel_error"] <= 1e-3
    assert math.isinf(clean["snr_db"])
    noisy = res.details["levels"][1]
    assert noisy["rel_error"] > clean["rel_error"]


def test_noise_sweep_from_snr():
    spec = ExperimentSpec(experiment="noise_sweep", L=[120], s=[2], snr=[10.0, 30.0],
                          trials=3)
    res = run(spec)
    levels = res.details["levels"]
    assert abs(levels[0]["snr_db"] - 10) < 2 and abs(levels[1]["snr_db"] - 30) < 2
    assert noise_slope(res) < 0


@pytest.mark.slow
def test_noise_sweep_doubling_L_helps():
    meds = []
    for L in (120, 240):
        spec = ExperimentSpec(experiment="noise_sweep", L=[L], s=[2], sigma=[0.1], trials=15)
        meds.append(run(spec).details["levels"][0]["rel_error"])
    assert meds[1] < meds[0]


# -- kappa study ----------------------------------------------------------------


def test_kappa_study_schema():
    spec = ExperimentSpec(experiment="kappa_study", L=[120], kappa=[1.0, 3.0], trials=2)
    res = run(spec)
    rows = rows_of(res.to_csv())
    assert set(rows[0]) == {"kappa", "iter", "median_rel_error"}
    assert {r["kappa"] for r in rows} == {"1.0", "3.0"}
    assert set(res.details) == {1.0, 3.0}


@pytest.mark.slow
def test_kappa_traces_monotone():
    for kappa in (1.0, 2.0, 5.0):
        ens = make_ensemble(240, 10, 10, 2, seed=1)
        inst = generate_instance(ens, scale_profile=(1.0, kappa), seed=1)
        init = spectral_init(inst)
        _, trace = descend(init, inst, default_config(init, inst, step_init=1.0))
        assert np.all(np.diff(trace.column("objective")) <= 0)


# -- probes ---------------------------------------------------------------------


def test_probes_runner(tmp_path):
    spec = ExperimentSpec(experiment="probes", L=[128], s=[2], K=[4], N=[4], sigma=[0.05],
                          probe_samples=4, out=str(tmp_path / "p.csv"))
    res = run(spec)
    res.write()
    rows = rows_of((tmp_path / "p.csv").read_text())
    assert [r["probe"] for r in rows].count("local_rip") == 4
    assert [r["probe"] for r in rows].count("robustness") == 1
    text = (tmp_path / "p.txt").read_text()
    assert "local_rip:" in text and "regularity:" in text and "robustness:" in text
