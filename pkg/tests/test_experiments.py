"""Experiment runners: result I/O, verdict logic and precondition failures."""

import csv
import json

import numpy as np
import pytest

from flowlab.experiments import (CSV_COLUMNS, EXPERIMENTS, ExperimentError, ExperimentResult,
                                 config_digest, run_experiment)

OU_PAIR = {"base": {"name": "ou", "rate": 1.0, "sigma": 1.0},
           "perturbed": {"name": "ou", "rate": 1.0, "sigma": 0.5}}


def small_perturbation(**tol):
    return {"model": {"name": "ou", "rate": 1.0, "sigma": 1.0}, "x": 1.0, "t": 0.5, "h": 0.01,
            "delta_list": [0.0, 0.2, 0.1, 0.05], "M": 64, "seed": 3, "tolerances": tol}


def test_registry_order_is_stable():
    assert list(EXPERIMENTS)[:3] == ["decomposition_convergence", "skorohod_variance", "decay_rates"]
    assert "invariant" in EXPERIMENTS


def test_unknown_experiment_raises():
    with pytest.raises(KeyError):
        run_experiment("nope", {})


def test_missing_seed_raises():
    cfg = small_perturbation()
    del cfg["seed"]
    with pytest.raises(ValueError):
        run_experiment("perturbation", cfg)


def test_config_digest_is_order_independent():
    a = {"x": 1.0, "M": 4, "seed": 1}
    b = {"seed": 1, "M": 4, "x": 1.0}
    assert config_digest(a) == config_digest(b)
    assert config_digest(a) != config_digest({**a, "seed": 2})


def test_result_write_json_and_csv(tmp_path):
    res = run_experiment("perturbation", small_perturbation())
    jpath, cpath = res.write(tmp_path, "pert")
    data = json.loads(open(jpath).read())
    assert data["name"] == "perturbation"
    assert data["verdicts"] == res.verdicts
    assert data["passed"] == res.passed
    assert data["wall_time"] > 0
    with open(cpath, newline="") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == CSV_COLUMNS
    assert len(rows) - 1 == len(res.tables)
    assert all(r[0] == "perturbation" for r in rows[1:])


def test_zero_delta_remainder_is_exactly_zero():
    res = run_experiment("perturbation", small_perturbation())
    assert res.verdicts["zero_delta"] is True


def test_verdicts_monotone_in_tolerance():
    tight = run_experiment("perturbation", small_perturbation(slope_tol=1e-6, ratio_max=1.0 + 1e-9))
    loose = run_experiment("perturbation", small_perturbation(slope_tol=10.0, ratio_max=1e6))
    for key, ok in tight.verdicts.items():
        assert loose.verdicts[key] or not ok
    assert loose.passed
    assert tight.tables[0]["measured"] == loose.tables[0]["measured"]


def test_nan_is_serialized_as_null():
    res = ExperimentResult("x", "d", tables=[{"measured": float("nan")}])
    assert json.loads(res.to_json())["tables"][0]["measured"] is None


def test_decay_aborts_when_tangent_condition_fails():
    cfg = {"model": {"name": "gbm", "beta": 0.1, "alpha": 0.2}, "seed": 1, "M": 16,
           "t_list": [1.0, 2.0]}
    with pytest.raises(ExperimentError) as info:
        run_experiment("decay_rates", cfg)
    assert info.value.report is not None


def test_discretization_requires_constant_diffusion():
    cfg = {"model": {"name": "gbm", "beta": -1.0, "alpha": 0.2}, "seed": 1, "M": 16}
    with pytest.raises(ExperimentError):
        run_experiment("discretization_bound", cfg)


def test_meanfield_without_noise_has_no_bias():
    # sigma = 0: every particle equals the empirical mean, which follows the Euler ODE exactly
    cfg = {"sigma": 0.0, "N_list": [4, 16], "M": 4, "h": 0.05, "t": 0.5, "seed": 2}
    res = run_experiment("meanfield", cfg)
    bias = [r["measured"] for r in res.tables if r["quantity"] == "bias"]
    assert max(bias) <= 1e-14
    assert res.verdicts["bias_slope"] is False


def test_meanfield_limit_matches_independent_euler():
    cfg = {"sigma": 0.0, "N_list": [2, 4], "M": 2, "h": 0.1, "t": 1.0, "seed": 2, "gamma": 2.0}
    res = run_experiment("meanfield", cfg)
    m = 1.0
    for _ in range(10):
        m = m + (-m - 2.0 * np.tanh(m)) * 0.1
    assert res.notes["limit_euler"] == pytest.approx(m, rel=1e-13)


def test_uniform_difference_reports_growth_for_expanding_pair():
    pair = {"base": {"name": "gbm", "beta": 0.5, "alpha": 0.2},
            "perturbed": {"name": "gbm", "beta": 0.25, "alpha": 0.2}}
    cfg = {"pair": pair, "t_list": [1.0, 4.0], "M": 256, "h": 0.01, "seed": 1}
    res = run_experiment("uniform_difference", cfg)
    assert res.verdicts["plateau_x0"] is False
    assert res.notes["warnings"]


def test_thread_count_does_not_change_results():
    a = run_experiment("perturbation", {**small_perturbation(), "threads": 1})
    b = run_experiment("perturbation", {**small_perturbation(), "threads": 3})
    assert a.tables == b.tables
    assert a.slopes == b.slopes


def test_ou_plateau_small_run_passes():
    cfg = {"pair": OU_PAIR, "t_list": [2.0, 4.0], "M": 512, "h": 0.02, "seed": 5}
    res = run_experiment("uniform_difference", cfg)
    assert res.verdicts["plateau_x0"]
    assert "kappa_fit_x0" in res.notes
