import json

import numpy as np
import pytest

from flowlab.model import gbm, langevin_tanh, ou
from flowlab.regularity import (SampleSpec, chi, condition_report, diffusion_log_norms, estimate_lambda_A,
                                growth_params, kappa_n, lambda_A_n, log_norm, log_norm_matrix, rho_params,
                                sigma_bound_from_a)


def test_log_norm_of_symmetric_and_skew_parts():
    M = np.array([[0.0, 5.0], [-5.0, -1.0]])  # skew part contributes nothing
    assert log_norm(M) == pytest.approx(0.0)


def test_ou_lambda_A_equals_rate():
    assert estimate_lambda_A(ou(1.0, 1.0, 2))["lambda_A"] == pytest.approx(1.0)
    assert estimate_lambda_A(ou(0.3, 2.0, 3))["lambda_A"] == pytest.approx(0.3)


def test_gbm_lambda_A_is_minus_beta_minus_half_alpha_squared():
    # A = 2 beta + alpha^2, lambda_A = -A / 2
    assert estimate_lambda_A(gbm(0.1, 0.2))["lambda_A"] == pytest.approx(-0.12)
    assert estimate_lambda_A(gbm(-1.0, 0.2))["lambda_A"] == pytest.approx(0.98)


def test_langevin_A_at_origin_and_lambda():
    A = log_norm_matrix(langevin_tanh(1), 0.0, np.zeros(1))
    assert A[0, 0] == pytest.approx(-4.0)
    lam = estimate_lambda_A(langevin_tanh(2))["lambda_A"]
    assert 1.0 <= lam < 1.001  # infimum 1 approached at the box edge


def test_rho_and_lambda_A_n():
    assert np.allclose(diffusion_log_norms(gbm(0.1, 0.2)), [0.2])
    rho_star, rho_sq = rho_params(gbm(0.1, 0.3))
    assert rho_star == pytest.approx(0.3) and rho_sq == pytest.approx(0.09)
    assert lambda_A_n(1.0, 2, 4, 0.5) == pytest.approx(1.0 - 2 * 2 * 0.25 / 2)


def test_kappa_n_ou_hand_value():
    # alpha0 = 1, beta2 = 1, n = 2: kappa = 1 + sqrt(1) / (2 sqrt(1)) = 1.5
    k = kappa_n(growth_params(ou(1.0, 1.0)), 2)
    assert k["ok"] and k["kappa_n"] == pytest.approx(1.5)
    bad = kappa_n(growth_params(gbm(0.1, 0.2)), 2)
    assert not bad["ok"] and np.isnan(bad["kappa_n"])
    with pytest.raises(ValueError):
        kappa_n(growth_params(ou()), 1.5)


def test_chi_values():
    # GBM: no Hessians, rho_star = alpha
    assert chi(gbm(-1.0, 0.2)) == pytest.approx(1.04)
    # Langevin 1D: sup |2 sech^2 tanh| = 4 / (3 sqrt 3)
    dense = SampleSpec(low=-3, high=3, count=20000)
    assert chi(langevin_tanh(1), dense) == pytest.approx(1 + 4 / (3 * np.sqrt(3)), rel=1e-4)
    assert chi(ou(), c=2.5) == 2.5


def test_sigma_bound():
    assert sigma_bound_from_a(0.5, 0.25) == 1.0
    with pytest.raises(ValueError):
        sigma_bound_from_a(1.0, 0.0)


def test_condition_report_serializes_flat():
    rep = condition_report(gbm(0.1, 0.2), 2)
    assert rep.T_n is False and rep.P_n is False
    d = json.loads(rep.to_json())
    assert d["p_kappa_n"] is None and d["lambda_A"] == pytest.approx(-0.12)
    assert all(not isinstance(v, dict) for v in d.values())
    ok = condition_report(ou(1.0, 1.0), 2, {"box": (-2, 2), "count": 50})
    assert ok.T_n and ok.P_n and ok.to_dict()["p_kappa_n"] == pytest.approx(1.5)


def test_sample_spec_validation():
    with pytest.raises(ValueError):
        SampleSpec(count=0)
    with pytest.raises(ValueError):
        SampleSpec(low=1, high=0)
    assert SampleSpec(count=5).points(2).shape == (5 + 4 + 1, 2)
