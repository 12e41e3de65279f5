import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flowlab.model import (CATALOG, ModelEvaluationError, ModelPair, ModelSpec, build_model, delta_eval,
                           eval_derivatives, finite_difference_check, frozen_drift, gbm, langevin_tanh, ou,
                           tanh_field, with_extra_drift)
from symbolic_models import nonlinear_1d, nonlinear_2d


def _samples(d, seed=0, count=10):
    rng = np.random.default_rng(seed)
    return [(0.0, rng.uniform(-3, 3, d)) for _ in range(count)]


@pytest.mark.parametrize("model", [ou(1.3, 0.7, 2), gbm(-0.4, 0.3), langevin_tanh(3), langevin_tanh(2, coords=[1]),
                                   nonlinear_1d(), nonlinear_2d()], ids=lambda m: m.name)
def test_finite_difference_check_passes(model):
    rep = finite_difference_check(model, _samples(model.d), tol=1e-6)
    assert rep.passed, rep.errors


@settings(max_examples=25, deadline=None)
@given(rate=st.floats(0.1, 3), sigma=st.floats(0.0, 2), beta=st.floats(-2, 2), alpha=st.floats(0, 1))
def test_linear_models_pass_fd_for_any_parameters(rate, sigma, beta, alpha):
    assert finite_difference_check(ou(rate, sigma, 2), _samples(2)).passed
    assert finite_difference_check(gbm(beta, alpha), _samples(1)).passed


def test_fd_check_catches_wrong_gradient():
    m = langevin_tanh(1)
    bad = ModelSpec(**{**m.__dict__, "drift_grad": lambda t, x: -np.ones(np.shape(x) + (1,))})
    assert not finite_difference_check(bad, _samples(1)).passed


def test_langevin_first_coordinate_example():
    # U = |x|^2/2 + log cosh x_1: grad b(0) = -diag(2, 1)
    g = langevin_tanh(2, coords=[0]).drift_grad(0.0, np.zeros(2))
    assert np.array_equal(g, -np.diag([2.0, 1.0]))


def test_ou_gradient_is_minus_rate_identity():
    g = ou(0.7, 1.0, 3).drift_grad(0.0, np.zeros(3))
    assert np.array_equal(g, -0.7 * np.eye(3))


def test_gbm_diffusion_gradient():
    m = gbm(0.1, 0.2)
    assert m.diffusion_grad(0.0, np.array([3.0]))[0, 0, 0] == 0.2
    assert m.diffusion_column_grad(0.0, np.array([3.0]), 0).shape == (1, 1)


def test_eval_derivatives_bundle_and_errors():
    out = eval_derivatives(ou(1.0, 2.0, 2), 0.5, np.ones(2))
    assert np.allclose(out.a, 4 * np.eye(2))
    with pytest.raises(ValueError):
        eval_derivatives(ou(), -1.0, np.ones(1))
    with pytest.raises(ValueError):
        eval_derivatives(ou(), 0.0, np.array([np.nan]))
    m = ou()
    blow = ModelSpec(**{**m.__dict__, "drift": lambda t, x: np.asarray(x) / 0.0})
    with pytest.raises(ModelEvaluationError):
        with np.errstate(divide="ignore", invalid="ignore"):
            eval_derivatives(blow, 0.0, np.ones(1))


def test_delta_eval_identical_pair_is_zero():
    p = ModelPair(langevin_tanh(2), langevin_tanh(2))
    dl = delta_eval(p, 0.0, np.random.default_rng(0).normal(size=(5, 2)))
    assert not dl.db.any() and not dl.dsigma.any() and not dl.da.any()


def test_delta_eval_da_is_not_dsigma_squared():
    # sigma = 1, sigma_bar = 0.5: da = 1 - 0.25 = 0.75, while dsigma^2 = 0.25
    dl = delta_eval(ModelPair(ou(1, 1.0), ou(1, 0.5)), 0.0, np.ones(1))
    assert dl.da[0, 0] == pytest.approx(0.75)
    assert dl.dsigma[0, 0] == pytest.approx(0.5)


def test_pair_dimension_mismatch():
    with pytest.raises(ValueError):
        ModelPair(ou(d=2), ou(d=1))


def test_build_model_and_catalog():
    assert build_model("ou", rate=2.0).metadata["rate"] == 2.0
    with pytest.raises(KeyError):
        build_model("nope")
    with pytest.raises(KeyError):
        build_model("ou", bogus=1)
    assert list(CATALOG) == ["ou", "gbm", "langevin_tanh", "frozen_drift"]
    fz = frozen_drift(ou(), 0.2)
    assert fz.H == 0.2
    with pytest.raises(ValueError):
        frozen_drift(ou(), 0.0)


def test_with_extra_drift_adds_scaled_field():
    f, g, h = tanh_field(2)
    m = with_extra_drift(ou(1.0, 1.0, 2), 0.3, f, g, h)
    x = np.array([0.4, -1.2])
    assert np.allclose(m.drift(0.0, x), -x + 0.3 * np.tanh(x))
    assert finite_difference_check(m, _samples(2)).passed
