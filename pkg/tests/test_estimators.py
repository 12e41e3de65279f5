import json

import numpy as np
import pytest
from scipy import stats

from flowlab.estimators import (EstimationError, SingularDiffusionError, WeightSpec, bel_gradient, bel_hessian,
                                check_bel_model, dumps, flow_difference_moments, flow_moments, inv_sqrt_diffusion,
                                invariant_shift, moment_estimate, moment_from_norms, observable,
                                semigroup_difference)
from flowlab.model import ModelPair, gbm, langevin_tanh, ou
from flowlab.oracle import LinearOracle, oracle_difference_moment, oracle_moment
from symbolic_models import nonlinear_2d


def test_moment_from_norms_values():
    est = moment_from_norms([1.0, 2.0, 3.0, np.nan], 2, seed=5)
    assert est.value == pytest.approx(np.sqrt(14 / 3))
    assert est.diverged == 1 and est.samples == 3
    # delta method: se(m^{1/2}) = se(m) / (2 sqrt(m))
    se_raw = np.std([1.0, 4.0, 9.0], ddof=1) / np.sqrt(3)
    assert est.stderr == pytest.approx(se_raw / (2 * np.sqrt(14 / 3)))
    assert est.halfwidth == pytest.approx(stats.norm.ppf(0.975) * est.stderr)
    with pytest.raises(EstimationError):
        moment_from_norms([np.nan, np.inf], 2)
    with pytest.raises(ValueError):
        moment_from_norms([1.0], 0)


def test_moment_estimate_requires_two_samples():
    with pytest.raises(ValueError):
        moment_estimate(lambda s, ids: np.ones(len(ids)), 2, 1, 0)


def test_flow_moments_match_oracle():
    model = ou(1.0, 1.0)
    ests = flow_moments(model, 0.0, [0.5, 2.0], np.ones(1), 4, 4000, 0.01, seed=3)
    for t, e in zip([0.5, 2.0], ests):
        exact = oracle_moment(LinearOracle.ou(1.0, 1.0), 4, t, np.ones(1))
        assert abs(e.value - exact) <= 4 * e.stderr + 0.01 * exact


def test_flow_difference_moments_match_oracle():
    pair = ModelPair(ou(1.0, 1.0, 2), ou(2.0, 0.5, 2))
    x = np.array([1.0, -1.0])
    e = flow_difference_moments(pair, 0.0, 1.5, x, 2, 4000, 0.01, seed=2)
    exact = oracle_difference_moment(LinearOracle.ou(1.0, 1.0, 2), LinearOracle.ou(2.0, 0.5, 2), 2, 0.0, 1.5, x)
    assert abs(e.value - exact) <= 4 * e.stderr + 0.01 * exact


def test_moments_reproducible_across_threads():
    pair = ModelPair(langevin_tanh(2), ou(1.0, 1.0, 2))
    a = flow_difference_moments(pair, 0.0, 1.0, np.ones(2), 2, 600, 0.05, seed=9, threads=1)
    b = flow_difference_moments(pair, 0.0, 1.0, np.ones(2), 2, 600, 0.05, seed=9, threads=3)
    assert a.value == b.value and a.stderr == b.stderr


def test_observables():
    y = np.array([[1.0, 2.0]])
    assert observable("linear", 2).value(y)[0] == 1.0
    assert observable("square", 2).value(y)[0] == 5.0
    assert np.array_equal(observable("square", 2).grad(y), 2 * y)
    assert observable("constant", 2).value(y)[0] == 1.0
    assert observable("tanh", 2).grad(np.zeros((1, 2)))[0, 0] == 1.0
    with pytest.raises(KeyError):
        observable("cubic")


def test_weight_spec():
    w = WeightSpec("cosine", 0.5)
    assert w.phi(0.2) == 0.0 and w.phi(1.0) == pytest.approx(1.0)
    eps = 1e-6
    assert w.dphi(0.8) == pytest.approx((w.phi(0.8 + eps) - w.phi(0.8 - eps)) / (2 * eps), rel=1e-6)
    with pytest.raises(ValueError):
        WeightSpec("box")
    with pytest.raises(ValueError):
        WeightSpec("cosine", 0.0)


def test_inv_sqrt_diffusion_gradient_against_finite_differences():
    m = gbm(0.1, 0.5)
    x = np.array([[1.3]])
    inv, G = inv_sqrt_diffusion(m, 0.0, x, want_grad=True)
    assert inv[0, 0, 0] == pytest.approx(1 / (0.5 * 1.3))
    assert G[0, 0, 0, 0] == pytest.approx(-1 / (0.5 * 1.3 ** 2))
    inv_c, G_c = inv_sqrt_diffusion(ou(1.0, 2.0, 2), 0.0, np.zeros((1, 2)), want_grad=True)
    assert np.allclose(inv_c, 0.5 * np.eye(2)) and not G_c.any()


def test_bel_model_checks():
    with pytest.raises(SingularDiffusionError):
        check_bel_model(gbm(0.1, 0.2), 0.0, np.zeros(1))
    with pytest.raises(ValueError):
        check_bel_model(nonlinear_2d(), 0.0, np.array([0.5, 0.3]))  # non-symmetric sigma
    with pytest.raises(ValueError):
        check_bel_model(ou(1.0, np.ones((1, 2)), 1), 0.0, np.zeros(1))  # r != d


def test_bel_gradient_and_hessian_small_runs():
    m = ou(1.0, 1.0)
    g = bel_gradient(m, observable("linear"), 0.0, 1.0, np.ones(1), M=2000, seed=1, h=0.01)
    assert abs(g.value[0] - np.exp(-1)) <= 4 * g.stderr[0]
    H = bel_hessian(m, observable("square"), 0.0, 1.0, np.ones(1), M=2000, seed=1, h=0.01)
    assert abs(H.value[0, 0] - 2 * np.exp(-2)) <= 4 * H.stderr[0, 0]
    Hs = bel_hessian(m, observable("square"), 0.0, 1.0, np.ones(1), M=2000, seed=1, h=0.01, split=0.5)
    assert abs(Hs.value[0, 0] - 2 * np.exp(-2)) <= 4 * Hs.stderr[0, 0]
    with pytest.raises(ValueError):
        bel_hessian(m, observable("square"), 0.0, 1.0, np.ones(1), M=10, seed=1, split=1.5)
    assert json.loads(dumps(g))["samples"] == 2000


def test_bel_reproducible_across_threads():
    m = langevin_tanh(1)
    a = bel_gradient(m, observable("tanh"), 0.0, 0.5, np.ones(1), M=1100, seed=4, h=0.05, threads=1)
    b = bel_gradient(m, observable("tanh"), 0.0, 0.5, np.ones(1), M=1100, seed=4, h=0.05, threads=2)
    assert np.array_equal(a.value, b.value) and np.array_equal(a.stderr, b.stderr)


def test_semigroup_guards():
    pair = ModelPair(ou(1.0, 1.0), ou(2.0, 0.5))
    with pytest.raises(EstimationError):
        semigroup_difference(pair, observable("square"), 0.0, 1.0, np.ones(1), M_lhs=10, M_out=10**4,
                             M_in=10**4, max_cost=1e6)
    with pytest.raises(ValueError):
        semigroup_difference(pair, observable("square"), 0.0, 1.0, np.ones(1), M_lhs=10, nodes=3)


def test_semigroup_small_run_is_consistent():
    pair = ModelPair(ou(1.0, 1.0), ou(2.0, 0.5))
    sd = semigroup_difference(pair, observable("square"), 0.0, 1.0, np.ones(1), M_lhs=4096, M_out=32,
                              M_in=64, nodes=4, h=1 / 64, seed=2)
    assert sd.z_score <= 4
    assert set(sd.to_dict()) >= {"lhs", "rhs", "combined_stderr", "z_score"}


def test_invariant_shift_identical_pair_is_zero():
    m = ou(1.0, 1.0)
    est = invariant_shift(ModelPair(m, m), observable("square"), M_out=4, M_in=4, nodes=2, h=1 / 16, seed=0)
    assert est.value == 0.0 and est.horizon == pytest.approx(5.0)
