import csv

import numpy as np
import pytest
from scipy import stats

from flowlab.interpolation import fit_loglog_slope
from flowlab.model import gbm, langevin_tanh, ou, tanh_field, with_extra_drift
from flowlab.oracle import LinearOracle, oracle_flow
from flowlab.paths import (DivergenceError, drift_sensitivity, euler_step, integrate_flow,
                           integrate_frozen_drift, integrate_hessian, integrate_tangent, refine, restart_flow,
                           restart_terminal, sample_brownian, write_path_csv)
from symbolic_models import nonlinear_1d, nonlinear_2d


def test_increments_are_gaussian_with_variance_h():
    g = sample_brownian(7, np.arange(400), 0.0, 1.0, 50, 1)
    z = g.increments.reshape(-1) / np.sqrt(g.h)
    assert stats.kstest(z, "norm").pvalue > 0.01


def test_batch_and_single_path_streams_agree():
    batch = sample_brownian(3, [5, 9], 0.0, 2.0, 16, 2)
    one = sample_brownian(3, 9, 0.0, 2.0, 16, 2)
    assert np.array_equal(batch.increments[1], one.increments)


def test_seed_is_required():
    with pytest.raises(ValueError):
        sample_brownian(None, 0, 0.0, 1.0, 4)


def test_refine_preserves_sums_and_is_deterministic():
    g = sample_brownian(1, np.arange(8), 0.0, 1.0, 10, 2)
    f = refine(g, 4)
    assert f.steps == 40 and f.level == 1
    assert np.allclose(f.coarsen(4).increments, g.increments, atol=1e-15)
    assert np.array_equal(refine(g, 4).increments, f.increments)


def test_refined_increments_have_the_fine_law():
    g = sample_brownian(11, np.arange(300), 0.0, 1.0, 8, 1)
    f = refine(refine(g, 2), 2)
    z = f.increments.reshape(-1) / np.sqrt(f.h)
    assert stats.kstest(z, "norm").pvalue > 0.01
    # sub-increments of one coarse step are exchangeable with equal variance and
    # conditionally negatively correlated; unconditionally they are independent
    pieces = f.increments[..., 0].reshape(300, 8, 4)
    c = np.corrcoef(pieces[:, :, 0].ravel(), pieces[:, :, 1].ravel())[0, 1]
    assert abs(c) < 0.05


def test_euler_strong_order_against_exact_ou():
    oracle = LinearOracle.ou(1.0, 1.0)
    model = ou(1.0, 1.0)
    base = sample_brownian(5, np.arange(512), 0.0, 1.0, 8, 1)
    fine = base
    for _ in range(6):
        fine = refine(fine, 2)
    ref = oracle_flow(oracle, fine, np.ones(1))[:, -1, 0]
    hs, errs = [], []
    for lv in range(5):
        g = fine.coarsen(2 ** (6 - lv))
        x = integrate_flow(model, g, np.ones(1)).terminal[:, 0]
        hs.append(g.h)
        errs.append(np.sqrt(np.mean((x - ref) ** 2)))
    slope, _ = fit_loglog_slope(hs, errs)
    assert slope >= 0.8


def test_batch_results_are_bit_identical_to_single_paths():
    m = nonlinear_2d()
    g = sample_brownian(2, np.arange(6), 0.0, 1.0, 32, 2)
    fb, tb, hb = integrate_hessian(m, g, np.array([0.3, -0.2]))
    f1, t1, h1 = integrate_hessian(m, g.take(4), np.array([0.3, -0.2]))
    assert np.array_equal(fb.states[4], f1.states)
    assert np.array_equal(tb.matrices[4], t1.matrices)
    assert np.array_equal(hb.tensors[4], h1.tensors)


def _fd_flow(model, g, x, eps=1e-6):
    d = model.d
    cols = []
    for i in range(d):
        e = np.zeros(d)
        e[i] = eps
        cols.append((integrate_flow(model, g, x + e).terminal - integrate_flow(model, g, x - e).terminal) / (2 * eps))
    return np.stack(cols, axis=-2)  # [..., i, k]


@pytest.mark.parametrize("model", [nonlinear_2d(), langevin_tanh(2), gbm(-0.3, 0.4)], ids=lambda m: m.name)
def test_tangent_matches_finite_differences_of_the_flow(model):
    g = sample_brownian(4, np.arange(5), 0.0, 1.0, 64, model.r)
    x = np.full(model.d, 0.7)
    _, tan = integrate_tangent(model, g, x)
    assert np.allclose(tan.matrices[:, -1], _fd_flow(model, g, x), atol=1e-6)


@pytest.mark.parametrize("model", [nonlinear_2d(), nonlinear_1d(), langevin_tanh(2)], ids=lambda m: m.name)
def test_hessian_matches_finite_differences_of_the_tangent(model):
    g = sample_brownian(8, np.arange(4), 0.0, 1.0, 64, model.r)
    x = np.full(model.d, -0.4)
    eps = 1e-5
    _, _, hes = integrate_hessian(model, g, x)
    for j in range(model.d):
        e = np.zeros(model.d)
        e[j] = eps
        Jp = integrate_tangent(model, g, x + e)[1].matrices[:, -1]
        Jm = integrate_tangent(model, g, x - e)[1].matrices[:, -1]
        fd = (Jp - Jm) / (2 * eps)  # [.., i, k] = d_j d_i X^k
        assert np.allclose(hes.tensors[:, -1, :, j, :], fd, atol=1e-6)


def test_ou_tangent_is_deterministic_power():
    g = sample_brownian(0, np.arange(3), 0.0, 1.0, 20, 2)
    _, tan = integrate_tangent(ou(0.5, 1.0, 2), g, np.zeros(2))
    assert np.allclose(tan.matrices[:, -1], (1 - 0.5 * g.h) ** 20 * np.eye(2), rtol=0, atol=1e-15)


def test_gbm_tangent_equals_flow_over_start():
    g = sample_brownian(0, np.arange(3), 0.0, 1.0, 20, 1)
    fl, tan = integrate_tangent(gbm(0.2, 0.5), g, np.array([2.0]))
    assert np.allclose(tan.matrices[:, :, 0, 0], fl.states[..., 0] / 2.0, rtol=1e-14)


def test_restart_from_zero_equals_integration():
    m = langevin_tanh(2)
    g = sample_brownian(1, np.arange(3), 0.0, 1.0, 40, 2)
    x = np.array([1.0, 2.0])
    full, tan = integrate_tangent(m, g, x)
    rf, rt, _ = restart_flow(m, g, 0, x, want_tangent=True)
    assert np.array_equal(rf.states, full.states) and np.array_equal(rt.matrices, tan.matrices)


def test_restart_terminal_matches_individual_restarts():
    m = nonlinear_2d()
    g = sample_brownian(3, np.arange(2), 0.0, 1.0, 24, 2)
    fl = integrate_flow(m, g, np.array([0.5, 0.1]))
    starts = np.array([0, 5, 12, 24])
    ys = fl.states[:, starts, :]
    X, J, H, div = restart_terminal(m, g, starts, ys, want_hessian=True)
    for j, k in enumerate(starts):
        rf, rt, rh = restart_flow(m, g, int(k), ys[:, j], True, True)
        assert np.array_equal(X[:, j], rf.terminal)
        assert np.array_equal(J[:, j], rt.matrices[:, -1])
        assert np.array_equal(H[:, j], rh.tensors[:, -1])
    # restarting the path from its own state reproduces it
    assert np.array_equal(X[:, 1], fl.terminal)
    assert not div.any()
    with pytest.raises(IndexError):
        restart_terminal(m, g, np.array([30]), ys[:, :1])


def test_frozen_drift_with_H_equal_h_is_euler():
    m = langevin_tanh(1)
    g = sample_brownian(1, np.arange(4), 0.0, 1.0, 50, 1)
    x = np.array([1.0])
    assert np.array_equal(integrate_frozen_drift(m, g, x, g.h).states, integrate_flow(m, g, x).states)
    with pytest.raises(ValueError):
        integrate_frozen_drift(m, g, x, 1.5 * g.h)


def test_deterministic_frozen_drift_error_is_order_H():
    # sigma = 0, b linear contractive: the frozen-drift error is O(H)
    m = ou(1.0, 0.0)
    g = sample_brownian(0, 0, 0.0, 2.0, 800, 1)
    ref = integrate_flow(m, g, np.ones(1)).states
    errs = [np.abs(integrate_frozen_drift(m, g, np.ones(1), H).states - ref).max() for H in (0.2, 0.1, 0.05)]
    slope, _ = fit_loglog_slope([0.2, 0.1, 0.05], errs)
    assert slope == pytest.approx(1.0, abs=0.1)


def test_drift_sensitivity_is_the_delta_derivative():
    base = langevin_tanh(2)
    f, fg, fh = tanh_field(2)
    g = sample_brownian(6, np.arange(3), 0.0, 1.0, 50, 2)
    x = np.array([0.3, -0.8])
    _, D = drift_sensitivity(base, g, x, f)
    eps = 1e-6
    up = integrate_flow(with_extra_drift(base, eps, f, fg, fh), g, x).terminal
    dn = integrate_flow(with_extra_drift(base, -eps, f, fg, fh), g, x).terminal
    assert np.allclose(D, (up - dn) / (2 * eps), atol=1e-7)


def test_divergent_paths_are_frozen_and_flagged():
    m = gbm(30.0, 0.1)
    g = sample_brownian(0, np.arange(3), 0.0, 1.0, 100, 1)
    fl = integrate_flow(m, g, np.ones(1), cap=1e3)
    assert fl.diverged.all()
    assert np.all(np.isfinite(fl.states))
    assert np.all(np.abs(fl.states[:, -1]) <= 1e3 * (1 + 30 * g.h) + 10)
    assert issubclass(DivergenceError, RuntimeError)


def test_euler_step_without_tangent():
    xn, J, H = euler_step(ou(), 0.0, np.ones(1), np.zeros(1), 0.1)
    assert xn[0] == pytest.approx(0.9) and J is None and H is None


def test_write_path_csv(tmp_path):
    m = ou(1.0, 1.0, 2)
    g = sample_brownian(0, np.arange(2), 0.0, 1.0, 4, 2)
    fl, tan = integrate_tangent(m, g, np.ones(2))
    p = tmp_path / "path.csv"
    write_path_csv(p, fl, tan, index=1)
    rows = list(csv.reader(open(p)))
    assert rows[0] == ["t", "x_1", "x_2", "J_1_1", "J_1_2", "J_2_1", "J_2_2"]
    assert len(rows) == 6 and float(rows[-1][0]) == 1.0
    with pytest.raises(ValueError):
        write_path_csv(p, fl)
