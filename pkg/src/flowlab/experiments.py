"""Scripted reproducers for the quantitative claims.

Each ``run_*`` function takes a plain configuration dictionary (as produced
by :class:`flowlab.config.RunConfig`) and returns an
:class:`ExperimentResult` with measured tables, fitted slopes and one
verdict per checked claim. Every run is deterministic given the
configuration and its ``seed``.

Common configuration keys: ``seed`` (required), ``M``, ``h``, ``threads``
and a ``tolerances`` table. Models are given as ``{"name": ..., **params}``
tables (``model``) or as ``{"base": ..., "perturbed": ...}`` (``pair``).
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import regularity
from .estimators import (bel_gradient, bel_hessian, invariant_shift,
                         moment_from_norms, observable, semigroup_difference)
from .interpolation import convergence_study, fit_loglog_slope, skorohod_variance_1d
from .model import ModelPair, build_model, delta_eval, tanh_field, with_extra_drift
from .oracle import (LinearOracle, UnsupportedOracle, ou_invariant_shift, ou_semigroup_derivatives,
                     ou_semigroup_square)
from .paths import (drift_sensitivity, integrate_flow, integrate_frozen_drift,
                    integrate_hessian, integrate_tangent, sample_brownian)
from .rng import PATH, chunked_map, substream

CSV_COLUMNS = ("experiment", "quantity", "parameter", "measured", "target", "stderr", "verdict")


class ExperimentError(RuntimeError):
    """A precondition of an experiment failed; the run is aborted."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


@dataclass
class ExperimentResult:
    """Measured tables, fitted slopes and verdicts of one experiment run.

    ``tables`` rows carry ``quantity, parameter, measured, target, stderr``
    and the name of the verdict they feed, so each verdict can be re-derived
    from the rows alone.
    """

    name: str
    config_digest: str
    tables: list = field(default_factory=list)
    slopes: dict = field(default_factory=dict)
    verdicts: dict = field(default_factory=dict)
    wall_time: float = 0.0
    notes: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.verdicts.values())

    def to_dict(self) -> dict:
        return {"name": self.name, "config_digest": self.config_digest, "passed": self.passed,
                "verdicts": self.verdicts, "slopes": self.slopes, "tables": self.tables,
                "wall_time": self.wall_time, "notes": self.notes}

    def to_json(self, **kw) -> str:
        return json.dumps(_clean(self.to_dict()), **kw)

    def write(self, out_dir, stem=None) -> tuple[str, str]:
        """Write ``<stem>.json`` and ``<stem>.csv`` into ``out_dir``."""
        os.makedirs(out_dir, exist_ok=True)
        stem = stem or self.name
        jpath = os.path.join(out_dir, f"{stem}.json")
        cpath = os.path.join(out_dir, f"{stem}.csv")
        with open(jpath, "w") as fh:
            fh.write(self.to_json(indent=2, sort_keys=True))
        with open(cpath, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            for row in self.tables:
                w.writerow([self.name] + [_cell(row.get(c)) for c in CSV_COLUMNS[1:]])
        return jpath, cpath


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def _clean(obj):
    """JSON-safe copy: numpy to Python, non-finite floats to ``None``."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if np.isfinite(v) else None
    return obj


def config_digest(cfg: dict) -> str:
    """SHA-256 of the canonical JSON form of a configuration."""
    text = json.dumps(_clean(cfg), sort_keys=True, default=str)
    return hashlib.sha256(text.encode()).hexdigest()


def _row(quantity, parameter, measured, target=None, stderr=None, verdict=None, **extra):
    out = {"quantity": quantity, "parameter": parameter, "measured": _f(measured),
           "target": _f(target), "stderr": _f(stderr), "verdict": verdict}
    out.update(extra)
    return out


def _f(v):
    return None if v is None else float(v)


def _seed(cfg):
    if cfg.get("seed") is None:
        raise ValueError("a seed is required")
    return int(cfg["seed"])


def _tol(cfg, key, default):
    return float(cfg.get("tolerances", {}).get(key, default))


def model_from_spec(spec: dict):
    spec = dict(spec)
    name = spec.pop("name")
    return build_model(name, **spec)


def pair_from_spec(spec: dict) -> ModelPair:
    return ModelPair(model_from_spec(spec["base"]), model_from_spec(spec["perturbed"]))


def _oracle(model):
    try:
        return LinearOracle.from_model(model)
    except UnsupportedOracle:
        return None


def _fit_rate(ts, ys):
    """Slope of ``log y`` against ``t`` and its standard error."""
    ts = np.asarray(ts, dtype=float)
    ly = np.log(np.asarray(ys, dtype=float))
    if ts.size < 2:
        return float("nan"), float("nan")
    A = np.vstack([ts, np.ones_like(ts)]).T
    coef, *_ = np.linalg.lstsq(A, ly, rcond=None)
    if ts.size > 2:
        resid = ly - A @ coef
        se = float(np.sqrt(resid @ resid / (ts.size - 2) / np.sum((ts - ts.mean()) ** 2)))
    else:
        se = float("nan")
    return float(coef[0]), se


def _timed(fn):
    def wrapper(cfg):
        t0 = time.perf_counter()
        res = fn(cfg)
        res.wall_time = time.perf_counter() - t0
        return res

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def _as_vec(x, d):
    x = np.atleast_1d(np.asarray(x, dtype=float))
    return np.broadcast_to(x, (d,)).copy() if x.size == 1 else x


# ---------------------------------------------------------------------------
# decomposition and Skorohod variance


@_timed
def run_decomposition_convergence(cfg: dict) -> ExperimentResult:
    """Residual of the forward-backward decomposition as the estimator mesh halves.

    Keys: ``pair``, ``x``, ``s``, ``t``, ``H_list``, ``fine_factor`` (each
    level's fine step is ``H / fine_factor``; default 8, or ``max(H_list) / h``
    when ``h`` is given), ``M``. Tolerances: ``slope_min`` (0.4), ``monotone_k`` (2).

    Verdicts: ``monotone`` (each halving lowers the mean residual up to
    ``monotone_k`` combined stderr), ``slope`` (log-log slope at least
    ``slope_min``) and, when the pair has equal diffusions, ``S_zero``.
    """
    pair = pair_from_spec(cfg["pair"])
    seed = _seed(cfg)
    x = _as_vec(cfg.get("x", 1.0), pair.d)
    s, t = float(cfg.get("s", 0.0)), float(cfg.get("t", 2.0))
    H_list = [float(H) for H in cfg.get("H_list", [2.0 ** -k for k in range(3, 8)])]
    fine_factor = cfg.get("fine_factor")
    if fine_factor is None:
        fine_factor = int(round(max(H_list) / float(cfg["h"]))) if "h" in cfg else 8
    rows = convergence_study(pair, x, s, t, H_list, int(cfg.get("M", 512)), seed,
                             int(fine_factor), cfg.get("threads"))
    k = _tol(cfg, "monotone_k", 2.0)
    slope_min = _tol(cfg, "slope_min", 0.4)
    res = ExperimentResult("decomposition_convergence", config_digest(cfg))
    order = sorted(rows, key=lambda r: -r["H"])
    mono = True
    for a, b in zip(order, order[1:]):
        ok = b["mean_residual_norm"] <= a["mean_residual_norm"] + k * np.hypot(a["stderr"], b["stderr"])
        mono &= bool(ok)
    for r in order:
        res.tables.append(_row("mean_residual_norm", r["H"], r["mean_residual_norm"], None,
                               r["stderr"], "monotone", h=r["h"], mean_S=r["mean_S"],
                               max_abs_S=r["max_abs_S"], diverged=r["diverged"]))
    slope, se = fit_loglog_slope([r["H"] for r in order], [r["mean_residual_norm"] for r in order])
    res.slopes["residual_vs_H"] = {"slope": slope, "stderr": se}
    res.tables.append(_row("residual_slope", "H", slope, slope_min, se, "slope"))
    res.verdicts["monotone"] = mono
    res.verdicts["slope"] = bool(slope >= slope_min)
    probe = np.linspace(-5, 5, 41)[:, None] * np.ones(pair.d)
    if np.all(delta_eval(pair, s, probe).dsigma == 0):
        max_S = max(r["max_abs_S"] for r in rows)
        res.tables.append(_row("max_abs_S", "all H", max_S, 0.0, None, "S_zero"))
        res.verdicts["S_zero"] = bool(max_S == 0.0)
    return res


@_timed
def run_skorohod_variance(cfg: dict) -> ExperimentResult:
    """Centering and variance identity of the two-sided integral (one dimension).

    Keys: ``pair``, ``x``, ``s``, ``t``, ``M``, ``h``, ``H``, ``cross``,
    ``diag_nodes``, ``cross_nodes``, optional ``target_diagonal``.
    Tolerances: ``k`` (3).
    """
    pair = pair_from_spec(cfg["pair"])
    seed = _seed(cfg)
    s, t = float(cfg.get("s", 0.0)), float(cfg.get("t", 2.0))
    mc = {"M": int(cfg.get("M", 4096)), "seed": seed, "h": float(cfg.get("h", 2.0 ** -7)),
          "threads": cfg.get("threads")}
    for key in ("H", "cross", "diag_nodes", "cross_nodes"):
        if key in cfg:
            mc[key] = cfg[key]
    rep = skorohod_variance_1d(pair, mc, s, t, cfg.get("x", 1.0))
    k = _tol(cfg, "k", 3.0)
    res = ExperimentResult("skorohod_variance", config_digest(cfg))
    res.tables.append(_row("mean_S", t - s, rep.empirical_mean, 0.0, rep.mean_stderr, "centered"))
    res.verdicts["centered"] = bool(abs(rep.empirical_mean) <= k * rep.mean_stderr)
    res.tables.append(_row("second_moment_S", t - s, rep.empirical_variance, rep.total, rep.mc_stderr,
                           "isometry", diagonal=rep.diagonal_term, cross=rep.cross_term,
                           cross_mode=rep.cross_mode))
    res.verdicts["isometry"] = bool(abs(rep.empirical_variance - rep.total) <= k * rep.mc_stderr)
    if cfg.get("target_diagonal") is not None:
        target = float(cfg["target_diagonal"])
        se = rep.empirical_stderr
        res.tables.append(_row("second_moment_S", "target", rep.empirical_variance, target, se,
                               "target_empirical"))
        res.tables.append(_row("diagonal_term", "target", rep.diagonal_term, target, se,
                               "target_diagonal"))
        res.verdicts["target_empirical"] = bool(abs(rep.empirical_variance - target) <= k * se)
        res.verdicts["target_diagonal"] = bool(abs(rep.diagonal_term - target) <= k * se)
    res.notes["report"] = rep.to_dict()
    return res


# ---------------------------------------------------------------------------
# decay of tangent and Hessian processes


def _decay_paths(model, x, t_max, h, M, seed, threads, hessian):
    steps = int(round(t_max / h))

    def work(a, b):
        grid = sample_brownian(seed, np.arange(a, b), 0.0, t_max, steps, model.r)
        if hessian:
            flow, tan, hes = integrate_hessian(model, grid, x)
            return flow.diverged, tan.matrices, hes.tensors
        flow, tan = integrate_tangent(model, grid, x)
        return flow.diverged, tan.matrices, None

    return chunked_map(work, M, 256, threads), steps


@_timed
def run_decay_rates(cfg: dict) -> ExperimentResult:
    """Moments of the tangent and Hessian processes against their decay bounds.

    Keys: ``model``, ``x``, ``n_list``, ``t_list``, ``h``, ``M``, ``c``
    (constant in chi), ``eps_frac`` (``eps = eps_frac * lambda_A(n)``).
    Tolerances: ``k`` (3), ``slope_tol`` (0.1).

    Tangent bound: ``sqrt(d) exp(-[lambda_A - (n-2) rho_sq / 2] t)``.
    Hessian bound: ``n / eps * chi * exp(-(lambda_A(n) - eps) t)``.
    """
    model = model_from_spec(cfg["model"])
    seed = _seed(cfg)
    d = model.d
    x = _as_vec(cfg.get("x", 1.0), d)
    n_list = [int(n) for n in cfg.get("n_list", [2])]
    t_list = sorted(float(u) for u in cfg.get("t_list", [1.0, 2.0, 4.0]))
    h = float(cfg.get("h", 0.01))
    M = int(cfg.get("M", 4096))
    k = _tol(cfg, "k", 3.0)
    slope_tol = _tol(cfg, "slope_tol", 0.1)
    c = float(cfg.get("c", regularity.DEFAULT_C))
    res = ExperimentResult("decay_rates", config_digest(cfg))
    reports = {n: regularity.condition_report(model, n, c=c) for n in n_list}
    res.notes["conditions"] = {str(n): r.to_dict() for n, r in reports.items()}
    for n, rep in reports.items():
        if not rep.T_n:
            raise ExperimentError(f"condition (T)_{n} fails for {model.name}", rep.to_dict())
    linear = bool(model.affine_drift and np.all(model.diffusion_hess(0.0, x) == 0))
    parts, steps = _decay_paths(model, x, t_list[-1], h, M, seed, cfg.get("threads"), not linear)
    div = np.concatenate([p[0] for p in parts])
    J = np.concatenate([p[1] for p in parts])
    Hs = np.concatenate([p[2] for p in parts]) if not linear else None
    oracle = _oracle(model)
    for n in n_list:
        rep = reports[n]
        rate_T = rep.lambda_A - (n - 2) * rep.rho_sq / 2.0
        eps = float(cfg.get("eps_frac", 0.5)) * rep.lambda_A_n
        rate_H = rep.lambda_A_n - eps
        meas_T, meas_H = [], []
        ok_T = ok_H = ok_exact = True
        for u in t_list:
            j = int(round(u / h))
            norms = np.linalg.norm(J[:, j].reshape(M, -1), axis=1)
            norms[div] = np.nan
            est = moment_from_norms(norms, n, seed)
            bound = np.sqrt(d) * np.exp(-rate_T * u)
            slack = 2.0 * u * h * bound  # Euler bias of the tangent
            ok = est.value <= bound * (1 + k * est.rel_stderr) + slack
            ok_T &= bool(ok)
            meas_T.append(est.value)
            res.tables.append(_row(f"tangent_moment_n{n}", u, est.value, bound, est.stderr,
                                   f"tangent_bound_n{n}"))
            if oracle is not None and oracle.kind == "ou":
                exact = np.sqrt(d) * np.exp(-oracle.rate * u)
                ok_e = abs(est.value - exact) <= k * est.stderr + slack
                ok_exact &= bool(ok_e)
                res.tables.append(_row(f"tangent_moment_n{n}", u, est.value, exact, est.stderr,
                                       f"tangent_closed_form_n{n}"))
            hbound = n / eps * rep.chi * np.exp(-rate_H * u)
            if linear:
                hval, hse = 0.0, 0.0
            else:
                hn = np.linalg.norm(Hs[:, j].reshape(M, -1), axis=1)
                hn[div] = np.nan
                he = moment_from_norms(hn, n, seed)
                hval, hse = he.value, he.stderr
            ok_H &= bool(hval <= hbound * (1 + k * (hse / hval if hval > 0 else 0.0)))
            meas_H.append(hval)
            res.tables.append(_row(f"hessian_moment_n{n}", u, hval, hbound, hse, f"hessian_bound_n{n}"))
        res.verdicts[f"tangent_bound_n{n}"] = ok_T
        res.verdicts[f"hessian_bound_n{n}"] = ok_H
        if oracle is not None and oracle.kind == "ou":
            res.verdicts[f"tangent_closed_form_n{n}"] = ok_exact
        if len(t_list) > 1:
            slope, se = _fit_rate(t_list, meas_T)
            res.slopes[f"tangent_rate_n{n}"] = {"slope": slope, "stderr": se}
            res.tables.append(_row(f"tangent_rate_n{n}", "t", slope, -rate_T, se, f"tangent_rate_n{n}"))
            res.verdicts[f"tangent_rate_n{n}"] = bool(slope <= -rate_T + slope_tol)
            if linear:
                res.tables.append(_row("hessian_max_abs", "all t", 0.0, 0.0, None, "hessian_zero"))
                res.verdicts["hessian_zero"] = True
            elif all(v > 0 for v in meas_H):
                hs, hse = _fit_rate(t_list, meas_H)
                res.slopes[f"hessian_rate_n{n}"] = {"slope": hs, "stderr": hse}
                res.tables.append(_row(f"hessian_rate_n{n}", "t", hs, -rate_H, hse,
                                       f"hessian_rate_n{n}"))
                res.verdicts[f"hessian_rate_n{n}"] = bool(hs <= -rate_H + slope_tol)
    if linear:
        res.notes["hessian"] = "affine drift and constant diffusion gradient: Hessian identically 0"
    return res


@_timed
def run_as_bounds(cfg: dict) -> ExperimentResult:
    """Pathwise bounds for models with constant diffusion.

    ``|J_t|_2 <= exp(-lambda_A t)`` and ``|H_t|_F <= (d / lambda_A) sup|grad^2 b|_F exp(-lambda_A t)``
    at every node of every path, up to the factor ``1 + slack * h``.

    Keys: ``model``, ``x``, ``t``, ``h``, ``M``, ``lambda_A`` (optional;
    defaults to the model's convexity metadata, else the sampled estimate).
    Tolerances: ``slack`` (10).
    """
    model = model_from_spec(cfg["model"])
    seed = _seed(cfg)
    d = model.d
    x = _as_vec(cfg.get("x", 1.0), d)
    t, h, M = float(cfg.get("t", 5.0)), float(cfg.get("h", 0.01)), int(cfg.get("M", 1000))
    if not model.constant_diffusion:
        raise ExperimentError("pathwise bounds need a constant diffusion")
    lam = cfg.get("lambda_A", model.metadata.get("convexity"))
    lam = float(lam) if lam is not None else regularity.estimate_lambda_A(model)["lambda_A"]
    if lam <= 0:
        raise ExperimentError("lambda_A must be positive")
    pts = regularity.SampleSpec(count=4000).points(d)
    hb = float(np.linalg.norm(model.drift_hess(0.0, pts).reshape(len(pts), -1), axis=1).max())
    meta_sup = model.metadata.get("third_derivative_sup")
    if meta_sup is not None and model.metadata.get("kind") == "langevin":
        # exact supremum: each coordinate's third derivative peaks independently
        hb = max(hb, float(np.sqrt(d)) * float(meta_sup))
    slack = 1.0 + _tol(cfg, "slack", 10.0) * h
    parts, steps = _decay_paths(model, x, t, h, M, seed, cfg.get("threads"), True)
    times = h * np.arange(steps + 1)
    env = np.exp(-lam * times)
    worst_J = worst_H = 0.0
    viol_J = viol_H = 0
    for _, Jc, Hc in parts:
        nJ = np.linalg.norm(Jc, ord=2, axis=(-2, -1))
        nH = np.linalg.norm(Hc.reshape(Hc.shape[:2] + (-1,)), axis=-1)
        rJ = nJ / env
        rH = nH / ((d / lam) * hb * env)
        viol_J += int(np.sum(np.any(rJ > slack, axis=1)))
        viol_H += int(np.sum(np.any(rH > slack, axis=1)))
        worst_J = max(worst_J, float(rJ.max()))
        worst_H = max(worst_H, float(rH.max()))
    res = ExperimentResult("as_bounds", config_digest(cfg))
    res.tables.append(_row("max_ratio_J", M, worst_J, slack, None, "tangent_as", violations=viol_J))
    res.tables.append(_row("max_ratio_H", M, worst_H, slack, None, "hessian_as", violations=viol_H))
    res.verdicts["tangent_as"] = viol_J == 0
    res.verdicts["hessian_as"] = viol_H == 0
    res.notes.update(lambda_A=lam, sup_hess_b_F=hb)
    return res


# ---------------------------------------------------------------------------
# discretization bound


@_timed
def run_discretization_bound(cfg: dict) -> ExperimentResult:
    """Frozen-drift discretization error against the explicit uniform bound.

    The bound is ``|grad b| ([|b(0)| + m_n |grad b|] H + sigma c_{n,d} sqrt(H)) / lambda``
    where ``m_n`` is the largest measured moment of the discretized flow and
    ``c_{n,d} = E[|Z|^n]^{1/n}`` for a standard Gaussian ``Z`` in ``R^d``.

    Keys: ``model`` (constant scalar diffusion), ``x``, ``t``, ``h``,
    ``H_list``, ``n``, ``M``. Tolerances: ``slope_min`` (0.4).
    """
    from scipy.special import gammaln

    model = model_from_spec(cfg["model"])
    seed = _seed(cfg)
    d = model.d
    x = _as_vec(cfg.get("x", 1.0), d)
    t, h = float(cfg.get("t", 5.0)), float(cfg.get("h", 0.0025))
    H_list = sorted((float(H) for H in cfg.get("H_list", [0.2, 0.1, 0.05, 0.025])), reverse=True)
    n = int(cfg.get("n", 2))
    M = int(cfg.get("M", 2048))
    slope_min = _tol(cfg, "slope_min", 0.4)
    # assumptions: constant scalar diffusion, contractive drift, bounded gradient
    if not model.constant_diffusion:
        raise ExperimentError("the discretization bound needs a constant diffusion")
    pts = regularity.SampleSpec(count=2000).points(d)
    S = model.diffusion(0.0, pts[:1])[0]
    sig = float(np.linalg.norm(S, 2))
    g = model.drift_grad(0.0, pts)
    grad_norm = float(np.linalg.norm(g, ord=2, axis=(-2, -1)).max())
    lam = -float(regularity.log_norm(g).max())
    growth = regularity.growth_params(model)
    checks = {"constant_diffusion": True, "lambda_positive": lam > 0,
              "growth_positive": bool(growth is None or growth["beta2"] > 0)}
    if not all(checks.values()):
        raise ExperimentError("assumptions of the discretization bound fail", checks)
    b0 = float(np.linalg.norm(model.drift(0.0, np.zeros(d))))
    c_nd = float(np.exp((gammaln((n + d) / 2) - gammaln(d / 2)) / n) * np.sqrt(2.0))
    steps = int(round(t / h))
    stride = int(round(H_list[0] / h))
    idx = np.arange(0, steps + 1, stride)
    for H in H_list:
        q = H / h
        if abs(q - round(q)) > 1e-9 * q or steps % int(round(q)):
            raise ExperimentError(f"H={H} must be a multiple of h={h} dividing the horizon")

    def work(a, b):
        grid = sample_brownian(seed, np.arange(a, b), 0.0, t, steps, model.r)
        ref = integrate_flow(model, grid, x)
        out = {}
        for H in H_list:
            fz = integrate_frozen_drift(model, grid, x, H)
            err = np.linalg.norm(fz.states[:, idx] - ref.states[:, idx], axis=-1)
            nrm = np.linalg.norm(fz.states[:, idx], axis=-1)
            bad = fz.diverged | ref.diverged
            err[bad] = np.nan
            nrm[bad] = np.nan
            out[H] = (err, nrm)
        return out

    parts = chunked_map(work, M, 256, cfg.get("threads"))
    errs, m_hat = {}, 0.0
    for H in H_list:
        E = np.concatenate([p[H][0] for p in parts])
        N = np.concatenate([p[H][1] for p in parts])
        ests = [moment_from_norms(E[:, j], n, seed) for j in range(len(idx))]
        j = int(np.argmax([e.value for e in ests]))
        errs[H] = ests[j]
        m_hat = max(m_hat, max(moment_from_norms(N[:, i], n, seed).value for i in range(len(idx))))
    res = ExperimentResult("discretization_bound", config_digest(cfg))
    ok = True
    for H in H_list:
        bound = grad_norm * ((b0 + m_hat * grad_norm) * H + sig * c_nd * np.sqrt(H)) / lam
        e = errs[H]
        ok &= bool(e.value <= bound)
        res.tables.append(_row("sup_t_error", H, e.value, bound, e.stderr, "bound", ratio=e.value / bound))
    slope, se = fit_loglog_slope(H_list, [errs[H].value for H in H_list])
    res.slopes["error_vs_H"] = {"slope": slope, "stderr": se}
    res.tables.append(_row("error_slope", "H", slope, slope_min, se, "slope"))
    res.verdicts["bound"] = ok
    res.verdicts["slope"] = bool(slope >= slope_min)
    res.notes.update(lambda_=lam, grad_b=grad_norm, b0=b0, sigma=sig, m_hat=m_hat, c_nd=c_nd)
    return res


# ---------------------------------------------------------------------------
# mean-field particles


def _rk4(f, x0, t, steps):
    x = float(x0)
    h = t / steps
    for _ in range(steps):
        k1 = f(x)
        k2 = f(x + 0.5 * h * k1)
        k3 = f(x + 0.5 * h * k2)
        k4 = f(x + h * k3)
        x += h * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
    return x


@_timed
def run_meanfield(cfg: dict) -> ExperimentResult:
    """Bias and fluctuation of the empirical mean of interacting particles.

    Particles follow ``dX^i = [-(1 + theta) X^i + theta m - gamma tanh(m)] dt + sigma dW^i``
    with ``m`` the empirical mean, so ``m`` solves ``dm = b(m) dt + sigma / sqrt(N) dB``
    with ``b(m) = -m - gamma tanh m``. The bias ``E m_t - x_t`` is measured
    against the Euler recursion of the limit ODE on the same mesh using
    antithetic pairs; the fluctuation is the standard deviation of ``m_t``.

    Keys: ``theta``, ``gamma``, ``sigma``, ``x0``, ``t``, ``h``, ``N_list``, ``M``.
    Tolerances: ``bias_slope_tol`` (0.15), ``fluct_slope_tol`` (0.1).
    """
    seed = _seed(cfg)
    theta, gamma = float(cfg.get("theta", 1.0)), float(cfg.get("gamma", 2.0))
    sigma, x0 = float(cfg.get("sigma", 1.0)), float(cfg.get("x0", 1.0))
    t, h = float(cfg.get("t", 1.0)), float(cfg.get("h", 0.01))
    N_list = [int(N) for N in cfg.get("N_list", [16, 64, 256, 1024])]
    M = int(cfg.get("M", 256))
    steps = int(round(t / h))
    b = lambda m: -m - gamma * np.tanh(m)  # noqa: E731
    x_euler = x0
    for _ in range(steps):
        x_euler = x_euler + b(x_euler) * h
    x_rk4 = _rk4(b, x0, t, steps)

    def simulate(N, inc):
        X = np.full(inc.shape[:1] + (N,), x0)
        for k in range(steps):
            m = X.mean(axis=1, keepdims=True)
            X = X + (-(1 + theta) * X + theta * m - gamma * np.tanh(m)) * h + sigma * inc[:, k]
        return X.mean(axis=1)

    res = ExperimentResult("meanfield", config_digest(cfg))
    bias, bias_se, fl, fl_se = [], [], [], []
    for N in N_list:
        def work(a, c, N=N):
            inc = np.stack([substream(seed, PATH, N, int(i)).standard_normal((steps, N))
                            for i in range(a, c)]) * np.sqrt(h)
            return simulate(N, inc), simulate(N, -inc)

        parts = chunked_map(work, M, 32, cfg.get("threads"))
        plus = np.concatenate([p[0] for p in parts])
        minus = np.concatenate([p[1] for p in parts])
        pair_mean = 0.5 * (plus + minus) - x_euler
        bias.append(abs(pair_mean.mean()))
        bias_se.append(pair_mean.std(ddof=1) / np.sqrt(M))
        sd = plus.std(ddof=1)
        fl.append(sd)
        fl_se.append(sd / np.sqrt(2 * (M - 1)))
        res.tables.append(_row("bias", N, bias[-1], None, bias_se[-1], "bias_slope",
                               bias_vs_rk4=float(pair_mean.mean() + x_euler - x_rk4)))
        res.tables.append(_row("fluctuation_sd", N, fl[-1], None, fl_se[-1], "fluctuation_slope"))
    nan = (float("nan"), float("nan"))
    bs, bse = fit_loglog_slope(N_list, bias) if min(bias) > 0 else nan
    fs, fse = fit_loglog_slope(N_list, fl) if min(fl) > 0 else nan
    res.slopes["bias_vs_N"] = {"slope": bs, "stderr": bse}
    res.slopes["fluctuation_vs_N"] = {"slope": fs, "stderr": fse}
    res.tables.append(_row("bias_slope", "N", bs, -1.0, bse, "bias_slope"))
    res.tables.append(_row("fluctuation_slope", "N", fs, -0.5, fse, "fluctuation_slope"))
    res.verdicts["bias_slope"] = bool(abs(bs + 1.0) <= _tol(cfg, "bias_slope_tol", 0.15))
    res.verdicts["fluctuation_slope"] = bool(abs(fs + 0.5) <= _tol(cfg, "fluct_slope_tol", 0.1))
    res.notes.update(limit_euler=x_euler, limit_rk4=x_rk4)
    return res


# ---------------------------------------------------------------------------
# drift perturbation


@_timed
def run_perturbation(cfg: dict) -> ExperimentResult:
    """Second-order remainder of the first-order expansion in a drift perturbation.

    The perturbed drift is ``b + delta tanh``; the first-order term ``dX`` is
    the exact ``delta``-derivative of the Euler flow. Reports
    ``E|X^delta - X - delta dX|`` for each ``delta``.

    Keys: ``model``, ``x``, ``t``, ``h``, ``delta_list``, ``M``.
    Tolerances: ``slope_tol`` (0.2), ``ratio_max`` (3).
    """
    model = model_from_spec(cfg["model"])
    seed = _seed(cfg)
    d = model.d
    x = _as_vec(cfg.get("x", 1.0), d)
    t, h = float(cfg.get("t", 2.0)), float(cfg.get("h", 0.01))
    deltas = [float(v) for v in cfg.get("delta_list", [0.2, 0.1, 0.05, 0.025])]
    M = int(cfg.get("M", 1024))
    steps = int(round(t / h))
    f, fg, fh = tanh_field(d)
    models = {dl: with_extra_drift(model, dl, f, fg, fh) for dl in deltas}

    def work(a, b):
        grid = sample_brownian(seed, np.arange(a, b), 0.0, t, steps, model.r)
        flow, D = drift_sensitivity(model, grid, x, f)
        out = {}
        for dl, m in models.items():
            pert = integrate_flow(m, grid, x)
            r = np.linalg.norm(pert.terminal - flow.terminal - dl * D, axis=-1)
            r[pert.diverged | flow.diverged] = np.nan
            out[dl] = r
        return out

    parts = chunked_map(work, M, 256, cfg.get("threads"))
    res = ExperimentResult("perturbation", config_digest(cfg))
    rem, scaled = {}, {}
    for dl in deltas:
        est = moment_from_norms(np.concatenate([p[dl] for p in parts]), 1, seed)
        rem[dl] = est.value
        res.tables.append(_row("remainder", dl, est.value, None, est.stderr, "slope"))
        if dl > 0:
            scaled[dl] = est.value / dl ** 2
            res.tables.append(_row("remainder_over_delta2", dl, scaled[dl], None,
                                   est.stderr / dl ** 2, "ratio"))
    if 0.0 in rem:
        res.verdicts["zero_delta"] = rem[0.0] == 0.0
    pos = [dl for dl in deltas if dl > 0]
    slope, se = fit_loglog_slope(pos, [rem[dl] for dl in pos])
    res.slopes["remainder_vs_delta"] = {"slope": slope, "stderr": se}
    res.tables.append(_row("remainder_slope", "delta", slope, 2.0, se, "slope"))
    ratio = max(scaled.values()) / min(scaled.values())
    res.tables.append(_row("max_over_min_scaled", "delta", ratio, _tol(cfg, "ratio_max", 3.0), None, "ratio"))
    res.verdicts["slope"] = bool(abs(slope - 2.0) <= _tol(cfg, "slope_tol", 0.2))
    res.verdicts["ratio"] = bool(ratio <= _tol(cfg, "ratio_max", 3.0))
    return res


# ---------------------------------------------------------------------------
# time-uniform difference bounds


def _difference_run(pair, x, times, n, M, h, seed, threads):
    steps = int(round(times[-1] / h))
    idx = [int(round(u / h)) for u in times]

    def work(a, b):
        grid = sample_brownian(seed, np.arange(a, b), 0.0, times[-1], steps, pair.r)
        A = integrate_flow(pair.base, grid, x)
        B = integrate_flow(pair.perturbed, grid, x)
        diff = np.linalg.norm(A.states[:, idx] - B.states[:, idx], axis=-1)
        Yb = B.states[:, idx]
        db = np.linalg.norm(pair.base.drift(0.0, Yb) - pair.perturbed.drift(0.0, Yb), axis=-1)
        bad = A.diverged | B.diverged
        diff[bad] = np.nan
        db[bad] = np.nan
        return diff, db

    parts = chunked_map(work, M, 256, threads)
    D = np.concatenate([p[0] for p in parts])
    B = np.concatenate([p[1] for p in parts])
    return ([moment_from_norms(D[:, j], n, seed) for j in range(len(times))],
            [moment_from_norms(B[:, j], n, seed) for j in range(len(times))])


@_timed
def run_uniform_difference(cfg: dict) -> ExperimentResult:
    """Growth in time of ``E|X_t - Xbar_t|^n`` under common noise.

    Keys: ``pair``, ``n``, ``t_list``, ``x_list`` (list of start states),
    ``h``, ``M``. Tolerances: ``k`` (5).

    Verdicts: ``plateau_x<i>`` (no growth: every later moment is at most
    ``1 + k * rel-stderr`` times every earlier one over ``t_list``) and, for several starts, ``x_scaling`` (the sup over ``t``
    grows at most linearly in ``|x|``). Condition reports are attached but
    never abort the run, so pairs violating them act as negative controls.
    For constant-diffusion pairs the ratio of the plateau level to
    ``|||db|||_n + |Sigma - Sigma_bar|`` is reported as ``kappa_fit``.
    """
    pair = pair_from_spec(cfg["pair"])
    seed = _seed(cfg)
    d = pair.d
    n = int(cfg.get("n", 2))
    times = sorted(float(u) for u in cfg.get("t_list", [2.0, 4.0, 8.0, 16.0]))
    xs = [_as_vec(v, d) for v in cfg.get("x_list", [1.0])]
    h, M = float(cfg.get("h", 0.01)), int(cfg.get("M", 2048))
    k = _tol(cfg, "k", 5.0)
    res = ExperimentResult("uniform_difference", config_digest(cfg))
    conds = {}
    for role, m in (("base", pair.base), ("perturbed", pair.perturbed)):
        rep = regularity.condition_report(m, n)
        conds[role] = rep.to_dict()
        if not rep.T_n:
            res.notes.setdefault("warnings", []).append(f"(T)_{n} fails for the {role} model")
    res.notes["conditions"] = conds
    const = pair.base.constant_diffusion and pair.perturbed.constant_diffusion
    sups = []
    for i, x in enumerate(xs):
        diffs, dbs = _difference_run(pair, x, times, n, M, h, seed, cfg.get("threads"))
        vals = np.array([e.value for e in diffs])
        rel = max(e.rel_stderr for e in diffs)
        # growth: largest ratio of a later moment to an earlier one (max/min for monotone growth)
        ratio = max((vals[j] / vals[i] if vals[i] > 0 else np.inf)
                    for i in range(len(vals)) for j in range(i, len(vals)))
        spread = vals.max() / vals.min() if vals.min() > 0 else np.inf
        for u, e in zip(times, diffs):
            res.tables.append(_row(f"difference_moment_x{i}", u, e.value, None, e.stderr,
                                   f"plateau_x{i}", x=x.tolist()))
        res.tables.append(_row(f"growth_ratio_x{i}", "t", ratio, 1 + k * rel, None, f"plateau_x{i}",
                               max_over_min=spread))
        res.verdicts[f"plateau_x{i}"] = bool(ratio <= 1 + k * rel)
        sups.append((float(np.linalg.norm(x)), float(vals.max()), rel))
        if const:
            dS = float(np.linalg.norm(pair.base.diffusion(0.0, x) - pair.perturbed.diffusion(0.0, x)))
            level = max(e.value for e in dbs) + dS
            if level > 0:
                res.notes[f"kappa_fit_x{i}"] = float(vals.max() / level)
    if len(sups) > 1:
        (n0, v0, r0) = sups[0]
        ok = True
        for j, (nj, vj, rj) in enumerate(sups[1:], start=1):
            limit = v0 * (nj / n0) * (1 + k * max(r0, rj)) + 1e-12
            res.tables.append(_row("plateau_scaling", nj / n0, vj / v0, limit / v0, None, "x_scaling"))
            ok &= bool(vj <= limit)
        res.verdicts["x_scaling"] = ok
    return res


# ---------------------------------------------------------------------------
# semigroup-level estimators


def _observable(cfg, d, key="f"):
    spec = cfg.get(key, "linear")
    if isinstance(spec, dict):
        return observable(spec["name"], d, spec.get("coef"))
    return observable(spec, d)


@_timed
def run_bel(cfg: dict) -> ExperimentResult:
    """BEL gradient and Hessian estimates, checked against closed forms when available.

    Keys: ``model``, ``observables`` (list of names), ``s``, ``t``, ``x``,
    ``M``, ``h``, ``weight`` (``{"kind", "eps"}``), ``hessian`` (bool).
    Tolerances: ``k`` (3).
    """
    model = model_from_spec(cfg["model"])
    seed = _seed(cfg)
    d = model.d
    x = _as_vec(cfg.get("x", 1.0), d)
    s, t = float(cfg.get("s", 0.0)), float(cfg.get("t", 1.0))
    M, h = int(cfg.get("M", 10000)), float(cfg.get("h", 1e-3))
    k = _tol(cfg, "k", 3.0)
    weight = cfg.get("weight")
    oracle = _oracle(model)
    res = ExperimentResult("bel", config_digest(cfg))
    for name in cfg.get("observables", ["linear", "square", "constant"]):
        f = observable(name, d)
        g = bel_gradient(model, f, s, t, x, weight, M, seed, h, threads=cfg.get("threads"))
        exact = None
        if oracle is not None and oracle.kind == "ou":
            try:
                exact = ou_semigroup_derivatives(oracle, name, t - s, x)
            except UnsupportedOracle:
                exact = None
        for i in range(d):
            tgt = None if exact is None else exact[0][i]
            res.tables.append(_row(f"grad_{name}", i, g.value[i], tgt, g.stderr[i], f"grad_{name}"))
        if exact is not None:
            res.verdicts[f"grad_{name}"] = bool(np.all(np.abs(g.value - exact[0]) <= k * g.stderr + 1e-12))
        if cfg.get("hessian", True) and f.hess is not None:
            H = bel_hessian(model, f, s, t, x, weight, M, seed, h, threads=cfg.get("threads"))
            for i in range(d):
                for j in range(d):
                    tgt = None if exact is None else exact[1][i, j]
                    res.tables.append(_row(f"hess_{name}", f"{i},{j}", H.value[i, j], tgt,
                                           H.stderr[i, j], f"hess_{name}"))
            if exact is not None:
                res.verdicts[f"hess_{name}"] = bool(np.all(np.abs(H.value - exact[1]) <= k * H.stderr + 1e-12))
    return res


@_timed
def run_semigroup(cfg: dict) -> ExperimentResult:
    """Both sides of the semigroup interpolation formula.

    Keys: ``pair``, ``f``, ``s``, ``t``, ``x``, ``M_lhs``, ``M_out``, ``M_in``,
    ``nodes``, ``h``, ``max_cost``. Tolerances: ``k`` (4).
    """
    pair = pair_from_spec(cfg["pair"])
    seed = _seed(cfg)
    x = _as_vec(cfg.get("x", 1.0), pair.d)
    s, t = float(cfg.get("s", 0.0)), float(cfg.get("t", 1.0))
    f = _observable(cfg, pair.d)
    sd = semigroup_difference(pair, f, s, t, x, int(cfg.get("M_lhs", 16384)), int(cfg.get("M_out", 256)),
                              int(cfg.get("M_in", 256)), int(cfg.get("nodes", 16)),
                              float(cfg.get("h", 1 / 256)), seed, cfg.get("weight"),
                              threads=cfg.get("threads"), max_cost=float(cfg.get("max_cost", 5e9)))
    k = _tol(cfg, "k", 4.0)
    res = ExperimentResult("semigroup", config_digest(cfg))
    A, B = _oracle(pair.base), _oracle(pair.perturbed)
    exact = None
    if A is not None and B is not None and A.kind == B.kind == "ou" and f.name == "square":
        exact = ou_semigroup_square(A, t - s, x) - ou_semigroup_square(B, t - s, x)
    res.tables.append(_row("lhs", t - s, sd.lhs, exact, sd.lhs_stderr, "agreement"))
    res.tables.append(_row("rhs", t - s, sd.rhs, sd.lhs, sd.combined_stderr, "agreement"))
    res.verdicts["agreement"] = bool(sd.z_score <= k)
    res.notes["estimate"] = sd.to_dict()
    return res


@_timed
def run_invariant(cfg: dict) -> ExperimentResult:
    """Shift of the invariant measure ``(pi - pi_bar)(f)``.

    Keys: ``pair``, ``f``, ``T``, ``M_out``, ``M_in``, ``nodes``, ``h``,
    ``burn_in``. Tolerances: ``k`` (3). The closed-form check applies to OU pairs.
    """
    pair = pair_from_spec(cfg["pair"])
    seed = _seed(cfg)
    f = _observable(cfg, pair.d)
    est = invariant_shift(pair, f, cfg.get("T"), int(cfg.get("M_out", 256)), int(cfg.get("M_in", 256)),
                          int(cfg.get("nodes", 16)), float(cfg.get("h", 1 / 256)), seed,
                          cfg.get("burn_in"), threads=cfg.get("threads"))
    res = ExperimentResult("invariant", config_digest(cfg))
    A, B = _oracle(pair.base), _oracle(pair.perturbed)
    exact = None
    if A is not None and B is not None and A.kind == B.kind == "ou":
        try:
            exact = ou_invariant_shift(A, B, f.name)
        except UnsupportedOracle:
            exact = None
    res.tables.append(_row("shift", est.horizon, est.value, exact, est.stderr, "closed_form"))
    if exact is not None:
        res.verdicts["closed_form"] = bool(abs(est.value - exact) <= _tol(cfg, "k", 3.0) * est.stderr)
    res.notes["estimate"] = est.to_dict()
    return res


EXPERIMENTS = {
    "decomposition_convergence": run_decomposition_convergence,
    "skorohod_variance": run_skorohod_variance,
    "decay_rates": run_decay_rates,
    "as_bounds": run_as_bounds,
    "discretization_bound": run_discretization_bound,
    "uniform_difference": run_uniform_difference,
    "bel": run_bel,
    "meanfield": run_meanfield,
    "perturbation": run_perturbation,
    "semigroup": run_semigroup,
    "invariant": run_invariant,
}


def run_experiment(name: str, cfg: dict) -> ExperimentResult:
    if name not in EXPERIMENTS:
        raise KeyError(f"unknown experiment {name!r}; choose from {sorted(EXPERIMENTS)}")
    return EXPERIMENTS[name](cfg)
