"""Regularity conditions and explicit constants of a diffusion model.

All suprema over states are empirical: they are maxima over a finite sample
set (uniform draws in a box plus the box corners). They certify the
conditions only on the sampled set, which is enough for the catalog models
whose relevant quantities are constant or attain their extremes inside the
box.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .model import ModelSpec
from .rng import AUX, substream

DEFAULT_C = 1.0


@dataclass(frozen=True)
class SampleSpec:
    """Sampling box ``[low, high]^d`` with ``count`` uniform points plus corners."""

    low: float = -5.0
    high: float = 5.0
    count: int = 1000
    seed: int = 0
    t: float = 0.0

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if not self.high >= self.low:
            raise ValueError("box must satisfy low <= high")

    def points(self, d: int) -> np.ndarray:
        rng = substream(self.seed, AUX, 0)
        pts = rng.uniform(self.low, self.high, size=(self.count, d))
        corners = np.array(list(itertools.product((self.low, self.high), repeat=d)), dtype=float)
        return np.concatenate([pts, corners, np.zeros((1, d))])


def _spec(sample_spec) -> SampleSpec:
    if sample_spec is None:
        return SampleSpec()
    if isinstance(sample_spec, SampleSpec):
        return sample_spec
    spec = dict(sample_spec)
    if "box" in spec:
        spec["low"], spec["high"] = spec.pop("box")
    return SampleSpec(**spec)


def log_norm(M) -> np.ndarray:
    """Logarithmic norm ``lambda_max((M + M') / 2)`` of (a batch of) square matrices."""
    M = np.asarray(M, dtype=float)
    return np.linalg.eigvalsh(0.5 * (M + np.swapaxes(M, -1, -2)))[..., -1]


def log_norm_matrix(model: ModelSpec, t, x) -> np.ndarray:
    """``A = grad b + grad b' + sum_k grad sigma_k grad sigma_k'``, symmetrised."""
    g = model.drift_grad(t, np.asarray(x, dtype=float))
    s = model.diffusion_grad(t, np.asarray(x, dtype=float))  # (..., r, d, d)
    A = g + np.swapaxes(g, -1, -2) + np.einsum("...kij,...klj->...il", s, s)
    return 0.5 * (A + np.swapaxes(A, -1, -2))


def estimate_lambda_A(model: ModelSpec, sample_spec=None) -> dict:
    """Empirical ``lambda_A = -1/2 max_x lambda_max(A(x))`` over the sample set.

    Returns:
        ``{"lambda_A": value, "argmin": point attaining the worst eigenvalue}``.
    """
    spec = _spec(sample_spec)
    pts = spec.points(model.d)
    top = np.linalg.eigvalsh(log_norm_matrix(model, spec.t, pts))[..., -1]
    j = int(np.argmax(top))
    return {"lambda_A": float(-0.5 * top[j]), "argmin": pts[j]}


def diffusion_log_norms(model: ModelSpec, sample_spec=None) -> np.ndarray:
    """``rho(grad sigma_k) = sup_x log_norm(grad sigma_k(x))`` for each column ``k``."""
    spec = _spec(sample_spec)
    pts = spec.points(model.d)
    return log_norm(model.diffusion_grad(spec.t, pts)).max(axis=0)


def rho_params(model: ModelSpec, sample_spec=None) -> tuple[float, float]:
    """``(rho_star, rho_sq)``: the largest column log-norm and the sum of their squares."""
    rk = diffusion_log_norms(model, sample_spec)
    return float(rk.max()), float(np.sum(rk ** 2))


def lambda_A_n(lambda_A: float, d: int, n: float, rho_star: float) -> float:
    return lambda_A - d * (n - 2) * rho_star ** 2 / 2.0


def kappa_n(params: dict, n: float) -> dict:
    """Moment constant of the polynomial growth condition.

    Args:
        params: ``alpha0, alpha1, alpha2, beta0, beta1, beta2``.
        n: moment order ``>= 2``.

    Returns:
        ``{"beta2_n", "kappa_n", "ok"}``; ``kappa_n`` is ``nan`` when
        ``beta2_n <= 0`` (condition violated).
    """
    if n < 2:
        raise ValueError("n must be >= 2")
    a0, a1, a2 = (float(params[k]) for k in ("alpha0", "alpha1", "alpha2"))
    b0, b1, b2 = (float(params[k]) for k in ("beta0", "beta1", "beta2"))
    beta2_n = b2 - (n - 1) * a2 / 2.0
    if beta2_n <= 0:
        return {"beta2_n": beta2_n, "kappa_n": float("nan"), "ok": False}
    g0 = a0 + 2 * b0
    g1 = a1 + 2 * b1
    k = 1.0 + ((g1 + (n - 2) * a1) + np.sqrt(g0 + (n - 2) * a0)) / (2.0 * np.sqrt(beta2_n))
    return {"beta2_n": beta2_n, "kappa_n": float(k), "ok": True}


def chi(model: ModelSpec, sample_spec=None, c: float = DEFAULT_C) -> float:
    """``c + sup|grad^2 b|_F + sup|grad^2 sigma|_F^2 + rho_star^2`` over the sample set."""
    spec = _spec(sample_spec)
    pts = spec.points(model.d)
    hb = model.drift_hess(spec.t, pts).reshape(len(pts), -1)
    hs = model.diffusion_hess(spec.t, pts).reshape(len(pts), -1)
    rho_star, _ = rho_params(model, spec)
    return float(c + np.linalg.norm(hb, axis=1).max() + (np.linalg.norm(hs, axis=1).max()) ** 2 + rho_star ** 2)


def sigma_bound_from_a(a_norm_diff: float, upsilon: float) -> float:
    """Bound ``|a - a_bar| / sqrt(upsilon)`` on ``|sigma - sigma_bar|`` under ellipticity ``a >= upsilon I``."""
    if upsilon <= 0:
        raise ValueError("upsilon must be positive")
    return float(a_norm_diff) / np.sqrt(upsilon)


def growth_params(model: ModelSpec) -> dict | None:
    """Polynomial growth parameters for catalog models, ``None`` otherwise.

    ``|sigma|_F^2 <= alpha0 + alpha1 |x| + alpha2 |x|^2`` and
    ``<x, b> <= beta0 + beta1 |x| - beta2 |x|^2``.
    """
    meta = model.metadata
    kind = meta.get("kind")
    if kind in ("ou", "langevin"):
        S = np.asarray(meta["sigma"], dtype=float)
        if kind == "ou":
            rate = meta["rate"]
            # <x, -Lambda x> <= -lambda_min(sym Lambda) |x|^2
            b2 = float(rate) if np.ndim(rate) == 0 else float(-log_norm(-np.asarray(rate)))
        else:
            b2 = float(meta["convexity"])
        return {"alpha0": float(np.sum(S ** 2)), "alpha1": 0.0, "alpha2": 0.0,
                "beta0": 0.0, "beta1": 0.0, "beta2": b2}
    if kind == "gbm":
        return {"alpha0": 0.0, "alpha1": 0.0, "alpha2": meta["alpha"] ** 2,
                "beta0": 0.0, "beta1": 0.0, "beta2": -meta["beta"]}
    return None


@dataclass
class ConditionReport:
    model: str
    n: float
    d: int
    lambda_A: float
    lambda_A_n: float
    rho_star: float
    rho_sq: float
    chi: float
    c: float
    p_n: dict | None
    T_n: bool
    P_n: bool | None
    argmin: list = field(default_factory=list)
    note: str = "suprema are maxima over a finite sample set"

    def to_dict(self) -> dict:
        """Flat JSON-compatible dictionary."""
        out = {k: v for k, v in asdict(self).items() if k != "p_n"}
        for k, v in (self.p_n or {}).items():
            out[f"p_{k}"] = v
        return out

    def to_json(self) -> str:
        def clean(v):
            if isinstance(v, float) and not np.isfinite(v):
                return None
            return v

        return json.dumps({k: clean(v) for k, v in self.to_dict().items()}, sort_keys=True)


def condition_report(model: ModelSpec, n: float = 2, sample_spec=None, c: float = DEFAULT_C,
                     growth: dict | None = None) -> ConditionReport:
    spec = _spec(sample_spec)
    lam = estimate_lambda_A(model, spec)
    rho_star, rho_sq = rho_params(model, spec)
    lam_n = lambda_A_n(lam["lambda_A"], model.d, n, rho_star)
    growth = growth if growth is not None else growth_params(model)
    p_n = None
    P_ok = None
    if growth is not None:
        k = kappa_n(growth, n)
        p_n = {**growth, "beta2_n": k["beta2_n"], "kappa_n": k["kappa_n"]}
        P_ok = bool(k["ok"] and min(growth.values()) >= 0)
    return ConditionReport(
        model=model.name, n=n, d=model.d,
        lambda_A=lam["lambda_A"], lambda_A_n=lam_n,
        rho_star=rho_star, rho_sq=rho_sq,
        chi=chi(model, spec, c), c=c, p_n=p_n,
        T_n=bool(lam["lambda_A"] > 0 and lam_n > 0), P_n=P_ok,
        argmin=[float(v) for v in lam["argmin"]],
    )
