"""Closed-form oracles for linear models (OU and GBM).

These evaluators never call into :mod:`flowlab.paths`; they are the
independent reference for every linear-model test value.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, hyp1f1

from .model import ModelSpec


class UnsupportedOracle(ValueError):
    pass


@dataclass(frozen=True)
class LinearOracle:
    """Exact evaluators for ``dX = -rate X dt + Sigma dW`` (OU) or
    ``dX = beta X dt + alpha X dW`` (1D GBM).

    Attributes:
        kind: ``"ou"`` or ``"gbm"``.
        rate: OU rate ``lambda`` (scalar, ``Lambda = lambda I``) or GBM ``beta``.
        sigma: OU ``d x r`` matrix ``Sigma`` or GBM scalar ``alpha``.
        d: state dimension.
    """

    kind: str
    rate: float
    sigma: object
    d: int = 1

    def __post_init__(self):
        if self.kind not in ("ou", "gbm"):
            raise UnsupportedOracle(f"unknown oracle kind {self.kind!r}")
        if self.kind == "gbm" and self.d != 1:
            raise UnsupportedOracle("GBM oracle is one-dimensional")

    @property
    def Sigma(self) -> np.ndarray:
        s = np.asarray(self.sigma, dtype=float)
        return s * np.eye(self.d) if s.ndim == 0 else s

    @classmethod
    def ou(cls, rate, sigma, d=1):
        return cls("ou", float(rate), sigma, d)

    @classmethod
    def gbm(cls, beta, alpha):
        return cls("gbm", float(beta), float(alpha), 1)

    @classmethod
    def from_model(cls, model: ModelSpec):
        meta = model.metadata
        if meta.get("kind") == "ou":
            if np.ndim(meta["rate"]) != 0:
                raise UnsupportedOracle("OU oracle supports scalar rates only")
            return cls.ou(meta["rate"], meta["sigma"], model.d)
        if meta.get("kind") == "gbm":
            return cls.gbm(meta["beta"], meta["alpha"])
        raise UnsupportedOracle(f"no oracle for model {model.name!r}")


def _phi(c, tau):
    """``(1 - exp(-c tau)) / c`` with the ``c -> 0`` limit ``tau``."""
    c = float(c)
    if abs(c) < 1e-300:
        return float(tau)
    return float(-np.expm1(-c * tau) / c)


def oracle_flow(oracle: LinearOracle, grid, x) -> np.ndarray:
    """Exact-in-distribution flow on the grid nodes, driven by the grid increments.

    OU steps use ``X_{k+1} = e^{-lambda h} X_k + zeta Sigma dW_k`` with the
    variance-matching weight ``zeta = sqrt((1 - e^{-2 lambda h}) / (2 lambda h))``.
    GBM uses ``x exp((beta - alpha^2/2) t + alpha W_t)``.

    Returns:
        States of shape ``(..., n+1, d)``.
    """
    inc = np.asarray(grid.increments, dtype=float)
    n = inc.shape[-2]
    h = (grid.t1 - grid.t0) / n
    x = np.asarray(x, dtype=float)
    batch = inc.shape[:-2]
    if oracle.kind == "gbm":
        W = np.concatenate([np.zeros(batch + (1,)), np.cumsum(inc[..., 0], axis=-1)], axis=-1)
        t = h * np.arange(n + 1)
        expo = (oracle.rate - 0.5 * oracle.sigma ** 2) * t + oracle.sigma * W
        return (np.atleast_1d(x)[..., 0, None] * np.exp(expo))[..., None]
    lam = oracle.rate
    Sig = oracle.Sigma
    decay = np.exp(-lam * h)
    zeta = np.sqrt(_phi(2 * lam, h) / h)
    noise = zeta * np.einsum("jk,...nk->...nj", Sig, inc)
    out = np.empty(batch + (n + 1, oracle.d))
    out[..., 0, :] = x
    for k in range(n):
        out[..., k + 1, :] = decay * out[..., k, :] + noise[..., k, :]
    return out


def oracle_tangent(oracle: LinearOracle, tau, x=None, W=None):
    """Exact tangent ``d X_{s,t} / dx``: ``e^{-lambda tau} I`` for OU,
    ``exp((beta - alpha^2/2) tau + alpha W)`` for GBM (needs the Brownian increment ``W``)."""
    if oracle.kind == "ou":
        return np.exp(-oracle.rate * tau) * np.eye(oracle.d)
    if W is None:
        raise UnsupportedOracle("GBM tangent needs the Brownian increment")
    return np.exp((oracle.rate - 0.5 * oracle.sigma ** 2) * tau + oracle.sigma * np.asarray(W))


def ou_mean_cov(oracle: LinearOracle, tau, x):
    """Mean and covariance of the OU flow ``X_{s,s+tau}(x)``."""
    if oracle.kind != "ou":
        raise UnsupportedOracle("OU only")
    S = oracle.Sigma
    mean = np.exp(-oracle.rate * tau) * np.asarray(x, dtype=float)
    cov = S @ S.T * _phi(2 * oracle.rate, tau)
    return mean, cov


def gaussian_norm_moment(mean, cov, n: int) -> float:
    """``E[|Z|^n]^{1/n}`` for ``Z ~ N(mean, cov)``.

    Any ``n`` in one dimension (folded-normal moments); ``n`` in ``{2, 4}``
    otherwise.
    """
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    d = mean.size
    if n < 1:
        raise ValueError("n must be >= 1")
    if d == 1:
        mu = float(mean[0])
        var = float(cov[0, 0])
        if var <= 0:
            return abs(mu)
        s = np.sqrt(var)
        # E|Z|^n = s^n 2^{n/2} Gamma((n+1)/2)/sqrt(pi) 1F1(-n/2; 1/2; -mu^2 / (2 s^2))
        log_c = n * np.log(s) + 0.5 * n * np.log(2.0) + gammaln(0.5 * (n + 1)) - 0.5 * np.log(np.pi)
        raw = np.exp(log_c) * hyp1f1(-0.5 * n, 0.5, -mu * mu / (2 * var))
        return float(raw ** (1.0 / n))
    m2 = float(mean @ mean + np.trace(cov))
    if n == 2:
        return np.sqrt(m2)
    if n == 4:
        raw = m2 ** 2 + 2 * np.trace(cov @ cov) + 4 * float(mean @ cov @ mean)
        return float(raw ** 0.25)
    raise UnsupportedOracle(f"moment order {n} unsupported for d={d}")


def oracle_moment(oracle: LinearOracle, n: int, tau, x) -> float:
    """Exact ``E[|X_{s,s+tau}(x)|^n]^{1/n}``."""
    if oracle.kind == "gbm":
        a, b = oracle.sigma, oracle.rate
        x0 = float(np.ravel(x)[0])
        if x0 == 0:
            return 0.0
        return abs(x0) * float(np.exp((b - 0.5 * a * a) * tau + 0.5 * n * a * a * tau))
    mean, cov = ou_mean_cov(oracle, tau, x)
    return gaussian_norm_moment(mean, cov, n)


def ou_difference_mean_cov(A: LinearOracle, B: LinearOracle, tau, x):
    """Mean and covariance of ``X_{s,s+tau}(x) - Xbar_{s,s+tau}(x)`` under common noise."""
    if A.kind != "ou" or B.kind != "ou":
        raise UnsupportedOracle("difference moments need two OU oracles")
    if A.d != B.d or A.Sigma.shape != B.Sigma.shape:
        raise UnsupportedOracle("dimension mismatch")
    x = np.asarray(x, dtype=float)
    la, lb = A.rate, B.rate
    Sa, Sb = A.Sigma, B.Sigma
    mean = (np.exp(-la * tau) - np.exp(-lb * tau)) * x
    cross = Sa @ Sb.T * _phi(la + lb, tau)
    cov = Sa @ Sa.T * _phi(2 * la, tau) - cross - cross.T + Sb @ Sb.T * _phi(2 * lb, tau)
    return mean, cov


def oracle_difference_moment(A: LinearOracle, B: LinearOracle, n: int, s, t, x) -> float:
    """Exact ``E[|X_{s,t}(x) - Xbar_{s,t}(x)|^n]^{1/n}`` for two OU models on common noise."""
    mean, cov = ou_difference_mean_cov(A, B, t - s, x)
    return gaussian_norm_moment(mean, cov, n)


def ou_semigroup_square(oracle: LinearOracle, tau, x) -> float:
    """``P_{s,s+tau}(|y|^2)(x) = |m|^2 + tr C`` for OU."""
    mean, cov = ou_mean_cov(oracle, tau, x)
    return float(mean @ mean + np.trace(cov)) if np.ndim(mean) else float(mean ** 2 + cov[0, 0])


def ou_gibbs_variance(rate, sigma=1.0) -> float:
    """Stationary variance ``sigma^2 / (2 rate)`` of a 1D OU process."""
    return float(sigma) ** 2 / (2.0 * float(rate))


def ou_semigroup_derivatives(oracle: LinearOracle, f_name: str, tau, x, coef=None):
    """Exact ``(grad P f(x), grad^2 P f(x))`` for OU and catalog observables.

    ``linear`` (``c . y``, default ``c = e_1``): ``(e^{-lambda tau} c, 0)``;
    ``square`` (``|y|^2``): ``(2 e^{-2 lambda tau} x, 2 e^{-2 lambda tau} I)``;
    ``constant``: zeros.
    """
    if oracle.kind != "ou":
        raise UnsupportedOracle("OU only")
    d = oracle.d
    x = np.asarray(x, dtype=float)
    e1 = np.exp(-oracle.rate * tau)
    if f_name == "linear":
        c = np.eye(d)[0] if coef is None else np.asarray(coef, dtype=float)
        return e1 * c, np.zeros((d, d))
    if f_name == "square":
        return 2 * e1 ** 2 * x, 2 * e1 ** 2 * np.eye(d)
    if f_name == "constant":
        return np.zeros(d), np.zeros((d, d))
    raise UnsupportedOracle(f"no closed form for observable {f_name!r}")


def ou_invariant_shift(A: LinearOracle, B: LinearOracle, f_name: str) -> float:
    """Exact ``(pi - pi_bar)(f)`` for two OU models; ``f`` is ``square``, ``linear`` or ``constant``."""
    if A.kind != "ou" or B.kind != "ou":
        raise UnsupportedOracle("OU only")
    if f_name in ("linear", "constant"):
        return 0.0
    if f_name == "square":
        SA, SB = A.Sigma, B.Sigma
        return float(np.trace(SA @ SA.T) / (2 * A.rate) - np.trace(SB @ SB.T) / (2 * B.rate))
    raise UnsupportedOracle(f"no closed form for observable {f_name!r}")
