"""Diffusion models with analytic first and second derivatives.

Conventions follow the column-gradient layout used throughout the package:

* ``drift_grad(t, x)[..., i, k] = d b^k / d x_i``
* ``diffusion_grad(t, x)[..., k, i, j] = d sigma^{j, k} / d x_i`` (one
  ``d x d`` gradient per noise column ``k``)
* ``drift_hess(t, x)[..., i, j, k] = d^2 b^k / d x_i d x_j``
* ``diffusion_hess(t, x)[..., k, i, j, l] = d^2 sigma^{l, k} / d x_i d x_j``

Every callable is vectorised over leading batch axes of ``x``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

Array = np.ndarray


class ModelEvaluationError(ValueError):
    """Raised when a model returns non-finite values."""

    def __init__(self, t, x, what):
        self.t = t
        self.x = np.asarray(x)
        super().__init__(f"non-finite {what} at t={t}, x={self.x.tolist()}")


@dataclass(frozen=True)
class ModelSpec:
    name: str
    dim_state: int
    dim_noise: int
    drift: Callable[[float, Array], Array]
    diffusion: Callable[[float, Array], Array]
    drift_grad: Callable[[float, Array], Array]
    diffusion_grad: Callable[[float, Array], Array]
    drift_hess: Callable[[float, Array], Array]
    diffusion_hess: Callable[[float, Array], Array]
    metadata: dict = field(default_factory=dict)
    # Structural flags let integrators skip work; they never change results.
    constant_diffusion: bool = False
    affine_drift: bool = False

    def __post_init__(self):
        if self.dim_state < 1 or self.dim_noise < 1:
            raise ValueError("dimensions must be >= 1")

    @property
    def d(self) -> int:
        return self.dim_state

    @property
    def r(self) -> int:
        return self.dim_noise

    def diffusion_column_grad(self, t, x, k):
        """Gradient of the ``k``-th noise column, shape ``(..., d, d)``."""
        return self.diffusion_grad(t, x)[..., k, :, :]

    def diffusion_column_hess(self, t, x, k):
        return self.diffusion_hess(t, x)[..., k, :, :, :]


@dataclass(frozen=True)
class ModelPair:
    """Base model ``(b, sigma)`` and perturbed model ``(b_bar, sigma_bar)``."""

    base: ModelSpec
    perturbed: ModelSpec

    def __post_init__(self):
        if (self.base.d, self.base.r) != (self.perturbed.d, self.perturbed.r):
            raise ValueError(
                f"dimension mismatch: base (d={self.base.d}, r={self.base.r}) vs "
                f"perturbed (d={self.perturbed.d}, r={self.perturbed.r})"
            )

    @property
    def d(self) -> int:
        return self.base.d

    @property
    def r(self) -> int:
        return self.base.r


class DerivativeBundle(NamedTuple):
    b: Array
    sigma: Array
    drift_grad: Array
    diffusion_grad: Array
    drift_hess: Array
    diffusion_hess: Array
    a: Array


class Delta(NamedTuple):
    db: Array
    dsigma: Array
    da: Array


def eval_derivatives(model: ModelSpec, t: float, x) -> DerivativeBundle:
    x = np.asarray(x, dtype=float)
    if t < 0 or not np.all(np.isfinite(x)):
        raise ValueError("eval_derivatives needs t >= 0 and a finite state")
    b = model.drift(t, x)
    sigma = model.diffusion(t, x)
    out = DerivativeBundle(
        b=b,
        sigma=sigma,
        drift_grad=model.drift_grad(t, x),
        diffusion_grad=model.diffusion_grad(t, x),
        drift_hess=model.drift_hess(t, x),
        diffusion_hess=model.diffusion_hess(t, x),
        a=sigma @ np.swapaxes(sigma, -1, -2),
    )
    for name, value in out._asdict().items():
        if not np.all(np.isfinite(value)):
            raise ModelEvaluationError(t, x, name)
    return out


def delta_eval(pair: ModelPair, t: float, x) -> Delta:
    """Coefficient differences ``b - b_bar``, ``sigma - sigma_bar`` and ``a - a_bar``.

    ``da`` is computed as ``sigma sigma' - sigma_bar sigma_bar'``, never as
    ``dsigma dsigma'``.
    """
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != pair.d:
        raise ValueError(f"state has dimension {x.shape[-1]}, pair expects {pair.d}")
    s = pair.base.diffusion(t, x)
    sb = pair.perturbed.diffusion(t, x)
    return Delta(
        db=pair.base.drift(t, x) - pair.perturbed.drift(t, x),
        dsigma=s - sb,
        da=s @ np.swapaxes(s, -1, -2) - sb @ np.swapaxes(sb, -1, -2),
    )


# ---------------------------------------------------------------------------
# finite-difference validation


class FDReport(NamedTuple):
    errors: dict
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(err <= self.tolerance for err in self.errors.values())


def _central(fun, t, x, eps):
    """Stack of central differences ``(f(x + eps e_i) - f(x - eps e_i)) / 2 eps`` along a new axis 0."""
    d = x.shape[-1]
    cols = []
    for i in range(d):
        e = np.zeros(d)
        e[i] = eps
        cols.append((fun(t, x + e) - fun(t, x - e)) / (2 * eps))
    return np.stack(cols)


def _rel_err(analytic, approx):
    scale = max(1.0, float(np.max(np.abs(analytic))) if np.size(analytic) else 1.0)
    return float(np.max(np.abs(analytic - approx))) / scale


def finite_difference_check(model: ModelSpec, samples, eps: float = 1e-5, tol: float = 1e-5) -> FDReport:
    """Compare analytic derivatives with central differences at ``samples``.

    ``samples`` is an iterable of ``(t, x)`` pairs. Errors are relative to
    ``max(1, |analytic|)`` and reported as the worst case per derivative.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    worst = dict.fromkeys(("drift_grad", "diffusion_grad", "drift_hess", "diffusion_hess"), 0.0)
    for t, x in samples:
        x = np.asarray(x, dtype=float)
        # drift: fd[i, k] = d b^k / d x_i
        fd = _central(model.drift, t, x, eps)
        worst["drift_grad"] = max(worst["drift_grad"], _rel_err(model.drift_grad(t, x), fd))
        # diffusion: fd[i, j, k] = d sigma^{j,k} / d x_i -> reorder to [k, i, j]
        fd = _central(model.diffusion, t, x, eps).transpose(2, 0, 1)
        worst["diffusion_grad"] = max(worst["diffusion_grad"], _rel_err(model.diffusion_grad(t, x), fd))
        # hessians from differences of analytic gradients: fd[j, i, k] = d/dx_j (d b^k / dx_i)
        fd = _central(model.drift_grad, t, x, eps).transpose(1, 0, 2)
        worst["drift_hess"] = max(worst["drift_hess"], _rel_err(model.drift_hess(t, x), fd))
        fd = _central(model.diffusion_grad, t, x, eps)  # [j, k, i, l]
        fd = fd.transpose(1, 2, 0, 3)
        worst["diffusion_hess"] = max(worst["diffusion_hess"], _rel_err(model.diffusion_hess(t, x), fd))
    return FDReport(worst, tol)


# ---------------------------------------------------------------------------
# catalog


def _zeros(shape_tail):
    def f(t, x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1] + shape_tail)

    return f


def _const(value):
    value = np.asarray(value, dtype=float)

    def f(t, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(value, x.shape[:-1] + value.shape).copy()

    return f


def _as_matrix(value, d, r=None):
    value = np.asarray(value, dtype=float)
    if value.ndim == 0:
        if r is not None and r != d:
            raise ValueError("a scalar diffusion needs r == d")
        return value * np.eye(d)
    if value.ndim != 2 or value.shape[0] != d:
        raise ValueError(f"expected a matrix with {d} rows, got shape {value.shape}")
    return value


def ou(rate=1.0, sigma=1.0, d: int = 1) -> ModelSpec:
    """Ornstein-Uhlenbeck model ``dX = -Lambda X dt + Sigma dW``.

    ``rate`` is a scalar (``Lambda = rate I``) or a ``d x d`` matrix;
    ``sigma`` is a scalar (``Sigma = sigma I``) or a ``d x r`` matrix.
    """
    lam = _as_matrix(rate, d)
    Sigma = _as_matrix(sigma, d)
    r = Sigma.shape[1]
    lam_t = lam.T.copy()
    grad = -lam.T  # grad[i, k] = d b^k / d x_i = -Lambda[k, i]

    def drift(t, x):
        return -(np.asarray(x, dtype=float) @ lam_t)

    return ModelSpec(
        name="ou",
        dim_state=d,
        dim_noise=r,
        drift=drift,
        diffusion=_const(Sigma),
        drift_grad=_const(grad),
        diffusion_grad=_zeros((r, d, d)),
        drift_hess=_zeros((d, d, d)),
        diffusion_hess=_zeros((r, d, d, d)),
        metadata={"kind": "ou", "rate": float(rate) if np.ndim(rate) == 0 else lam, "sigma": Sigma},
        constant_diffusion=True,
        affine_drift=True,
    )


def gbm(beta=0.1, alpha=0.2) -> ModelSpec:
    """One-dimensional geometric Brownian motion ``dX = beta X dt + alpha X dW``."""
    beta = float(beta)
    alpha = float(alpha)
    return ModelSpec(
        name="gbm",
        dim_state=1,
        dim_noise=1,
        drift=lambda t, x: beta * np.asarray(x, dtype=float),
        diffusion=lambda t, x: alpha * np.asarray(x, dtype=float)[..., None],
        drift_grad=_const([[beta]]),
        diffusion_grad=_const([[[alpha]]]),
        drift_hess=_zeros((1, 1, 1)),
        diffusion_hess=_zeros((1, 1, 1, 1)),
        metadata={"kind": "gbm", "beta": beta, "alpha": alpha},
        affine_drift=True,
    )


def langevin_tanh(d: int = 2, sigma=1.0, coords=None) -> ModelSpec:
    """Langevin diffusion ``dX = -grad U(X) dt + sigma dW`` with
    ``U(x) = |x|^2 / 2 + sum_{i in coords} log cosh(x_i)``.

    ``grad^2 U = I + diag(sech^2 x)`` on ``coords`` so the potential is
    1-convex and its third derivative ``2 sech^2 tanh`` is bounded.

    Args:
        d: state dimension.
        sigma: scalar or ``d x r`` diffusion matrix.
        coords: indices carrying the ``log cosh`` term; all by default.
    """
    Sigma = _as_matrix(sigma, d)
    r = Sigma.shape[1]
    idx = np.arange(d) if coords is None else np.asarray(sorted(coords), dtype=int)
    if idx.size and (idx.min() < 0 or idx.max() >= d):
        raise ValueError(f"coords {list(idx)} out of range for d={d}")

    def drift(t, x):
        x = np.asarray(x, dtype=float)
        out = -x.copy()
        out[..., idx] -= np.tanh(x[..., idx])
        return out

    def drift_grad(t, x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape + (d,))
        out[..., np.arange(d), np.arange(d)] = -1.0
        out[..., idx, idx] -= 1.0 / np.cosh(x[..., idx]) ** 2
        return out

    def drift_hess(t, x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape + (d, d))
        xi = x[..., idx]
        out[..., idx, idx, idx] = 2.0 * np.tanh(xi) / np.cosh(xi) ** 2
        return out

    return ModelSpec(
        name="langevin_tanh",
        dim_state=d,
        dim_noise=r,
        drift=drift,
        diffusion=_const(Sigma),
        drift_grad=drift_grad,
        diffusion_grad=_zeros((r, d, d)),
        drift_hess=drift_hess,
        diffusion_hess=_zeros((r, d, d, d)),
        metadata={"kind": "langevin", "convexity": 1.0, "sigma": Sigma,
                  # sup_x |2 sech^2 tanh| = 4 / (3 sqrt 3), attained at tanh = 1/sqrt(3)
                  "third_derivative_sup": 4.0 / (3.0 * np.sqrt(3.0))},
        constant_diffusion=True,
    )


def with_extra_drift(model: ModelSpec, delta: float, extra, extra_grad, extra_hess, name=None) -> ModelSpec:
    """Model with drift ``b + delta * extra`` and the same diffusion."""

    def drift(t, x):
        return model.drift(t, x) + delta * extra(t, x)

    def drift_grad(t, x):
        return model.drift_grad(t, x) + delta * extra_grad(t, x)

    def drift_hess(t, x):
        return model.drift_hess(t, x) + delta * extra_hess(t, x)

    meta = dict(model.metadata)
    meta["extra_drift_scale"] = delta
    return ModelSpec(
        name=name or f"{model.name}+drift",
        dim_state=model.d,
        dim_noise=model.r,
        drift=drift,
        diffusion=model.diffusion,
        drift_grad=drift_grad,
        diffusion_grad=model.diffusion_grad,
        drift_hess=drift_hess,
        diffusion_hess=model.diffusion_hess,
        metadata=meta,
        constant_diffusion=model.constant_diffusion,
    )


def tanh_field(d: int):
    """Componentwise ``tanh`` with its gradient and Hessian (bounded drift perturbation)."""
    idx = np.arange(d)

    def f(t, x):
        return np.tanh(np.asarray(x, dtype=float))

    def grad(t, x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape + (d,))
        out[..., idx, idx] = 1.0 / np.cosh(x) ** 2
        return out

    def hess(t, x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape + (d, d))
        out[..., idx, idx, idx] = -2.0 * np.tanh(x) / np.cosh(x) ** 2
        return out

    return f, grad, hess


@dataclass(frozen=True)
class FrozenDrift:
    """Wrapper marking a model whose drift is frozen on a coarse mesh of width ``H``.

    Consumed by :func:`flowlab.paths.integrate_frozen_drift`.
    """

    model: ModelSpec
    H: float


def frozen_drift(model: ModelSpec, H: float) -> FrozenDrift:
    if H <= 0:
        raise ValueError("freeze interval must be positive")
    return FrozenDrift(model, float(H))


CATALOG = {
    "ou": (ou, {"rate": 1.0, "sigma": 1.0, "d": 1}, "Ornstein-Uhlenbeck, constant diffusion"),
    "gbm": (gbm, {"beta": 0.1, "alpha": 0.2}, "1D geometric Brownian motion"),
    "langevin_tanh": (langevin_tanh, {"d": 2, "sigma": 1.0, "coords": None},
                      "Langevin, U = |x|^2/2 + sum log cosh x_i"),
    "frozen_drift": (frozen_drift, {"model": "<catalog model>", "H": 0.1},
                     "drift frozen on a coarse mesh (wraps a catalog model)"),
}


def build_model(name: str, **params) -> ModelSpec:
    """Instantiate a catalog model by name."""
    if name not in CATALOG or name == "frozen_drift":
        raise KeyError(f"unknown model {name!r}; choose from {sorted(k for k in CATALOG if k != 'frozen_drift')}")
    factory, defaults, _ = CATALOG[name]
    unknown = set(params) - set(defaults)
    if unknown:
        raise KeyError(f"unknown parameters for {name}: {sorted(unknown)}")
    return factory(**{**defaults, **params})
