"""Monte Carlo moments and semigroup-level estimators.

Bismut-Elworthy-Li (BEL) weights are discretised as left-point Ito sums on
the integration mesh:

    tau     = sum_k dw(u_k) J_k a^{-1/2}(X_k) dW_k
    tau2    = sum_k dw(u_k) [H_k a^{-1/2}(X_k) + (J_k x J_k) grad a^{-1/2}(X_k)] dW_k

with ``J_k``, ``H_k`` the tangent and Hessian of the flow started at ``x``
and ``dw`` the derivative of the time weight ``omega``. The weights assume
``sigma = a^{1/2}`` (square, symmetric diffusion matrix).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .model import ModelPair, ModelSpec, delta_eval
from .paths import BrownianGrid, euler_step, integrate_flow, matvec, sample_brownian
from .rng import AUX, NESTED, chunked_map, substream

Z95 = 1.959963984540054
DEFAULT_UPSILON_MIN = 1e-8


class EstimationError(RuntimeError):
    def __init__(self, message, diverged=0):
        self.diverged = diverged
        super().__init__(message)


class SingularDiffusionError(ValueError):
    """Raised when ``a(x)`` has an eigenvalue below the ellipticity floor."""


# ---------------------------------------------------------------------------
# moments


@dataclass
class MomentEstimate:
    """Estimate of ``E[|Z|^n]^{1/n}``; ``stderr`` is the delta-method standard error."""

    order: int
    value: float
    raw_mean: float
    stderr: float
    samples: int
    seed: int | None
    diverged: int = 0

    @property
    def halfwidth(self) -> float:
        """95% normal confidence half-width."""
        return Z95 * self.stderr

    @property
    def rel_stderr(self) -> float:
        return self.stderr / self.value if self.value > 0 else 0.0

    def to_dict(self) -> dict:
        out = asdict(self)
        out["halfwidth"] = self.halfwidth
        return out


def moment_from_norms(norms, n: int, seed=None) -> MomentEstimate:
    """Moment estimate from per-sample norms; ``nan`` entries count as divergent."""
    norms = np.asarray(norms, dtype=float).reshape(-1)
    if n < 1:
        raise ValueError("n must be >= 1")
    ok = np.isfinite(norms)
    div = int(np.sum(~ok))
    v = norms[ok] ** n
    if v.size == 0:
        raise EstimationError(f"all {div} samples diverged", div)
    m = float(v.mean())
    se_raw = float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0
    value = m ** (1.0 / n)
    stderr = (value / (n * m)) * se_raw if m > 0 else 0.0
    return MomentEstimate(n, value, m, stderr, int(v.size), seed, div)


def _norms(values):
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        return np.abs(values)
    return np.linalg.norm(values.reshape(values.shape[0], -1), axis=1)


def moment_estimate(sampler, n: int, M: int, master_seed, threads=None, chunk: int = 256) -> MomentEstimate:
    """``E[|Z|^n]^{1/n}`` from ``M`` samples.

    Args:
        sampler: ``sampler(master_seed, indices) -> array (len(indices), ...)``;
            non-finite rows are treated as divergent.
        n: moment order.
        M: number of samples, at least 2.
        master_seed: seed forwarded to the sampler.
    """
    if M < 2:
        raise ValueError("M must be >= 2")
    parts = chunked_map(lambda a, b: _norms(sampler(master_seed, np.arange(a, b))), M, chunk, threads)
    return moment_from_norms(np.concatenate(parts), n, master_seed)


def flow_moments(model: ModelSpec, s, t, x, n, M, h, seed, threads=None):
    """``E[|X_{s,t}(x)|^n]^{1/n}`` for one ``t`` or a list of times."""
    times, scalar = _times(t)
    steps = int(round((times[-1] - s) / h))
    idx = [int(round((u - s) / h)) for u in times]

    def sampler(seed_, ids):
        grid = sample_brownian(seed_, ids, s, times[-1], steps, model.r)
        fl = integrate_flow(model, grid, x)
        out = fl.states[:, idx, :]
        out[fl.diverged] = np.nan
        return out

    return _multi_moments(sampler, times, scalar, n, M, seed, threads)


def _times(t):
    if np.ndim(t) == 0:
        return [float(t)], True
    return sorted(float(u) for u in t), False


def _multi_moments(sampler, times, scalar, n, M, seed, threads):
    parts = chunked_map(lambda a, b: sampler(seed, np.arange(a, b)), M, 256, threads)
    vals = np.concatenate(parts)  # (M, T, ...)
    ests = [moment_from_norms(_norms(vals[:, j]), n, seed) for j in range(len(times))]
    return ests[0] if scalar else ests


def flow_difference_moments(pair: ModelPair, s, t, x, n, M, h, seed, threads=None):
    """``E[|X_{s,t}(x) - Xbar_{s,t}(x)|^n]^{1/n}`` under common-noise coupling.

    ``t`` may be a list of times; all are read off the same simulated paths.
    """
    times, scalar = _times(t)
    steps = int(round((times[-1] - s) / h))
    idx = [int(round((u - s) / h)) for u in times]

    def sampler(seed_, ids):
        grid = sample_brownian(seed_, ids, s, times[-1], steps, pair.r)
        a = integrate_flow(pair.base, grid, x)
        b = integrate_flow(pair.perturbed, grid, x)
        out = a.states[:, idx, :] - b.states[:, idx, :]
        out[a.diverged | b.diverged] = np.nan
        return out

    return _multi_moments(sampler, times, scalar, n, M, seed, threads)


# ---------------------------------------------------------------------------
# observables and weights


@dataclass(frozen=True)
class Observable:
    """Scalar test function with gradient (and optionally Hessian)."""

    name: str
    value: object
    grad: object
    hess: object = None


def observable(name: str, d: int = 1, coef=None) -> Observable:
    """Catalog observables: ``linear`` (``c . y``, default ``c = e_1``), ``square``
    (``|y|^2``), ``constant`` (``1``), ``tanh`` (``tanh(y_1)``)."""
    if name == "linear":
        c = np.zeros(d) if coef is None else np.asarray(coef, dtype=float)
        if coef is None:
            c[0] = 1.0
        return Observable(name, lambda y: y @ c, lambda y: np.broadcast_to(c, y.shape).copy(),
                          lambda y: np.zeros(y.shape + (d,)))
    if name == "square":
        return Observable(name, lambda y: np.sum(y * y, axis=-1), lambda y: 2.0 * y,
                          lambda y: np.broadcast_to(2.0 * np.eye(d), y.shape + (d,)).copy())
    if name == "constant":
        return Observable(name, lambda y: np.ones(y.shape[:-1]), lambda y: np.zeros_like(y),
                          lambda y: np.zeros(y.shape + (d,)))
    if name == "tanh":
        def grad(y):
            g = np.zeros_like(y)
            g[..., 0] = 1.0 / np.cosh(y[..., 0]) ** 2
            return g
        return Observable(name, lambda y: np.tanh(y[..., 0]), grad)
    raise KeyError(f"unknown observable {name!r}")


@dataclass(frozen=True)
class WeightSpec:
    """Time weight ``omega(u) = phi((u - s) / (t - s))``.

    ``kind="linear"`` is ``phi(v) = v``; ``kind="cosine"`` is the smooth ramp
    ``1 + cos((1 + (1 - v) / eps) pi / 2)`` on ``[1 - eps, 1]``, zero before.
    """

    kind: str = "linear"
    eps: float = 0.5

    def __post_init__(self):
        if self.kind not in ("linear", "cosine"):
            raise ValueError(f"unknown weight kind {self.kind!r}")
        if self.kind == "cosine" and not 0 < self.eps <= 1:
            raise ValueError("eps must lie in (0, 1]")

    def phi(self, v):
        v = np.asarray(v, dtype=float)
        if self.kind == "linear":
            return v
        arg = (1.0 + (1.0 - v) / self.eps) * np.pi / 2
        return np.where(v >= 1 - self.eps, 1.0 + np.cos(arg), 0.0)

    def dphi(self, v):
        v = np.asarray(v, dtype=float)
        if self.kind == "linear":
            return np.ones_like(v)
        arg = (1.0 + (1.0 - v) / self.eps) * np.pi / 2
        return np.where(v >= 1 - self.eps, np.sin(arg) * np.pi / (2 * self.eps), 0.0)

    def domega(self, u, s, t):
        return self.dphi((u - s) / (t - s)) / (t - s)


def _weight(spec) -> WeightSpec:
    if spec is None:
        return WeightSpec()
    if isinstance(spec, WeightSpec):
        return spec
    return WeightSpec(**spec)


def inv_sqrt_diffusion(model: ModelSpec, t, x, want_grad=False, upsilon_min=DEFAULT_UPSILON_MIN):
    """``a^{-1/2}(x)`` and, optionally, ``G[..., p, k, l] = d_p (a^{-1/2})[k, l]``.

    Uses ``d_p a^{-1/2} = -a^{-1/2} (d_p a^{1/2}) a^{-1/2}`` with ``d_p a^{1/2}``
    solved in the eigenbasis of ``a``.
    """
    s = model.diffusion(t, x)
    a = s @ np.swapaxes(s, -1, -2)
    w, V = np.linalg.eigh(0.5 * (a + np.swapaxes(a, -1, -2)))
    if np.any(w[..., 0] < upsilon_min):
        bad = float(np.min(w[..., 0]))
        raise SingularDiffusionError(f"smallest eigenvalue of a(x) is {bad:.3g} < floor {upsilon_min:g}")
    rw = np.sqrt(w)
    inv = (V / rw[..., None, :]) @ np.swapaxes(V, -1, -2)
    if not want_grad:
        return inv, None
    if model.constant_diffusion:
        return inv, np.zeros(inv.shape[:-2] + (model.d,) + inv.shape[-2:])
    dg = model.diffusion_grad(t, x)  # (..., k, p, j) = d_p sigma^{j,k}
    denom = rw[..., :, None] + rw[..., None, :]
    grads = []
    for p in range(model.d):
        ds = np.swapaxes(dg[..., :, p, :], -1, -2)  # (..., j, k)
        da = ds @ np.swapaxes(s, -1, -2) + s @ np.swapaxes(ds, -1, -2)
        core = (np.swapaxes(V, -1, -2) @ da @ V) / denom
        dsqrt = V @ core @ np.swapaxes(V, -1, -2)
        grads.append(-inv @ dsqrt @ inv)
    return inv, np.stack(grads, axis=-3)


def check_bel_model(model: ModelSpec, t, x, upsilon_min=DEFAULT_UPSILON_MIN):
    """The weights need ``r = d`` and a symmetric PSD diffusion matrix ``sigma = a^{1/2}``."""
    if model.r != model.d:
        raise ValueError("BEL weights need a square diffusion matrix (r = d)")
    s = model.diffusion(t, np.asarray(x, dtype=float))
    if not np.allclose(s, np.swapaxes(s, -1, -2), atol=1e-12):
        raise ValueError("BEL weights need a symmetric diffusion matrix sigma = a^{1/2}")
    inv_sqrt_diffusion(model, t, x, False, upsilon_min)


def _bel_batch(model, grid, x, weight, hessian=False, split=None, upsilon_min=DEFAULT_UPSILON_MIN):
    """Simulate paths and accumulate BEL weights.

    Args:
        split: optional node index ``ku`` for the split Hessian formula.

    Returns:
        dict with ``X``, ``J``, ``tau`` and, if requested, ``tau2``; with a
        split also ``J_su``, ``tau_su``, ``tau2_su``, ``tau_ut``.
    """
    d = model.d
    s, t = grid.t0, grid.t1
    h = grid.h
    X = np.broadcast_to(np.asarray(x, dtype=float), grid.batch_shape + (d,)).copy()
    batch = X.shape[:-1]
    J = np.broadcast_to(np.eye(d), batch + (d, d)).copy()
    Hs = np.zeros(batch + (d, d, d)) if hessian else None
    tau = np.zeros(batch + (d,))
    tau2 = np.zeros(batch + (d, d)) if hessian else None
    out = {}
    ku = split
    if ku is not None:
        tu = grid.time(ku)
        J2 = None
        tau_ut = np.zeros(batch + (d,))
    const = model.constant_diffusion
    inv_c = grad_c = None
    if const:
        inv_c, grad_c = inv_sqrt_diffusion(model, s, X, hessian, upsilon_min)
    for k in range(grid.steps):
        u = grid.time(k)
        dw = grid.increments[..., k, :]
        if const:
            inv, ginv = inv_c, grad_c
        else:
            inv, ginv = inv_sqrt_diffusion(model, u, X, hessian, upsilon_min)
        z = matvec(inv, dw)  # a^{-1/2} dW
        if ku is None:
            w = weight.domega(u, s, t)
        elif k < ku:
            w = weight.domega(u, s, tu)
        else:
            w = weight.domega(u, tu, t)
        if ku is not None and k == ku:
            out["J_su"], out["tau_su"], out["tau2_su"] = J.copy(), tau, tau2
            tau = np.zeros(batch + (d,))
            J2 = np.broadcast_to(np.eye(d), batch + (d, d)).copy()
        if ku is not None and k >= ku:
            tau_ut = tau_ut + w * matvec(J2, z)
        else:
            tau = tau + w * matvec(J, z)
            if hessian:
                # H a^{-1/2} dW : sum_k H[i,j,k] z[k]
                incr = np.einsum("...ijk,...k->...ij", Hs, z)
                if not const:
                    # (J x J) grad a^{-1/2} dW : sum_{p,k,l} J[i,p] J[j,k] ginv[p,k,l] dW[l]
                    gz = np.einsum("...pkl,...l->...pk", ginv, dw)
                    incr = incr + np.einsum("...ip,...jk,...pk->...ij", J, J, gz)
                tau2 = tau2 + w * incr
        need_J2 = ku is not None and k >= ku
        Xn, Jn, Hn = euler_step(model, u, X, dw, h, J, Hs)
        if need_J2:
            _, J2, _ = euler_step(model, u, X, dw, h, J2, None)
        X, J, Hs = Xn, Jn, Hn
    out.update(X=X, J=J, tau=tau, tau2=tau2)
    if ku is not None:
        out["tau_ut"] = tau_ut
    return out


@dataclass
class VectorEstimate:
    """Monte Carlo mean of a vector or matrix quantity with per-entry standard errors."""

    value: np.ndarray
    stderr: np.ndarray
    samples: int
    seed: int | None = None
    extras: dict = field(default_factory=dict)

    @property
    def halfwidth(self):
        return Z95 * self.stderr

    def to_dict(self) -> dict:
        return {"value": np.asarray(self.value).tolist(), "stderr": np.asarray(self.stderr).tolist(),
                "halfwidth": np.asarray(self.halfwidth).tolist(), "samples": self.samples,
                "seed": self.seed, **self.extras}


def _mean_se(samples, seed, **extras) -> VectorEstimate:
    samples = np.asarray(samples, dtype=float)
    M = samples.shape[0]
    return VectorEstimate(samples.mean(axis=0), samples.std(axis=0, ddof=1) / np.sqrt(M), M, seed, extras)


def bel_gradient(model: ModelSpec, f: Observable, s, t, x, phi_spec=None, M: int = 4096,
                 seed=0, h: float = 1e-3, upsilon_min=DEFAULT_UPSILON_MIN, threads=None,
                 return_samples=False):
    """BEL estimate of ``grad P_{s,t}(f)(x)``: mean of ``f(X_{s,t}(x)) tau``."""
    weight = _weight(phi_spec)
    check_bel_model(model, s, x, upsilon_min)
    steps = max(1, int(round((t - s) / h)))

    def work(a, b):
        grid = sample_brownian(seed, np.arange(a, b), s, t, steps, model.r)
        o = _bel_batch(model, grid, x, weight, False, None, upsilon_min)
        return f.value(o["X"])[:, None] * o["tau"]

    samples = np.concatenate(chunked_map(work, M, 512, threads))
    est = _mean_se(samples, seed, weight=weight.kind)
    return (est, samples) if return_samples else est


def bel_hessian(model: ModelSpec, f: Observable, s, t, x, phi_spec=None, M: int = 4096,
                seed=0, h: float = 1e-3, split=None, upsilon_min=DEFAULT_UPSILON_MIN, threads=None,
                return_samples=False):
    """BEL estimate of ``grad^2 P_{s,t}(f)(x)`` (a ``d x d`` matrix).

    Without ``split`` this averages ``f(X) tau2 + (J grad f(X)) tau'``; with
    a split time ``u`` in ``(s, t)`` it averages
    ``f(X) [tau2_{s,u} + (J_{s,u} tau_{u,t}) tau_{s,u}']``, which needs no
    gradient of ``f``.
    """
    weight = _weight(phi_spec)
    check_bel_model(model, s, x, upsilon_min)
    steps = max(1, int(round((t - s) / h)))
    ku = None
    if split is not None:
        if not s < split < t:
            raise ValueError("split time must lie strictly inside (s, t)")
        ku = int(round((split - s) / ((t - s) / steps)))
        ku = min(max(ku, 1), steps - 1)

    def work(a, b):
        grid = sample_brownian(seed, np.arange(a, b), s, t, steps, model.r)
        o = _bel_batch(model, grid, x, weight, True, ku, upsilon_min)
        fx = f.value(o["X"])[:, None, None]
        if ku is None:
            Jg = matvec(o["J"], f.grad(o["X"]))
            return fx * o["tau2"] + Jg[:, :, None] * o["tau"][:, None, :]
        v = matvec(o["J_su"], o["tau_ut"])
        return fx * (o["tau2_su"] + v[:, :, None] * o["tau_su"][:, None, :])

    samples = np.concatenate(chunked_map(work, M, 512, threads))
    est = _mean_se(samples, seed, weight=weight.kind, split=split)
    return (est, samples) if return_samples else est


# ---------------------------------------------------------------------------
# nested semigroup estimators


def _nested_integrand(pair, f, u, Y, horizons, weight, M_in, seed, outer_ids, node, h, upsilon_min):
    """Inner BEL estimates of ``<grad P f, db> + 1/2 Tr(grad^2 P f da)`` at states ``Y``.

    Args:
        u: time at which the coefficient differences are evaluated.
        Y: outer states ``(M_out, d)``.
        horizons: time to the end of the interval for this node.

    Returns:
        ``(M_out,)`` inner-sample means.
    """
    model = pair.base
    d, r = model.d, model.r
    steps = max(1, int(round(horizons / h)))
    inc = np.empty((len(Y), M_in, steps, r))
    hq = horizons / steps
    for j, o in enumerate(outer_ids):
        inc[j] = substream(seed, NESTED, int(o), int(node)).standard_normal((M_in, steps, r)) * np.sqrt(hq)
    from .paths import BrownianGrid  # local import keeps the public namespace small

    grid = BrownianGrid(float(u), float(u + horizons), steps, inc)
    delta = delta_eval(pair, u, Y)
    need_hess = bool(np.any(delta.da != 0))
    o = _bel_batch(model, grid, Y[:, None, :], weight, need_hess, None, upsilon_min)
    fx = f.value(o["X"])  # (M_out, M_in)
    val = fx * np.einsum("mik,mk->mi", o["tau"], delta.db)
    if need_hess:
        Jg = matvec(o["J"], f.grad(o["X"]))
        hess = fx[..., None, None] * o["tau2"] + Jg[..., :, None] * o["tau"][..., None, :]
        val = val + 0.5 * np.einsum("mikl,mlk->mi", hess, delta.da)
    return val.mean(axis=1)


@dataclass
class SemigroupDifference:
    lhs: float
    lhs_stderr: float
    rhs: float
    rhs_stderr: float
    M_lhs: int
    M_out: int
    M_in: int
    nodes: int

    @property
    def combined_stderr(self) -> float:
        return float(np.hypot(self.lhs_stderr, self.rhs_stderr))

    @property
    def z_score(self) -> float:
        se = self.combined_stderr
        return abs(self.lhs - self.rhs) / se if se > 0 else (0.0 if self.lhs == self.rhs else np.inf)

    def to_dict(self) -> dict:
        out = asdict(self)
        out.update(combined_stderr=self.combined_stderr, z_score=self.z_score)
        return out


def semigroup_difference(pair: ModelPair, f: Observable, s, t, x, M_lhs: int = 16384,
                         M_out: int = 256, M_in: int = 256, nodes: int = 16, h: float = 1 / 256,
                         seed=0, phi_spec=None, upsilon_min=DEFAULT_UPSILON_MIN, threads=None,
                         max_cost: float = 5e9) -> SemigroupDifference:
    """Both sides of the semigroup interpolation formula.

    ``lhs = E f(X_{s,t}(x)) - E f(Xbar_{s,t}(x))`` by common-noise Monte Carlo.
    ``rhs`` integrates ``E[<grad P_{u,t} f, db> + 1/2 Tr(grad^2 P_{u,t} f da)](Xbar_{s,u}(x))``
    over ``u`` with the midpoint rule on ``nodes`` panels; the inner
    gradients and Hessians are BEL estimates with ``M_in`` paths for each of
    the ``M_out`` outer paths.
    """
    weight = _weight(phi_spec)
    check_bel_model(pair.base, s, x, upsilon_min)
    L = t - s
    steps = int(round(L / h))
    if steps % (2 * nodes):
        raise ValueError("2 * nodes must divide the number of fine steps")
    cost = float(M_out) * M_in * steps * nodes / 2
    if cost > max_cost:
        raise EstimationError(f"nested budget {cost:.3g} path-steps exceeds cap {max_cost:.3g}")
    x = np.asarray(x, dtype=float)

    def lhs_work(a, b):
        grid = sample_brownian(seed, np.arange(a, b), s, t, steps, pair.r)
        return (f.value(integrate_flow(pair.base, grid, x).terminal)
                - f.value(integrate_flow(pair.perturbed, grid, x).terminal))

    diff = np.concatenate(chunked_map(lhs_work, M_lhs, 1024, threads))
    node_idx = (2 * np.arange(nodes) + 1) * (steps // (2 * nodes))
    panel = L / nodes

    def rhs_work(a, b):
        ids = np.arange(a, b)
        # outer paths use the auxiliary stream family so they are independent of the lhs paths
        inc = np.stack([substream(seed, AUX, int(i)).standard_normal((steps, pair.r)) for i in ids])
        grid = BrownianGrid(float(s), float(t), steps, inc * np.sqrt(L / steps))
        bar = integrate_flow(pair.perturbed, grid, x)
        acc = np.zeros(len(ids))
        for q, k in enumerate(node_idx):
            Y = bar.states[:, k, :]
            u = s + k * L / steps
            acc += panel * _nested_integrand(pair, f, u, Y, t - u, weight, M_in, seed, ids, q, h,
                                             upsilon_min)
        return acc

    per_outer = np.concatenate(chunked_map(rhs_work, M_out, 16, threads))
    return SemigroupDifference(
        lhs=float(diff.mean()), lhs_stderr=float(diff.std(ddof=1) / np.sqrt(diff.size)),
        rhs=float(per_outer.mean()), rhs_stderr=float(per_outer.std(ddof=1) / np.sqrt(M_out)),
        M_lhs=M_lhs, M_out=M_out, M_in=M_in, nodes=nodes)


@dataclass
class InvariantShift:
    value: float
    stderr: float
    horizon: float
    M_out: int
    M_in: int
    nodes: int

    def to_dict(self) -> dict:
        return asdict(self)


def invariant_shift(pair: ModelPair, f: Observable, T: float | None = None, M_out: int = 256,
                    M_in: int = 256, nodes: int = 16, h: float = 1 / 256, seed=0,
                    burn_in: float | None = None, lambda_A: float | None = None, phi_spec=None,
                    upsilon_min=DEFAULT_UPSILON_MIN, threads=None) -> InvariantShift:
    """Estimate ``(pi - pi_bar)(f)`` by truncating the time integral at ``T``.

    ``Ybar ~ pi_bar`` is approximated by running the perturbed model for
    ``burn_in`` time units from the origin. The integral over ``[0, T]`` uses
    Gauss-Legendre nodes; each node's integrand is a nested BEL estimate.

    Args:
        T: truncation horizon; defaults to ``5 / lambda_A``.
        lambda_A: contraction rate of the base model, required when ``T`` is
            not given and also used for the default burn-in ``10 / lambda_A``.
    """
    from .regularity import estimate_lambda_A

    if lambda_A is None:
        lambda_A = estimate_lambda_A(pair.base)["lambda_A"]
        lam_bar = estimate_lambda_A(pair.perturbed)["lambda_A"]
        if lambda_A <= 0 or lam_bar <= 0:
            raise EstimationError("ergodicity check failed: lambda_A <= 0")
    else:
        lam_bar = lambda_A
    T = 5.0 / lambda_A if T is None else float(T)
    burn_in = 10.0 / min(lambda_A, lam_bar) if burn_in is None else float(burn_in)
    weight = _weight(phi_spec)
    d = pair.d
    check_bel_model(pair.base, 0.0, np.zeros(d), upsilon_min)
    v_nodes, v_w = np.polynomial.legendre.leggauss(nodes)
    v_nodes = 0.5 * T * (v_nodes + 1.0)
    v_w = 0.5 * T * v_w
    burn_steps = max(1, int(round(burn_in / h)))

    def work(a, b):
        ids = np.arange(a, b)
        inc = np.stack([substream(seed, AUX, int(i)).standard_normal((burn_steps, pair.r)) for i in ids])
        grid = BrownianGrid(0.0, burn_in, burn_steps, inc * np.sqrt(burn_in / burn_steps))
        Y = integrate_flow(pair.perturbed, grid, np.zeros(d)).terminal
        acc = np.zeros(len(ids))
        for q, (v, w) in enumerate(zip(v_nodes, v_w)):
            acc += w * _nested_integrand(pair, f, 0.0, Y, v, weight, M_in, seed, ids, q, h, upsilon_min)
        return acc

    per_outer = np.concatenate(chunked_map(work, M_out, 16, threads))
    return InvariantShift(float(per_outer.mean()), float(per_outer.std(ddof=1) / np.sqrt(M_out)),
                          T, M_out, M_in, nodes)


def dumps(obj) -> str:
    return json.dumps(obj.to_dict(), default=lambda v: np.asarray(v).tolist())
