"""Forward-backward decomposition of the difference of two flows.

For a pair ``(b, sigma)`` / ``(b_bar, sigma_bar)`` driven by common noise,

    X_{s,t}(x) - Xbar_{s,t}(x) = T + S

where ``T`` integrates tangent/Hessian-weighted drift and diffusion-matrix
differences along ``Xbar`` and ``S`` is a two-sided (anticipating) stochastic
integral. On an estimator mesh of width ``H`` (a multiple of the integration
step ``h``) with nodes ``u``:

    T_hat = sum_u [J_{u,t}(Ybar_u)' db(Ybar_u) + 1/2 H_{u,t}(Ybar_u)' da(Ybar_u)] H
    S_hat = sum_u J_{u+H,t}(Ybar_u)' dsigma(Ybar_u) (W_{u+H} - W_u)

with ``Ybar_u = Xbar_{s,u}(x)`` and all restarted flows integrated on the
shared fine grid.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .model import ModelPair, delta_eval
from .paths import (BrownianGrid, hess_tvec, integrate_flow, integrate_tangent, matvec,
                    restart_flow, restart_terminal, sample_brownian, refine, tvec)
from .rng import chunked_map


def _mesh_ratio(grid: BrownianGrid, H: float) -> int:
    ratio = H / grid.h
    q = int(round(ratio))
    if q < 1 or abs(ratio - q) > 1e-9 * max(ratio, 1.0) or grid.steps % q:
        raise ValueError(f"estimator mesh H={H} must be an integer multiple of h={grid.h} "
                         f"dividing the horizon")
    return q


@dataclass
class DecompositionReport:
    """Per-path decomposition; arrays carry the batch axes of the grid."""

    lhs: np.ndarray
    T_hat: np.ndarray
    S_hat: np.ndarray
    residual: np.ndarray
    estimator_steps: int
    fine_steps: int
    H: float
    h: float
    diverged: np.ndarray
    T_nodes: np.ndarray | None = None
    S_nodes: np.ndarray | None = None

    @property
    def residual_norm(self) -> np.ndarray:
        return np.linalg.norm(self.residual, axis=-1)

    def summary(self) -> dict:
        r = self.residual_norm.reshape(-1)
        M = r.size
        return {
            "paths": M,
            "H": self.H,
            "h": self.h,
            "estimator_steps": self.estimator_steps,
            "fine_steps": self.fine_steps,
            "mean_residual_norm": float(r.mean()),
            "residual_norm_stderr": float(r.std(ddof=1) / np.sqrt(M)) if M > 1 else 0.0,
            "mean_lhs_norm": float(np.linalg.norm(self.lhs, axis=-1).mean()),
            "mean_S_hat": np.mean(self.S_hat.reshape(-1, self.S_hat.shape[-1]), axis=0).tolist(),
            "diverged": int(np.sum(self.diverged)),
        }

    def to_json(self, per_path: bool = False) -> str:
        out = self.summary()
        if per_path:
            for name in ("lhs", "T_hat", "S_hat", "residual"):
                out[name] = np.asarray(getattr(self, name)).tolist()
        return json.dumps(out)

    @staticmethod
    def concatenate(reports):
        r0 = reports[0]
        cat = lambda name: np.concatenate([getattr(r, name) for r in reports])  # noqa: E731
        nodes = r0.T_nodes is not None
        return DecompositionReport(
            cat("lhs"), cat("T_hat"), cat("S_hat"), cat("residual"), r0.estimator_steps,
            r0.fine_steps, r0.H, r0.h, cat("diverged"),
            cat("T_nodes") if nodes else None, cat("S_nodes") if nodes else None)


def _perturbed_nodes(pair, grid, x, q):
    bar = integrate_flow(pair.perturbed, grid, x)
    K = grid.steps // q
    idx = np.arange(K) * q
    return bar, idx, bar.states[..., idx, :]


def _t_nodes(pair, grid, idx, Y, q):
    """Per-node contributions to ``T_hat`` (without the factor ``H``)."""
    times = grid.t0 + idx * grid.h
    db = np.empty_like(Y)
    da = np.empty(Y.shape + (Y.shape[-1],))
    for j, u in enumerate(times):
        dj = delta_eval(pair, u, Y[..., j, :])
        db[..., j, :] = dj.db
        da[..., j, :, :] = dj.da
    need_hess = bool(np.any(da != 0))
    if not need_hess and not np.any(db != 0):
        return np.zeros_like(Y), np.zeros(Y.shape[:-1], dtype=bool)
    _, J, Hs, div = restart_terminal(pair.base, grid, idx, Y, True, need_hess)
    out = tvec(J, db)
    if need_hess:
        out = out + 0.5 * hess_tvec(Hs, da)
    return out, div


def _s_nodes(pair, grid, idx, Y, q):
    """Per-node contributions to ``S_hat``."""
    dsig = np.empty(Y.shape + (grid.r,))
    for j, u in enumerate(grid.t0 + idx * grid.h):
        dsig[..., j, :, :] = delta_eval(pair, u, Y[..., j, :]).dsigma
    if not np.any(dsig != 0):
        return np.zeros_like(Y), np.zeros(Y.shape[:-1], dtype=bool)
    K = idx.size
    dW = grid.increments.reshape(grid.batch_shape + (K, q, grid.r)).sum(-2)
    _, J, _, div = restart_terminal(pair.base, grid, idx + q, Y, True, False)
    return tvec(J, matvec(dsig, dW)), div


def t_term(pair: ModelPair, grid: BrownianGrid, x, estimator_mesh: float) -> np.ndarray:
    """Left-endpoint quadrature ``T_hat``; shape ``(..., d)``."""
    q = _mesh_ratio(grid, estimator_mesh)
    _, idx, Y = _perturbed_nodes(pair, grid, x, q)
    nodes, _ = _t_nodes(pair, grid, idx, Y, q)
    return nodes.sum(axis=-2) * (q * grid.h)


def s_term(pair: ModelPair, grid: BrownianGrid, x, estimator_mesh: float) -> np.ndarray:
    """Two-sided sum ``S_hat`` with tangents restarted at ``u + H``; shape ``(..., d)``."""
    q = _mesh_ratio(grid, estimator_mesh)
    _, idx, Y = _perturbed_nodes(pair, grid, x, q)
    nodes, _ = _s_nodes(pair, grid, idx, Y, q)
    return nodes.sum(axis=-2)


def telescoping_decomposition(pair: ModelPair, grid: BrownianGrid, x, estimator_mesh: float,
                              keep_nodes: bool = False) -> DecompositionReport:
    """Assemble ``lhs = X - Xbar``, ``T_hat``, ``S_hat`` and the residual on one grid."""
    q = _mesh_ratio(grid, estimator_mesh)
    base = integrate_flow(pair.base, grid, x)
    bar, idx, Y = _perturbed_nodes(pair, grid, x, q)
    tn, tdiv = _t_nodes(pair, grid, idx, Y, q)
    sn, sdiv = _s_nodes(pair, grid, idx, Y, q)
    H = q * grid.h
    T_hat = tn.sum(axis=-2) * H
    S_hat = sn.sum(axis=-2)
    lhs = base.terminal - bar.terminal
    diverged = base.diverged | bar.diverged | tdiv.any(axis=-1) | sdiv.any(axis=-1)
    return DecompositionReport(
        lhs=lhs, T_hat=T_hat, S_hat=S_hat, residual=lhs - T_hat - S_hat,
        estimator_steps=idx.size, fine_steps=grid.steps, H=H, h=grid.h, diverged=diverged,
        T_nodes=tn * H if keep_nodes else None, S_nodes=sn if keep_nodes else None)


def simulate_decomposition(pair: ModelPair, x, s, t, h, H, M, seed, threads=None,
                           chunk: int = 128) -> DecompositionReport:
    """Decompositions on ``M`` independent paths (path indices ``0..M-1``)."""
    steps = int(round((t - s) / h))

    def work(a, b):
        grid = sample_brownian(seed, np.arange(a, b), s, t, steps, pair.r)
        return telescoping_decomposition(pair, grid, x, H)

    return DecompositionReport.concatenate(chunked_map(work, M, chunk, threads))


def convergence_study(pair: ModelPair, x, s, t, H_list, M, seed, fine_factor: int = 8,
                      threads=None, chunk: int = 128) -> list[dict]:
    """Residual statistics as the estimator mesh halves, on nested meshes.

    The coarsest fine grid is sampled directly; each finer level is a
    Brownian-bridge refinement of the previous one, so all levels share one
    Brownian path.

    Returns:
        CSV-ready rows ``{H, h, mean_residual_norm, stderr, mean_S, ...}`` in the
        order of ``H_list`` (which must be decreasing powers-of-two ratios).
    """
    H_list = [float(H) for H in H_list]
    Hs = sorted(H_list, reverse=True)
    levels = []
    for H in Hs:
        ratio = Hs[0] / H
        lv = int(round(np.log2(ratio)))
        if abs(2.0 ** lv - ratio) > 1e-9 * ratio:
            raise ValueError("estimator meshes must differ by powers of two")
        levels.append(lv)
    h0 = Hs[0] / fine_factor
    steps0 = int(round((t - s) / h0))
    if abs(steps0 * h0 - (t - s)) > 1e-9:
        raise ValueError("coarsest fine mesh must divide the horizon")

    def work(a, b):
        grid = sample_brownian(seed, np.arange(a, b), s, t, steps0, pair.r)
        out = {}
        current = 0
        for H, lv in zip(Hs, levels):
            while current < lv:
                grid = refine(grid, 2)
                current += 1
            rep = telescoping_decomposition(pair, grid, x, H)
            out[H] = (rep.residual_norm, rep.S_hat, rep.T_hat, np.linalg.norm(rep.lhs, axis=-1), rep.diverged)
        return out

    parts = chunked_map(work, M, chunk, threads)
    rows = []
    for H in H_list:
        res = np.concatenate([p[H][0] for p in parts])
        S = np.concatenate([p[H][1] for p in parts])
        lhs = np.concatenate([p[H][3] for p in parts])
        div = np.concatenate([p[H][4] for p in parts])
        rows.append({
            "H": H,
            "h": H / fine_factor,
            "mean_residual_norm": float(res.mean()),
            "stderr": float(res.std(ddof=1) / np.sqrt(res.size)),
            "rms_residual": float(np.sqrt(np.mean(res ** 2))),
            "mean_S": float(S[..., 0].mean()),
            "S_stderr": float(S[..., 0].std(ddof=1) / np.sqrt(res.size)),
            "mean_lhs_norm": float(lhs.mean()),
            "max_abs_S": float(np.abs(S).max()),
            "diverged": int(div.sum()),
        })
    return rows


def fit_loglog_slope(xs, ys) -> tuple[float, float]:
    """Least-squares slope of ``log y`` against ``log x`` and its standard error."""
    lx = np.log(np.asarray(xs, dtype=float))
    ly = np.log(np.asarray(ys, dtype=float))
    A = np.vstack([lx, np.ones_like(lx)]).T
    coef, res, *_ = np.linalg.lstsq(A, ly, rcond=None)
    n = lx.size
    if n > 2:
        resid = ly - A @ coef
        s2 = resid @ resid / (n - 2)
        se = float(np.sqrt(s2 / np.sum((lx - lx.mean()) ** 2)))
    else:
        se = float("nan")
    return float(coef[0]), se


# ---------------------------------------------------------------------------
# Skorohod variance (one dimension)


@dataclass
class VarianceReport:
    diagonal_term: float
    cross_term: float
    total: float
    empirical_variance: float
    mc_stderr: float
    diagonal_stderr: float = 0.0
    cross_stderr: float = 0.0
    empirical_stderr: float = 0.0
    empirical_mean: float = 0.0
    mean_stderr: float = 0.0
    cross_mode: str = "computed"
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def _trapezoid_weights(n_nodes, length):
    w = np.full(n_nodes, length / (n_nodes - 1))
    w[0] *= 0.5
    w[-1] *= 0.5
    return w


def _is_linear_constant_sigma(model, pts) -> bool:
    return bool(np.all(model.diffusion_grad(0.0, pts) == 0) and np.all(model.drift_hess(0.0, pts) == 0))


def _variance_batch(pair, grid, x, q, diag_nodes, cross_nodes, cross_mode):
    """Per-path integrands of the variance decomposition on one batch of grids."""
    base, bar_model = pair.base, pair.perturbed
    n = grid.steps
    t0 = grid.t0
    h = grid.h

    # empirical side: the discrete two-sided sum
    S_hat = s_term(pair, grid, x, q * h)[..., 0]

    bar, barJ = integrate_tangent(bar_model, grid, x)
    Ybar = bar.states[..., 0]  # (M, n+1)
    Jbar = barJ.matrices[..., 0, 0]

    def coeffs(model, u, y):
        s = model.diffusion(u, y[..., None])[..., 0, 0]
        ds = model.diffusion_grad(u, y[..., None])[..., 0, 0, 0]
        return s, ds

    def vsig(u, y):
        s, ds = coeffs(base, u, y)
        sb, dsb = coeffs(bar_model, u, y)
        return s - sb, ds - dsb

    # diagonal: Phi_u = dX_{u,t}(Y_u) * varsigma(Y_u)
    didx = np.rint(np.linspace(0, n, diag_nodes)).astype(int)
    Yd = Ybar[..., didx]
    _, Jd, _, _ = restart_terminal(base, grid, didx, Yd[..., None], True, False)
    phi = np.stack([vsig(t0 + k * h, Yd[..., j])[0] for j, k in enumerate(didx)], axis=-1)
    phi = Jd[..., 0, 0] * phi
    diag_path = (phi ** 2) @ _trapezoid_weights(diag_nodes, grid.t1 - grid.t0)

    M = Ybar.shape[0]
    if cross_mode == "zero":
        cross_path = np.zeros(M)
    else:
        cidx = np.rint(np.linspace(0, n, cross_nodes)).astype(int)
        cw = _trapezoid_weights(cross_nodes, grid.t1 - grid.t0)
        Yc = Ybar[..., cidx]
        # restarts of the base flow at every node b from Y_b, to the end: dX^b(Y_b), d2X^b(Y_b)
        _, Jb, Hb, _ = restart_terminal(base, grid, cidx, Yc[..., None], True, True)
        Jb = Jb[..., 0, 0]
        Hb = Hb[..., 0, 0, 0]
        F = np.zeros((M, cross_nodes, cross_nodes))
        for ia, ka in enumerate(cidx):
            ua = t0 + ka * h
            Ya = Yc[..., ia]
            sig_bar_a = bar_model.diffusion(ua, Ya[..., None])[..., 0, 0]
            vs_a, _ = vsig(ua, Ya)
            # Z_{a,b} = X_{a,b}(Y_a) and dX_{a,b}(Y_a) for every later node b
            fl, tg, _ = restart_flow(base, grid, ka, Ya[..., None], want_tangent=True)
            for ib in range(ia, cross_nodes):
                kb = cidx[ib]
                ub = t0 + kb * h
                Yb = Yc[..., ib]
                vs_b, dvs_b = vsig(ub, Yb)
                # D_a Phi_b
                dY = Jbar[..., kb] / Jbar[..., ka] * sig_bar_a
                DaPhib = dY * (Hb[..., ib] * vs_b + Jb[..., ib] * dvs_b)
                # D_b Phi_a
                Z = fl.states[..., kb - ka, 0]
                dXab = tg.matrices[..., kb - ka, 0, 0]
                _, JZ, HZ, _ = restart_terminal(base, grid, [kb], Z[..., None, None], True, True)
                JZ = JZ[..., 0, 0, 0]
                HZ = HZ[..., 0, 0, 0, 0]
                sZ, dsZ = coeffs(base, ub, Z)
                DbPhia = dXab * vs_a * (HZ * sZ + JZ * dsZ)
                F[:, ia, ib] = F[:, ib, ia] = DaPhib * DbPhia
        cross_path = np.einsum("mab,a,b->m", F, cw, cw)
    return S_hat, diag_path, cross_path


def skorohod_variance_1d(pair: ModelPair, mc_spec: dict, s: float, t: float, x) -> VarianceReport:
    """Diagonal and cross terms of the two-sided integral's second moment, and the
    empirical second moment of ``S_hat``.

    Args:
        pair: one-dimensional model pair (``d = r = 1``).
        mc_spec: ``M``, ``seed`` and optionally ``h`` (fine step, default
            ``1/256``), ``H`` (estimator mesh, default ``h``), ``diag_nodes``
            (default 65), ``cross_nodes`` (default 16), ``cross`` (``"auto"``,
            ``"compute"`` or ``"zero"``), ``threads``, ``chunk``.
        s, t: time interval.
        x: start state.

    Returns:
        A :class:`VarianceReport`. With ``cross="auto"`` the cross term is set
        to exactly zero when the base model has constant diffusion and zero
        drift Hessian on a probe set; otherwise it is estimated.
    """
    if pair.d != 1 or pair.r != 1:
        raise ValueError("skorohod_variance_1d needs d = r = 1")
    M = int(mc_spec["M"])
    seed = mc_spec["seed"]
    h = float(mc_spec.get("h", 1.0 / 256))
    H = float(mc_spec.get("H", h))
    steps = int(round((t - s) / h))
    grid_probe = sample_brownian(seed, 0, s, t, steps, 1)
    q = _mesh_ratio(grid_probe, H)
    mode = mc_spec.get("cross", "auto")
    if mode == "auto":
        probe = np.linspace(-10, 10, 201)[:, None]
        mode = "zero" if _is_linear_constant_sigma(pair.base, probe) else "compute"
    diag_nodes = int(mc_spec.get("diag_nodes", 65))
    cross_nodes = int(mc_spec.get("cross_nodes", 16))
    x = np.atleast_1d(np.asarray(x, dtype=float))

    def work(a, b):
        grid = sample_brownian(seed, np.arange(a, b), s, t, steps, 1)
        return _variance_batch(pair, grid, x, q, diag_nodes, cross_nodes, mode)

    parts = chunked_map(work, M, int(mc_spec.get("chunk", 256)), mc_spec.get("threads"))
    S = np.concatenate([p[0] for p in parts])
    dg = np.concatenate([p[1] for p in parts])
    cr = np.concatenate([p[2] for p in parts])
    se = lambda v: float(v.std(ddof=1) / np.sqrt(v.size))  # noqa: E731
    emp = S ** 2
    diff = emp - dg - cr
    return VarianceReport(
        diagonal_term=float(dg.mean()),
        cross_term=float(cr.mean()),
        total=float(dg.mean() + cr.mean()),
        empirical_variance=float(emp.mean()),
        mc_stderr=se(diff),
        diagonal_stderr=se(dg),
        cross_stderr=se(cr),
        empirical_stderr=se(emp),
        empirical_mean=float(S.mean()),
        mean_stderr=se(S),
        cross_mode=mode,
        extras={"M": M, "h": h, "H": H, "diag_nodes": diag_nodes, "cross_nodes": cross_nodes},
    )
