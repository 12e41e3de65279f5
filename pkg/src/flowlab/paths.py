"""Brownian grids and Euler-Maruyama integration of flows, tangents and Hessians.

All integrators accept a batch of paths: ``grid.increments`` has shape
``(..., n, r)`` and the returned trajectories carry the same leading axes.
Contractions over the (small) state dimension are written as explicit
accumulation loops so results are bit-identical regardless of batch shape.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from .model import ModelSpec
from .rng import BRIDGE, PATH, substream

DEFAULT_CAP = 1e8


class DivergenceError(RuntimeError):
    """Raised when every path of a batch has exploded."""

    def __init__(self, count):
        self.count = count
        super().__init__(f"all {count} paths diverged")


@dataclass(frozen=True)
class BrownianGrid:
    t0: float
    t1: float
    steps: int
    increments: np.ndarray  # (..., steps, r)
    seed: int | None = None
    stream_id: object = None  # path index or array of indices
    level: int = 0

    @property
    def h(self) -> float:
        return (self.t1 - self.t0) / self.steps

    @property
    def r(self) -> int:
        return self.increments.shape[-1]

    @property
    def batch_shape(self) -> tuple:
        return self.increments.shape[:-2]

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.h * np.arange(self.steps + 1)

    def time(self, k: int) -> float:
        return self.t0 + k * self.h

    def coarsen(self, factor: int) -> "BrownianGrid":
        """Sum consecutive blocks of ``factor`` increments."""
        if self.steps % factor:
            raise ValueError(f"factor {factor} does not divide {self.steps} steps")
        inc = self.increments.reshape(self.batch_shape + (self.steps // factor, factor, self.r)).sum(-2)
        return replace(self, steps=self.steps // factor, increments=inc, level=self.level - 1)

    def take(self, index) -> "BrownianGrid":
        """Sub-batch of paths selected by ``index`` along the leading axis."""
        ids = None if self.stream_id is None else np.asarray(self.stream_id)[index]
        return replace(self, increments=self.increments[index], stream_id=ids)


def _path_ids(path_index):
    ids = np.asarray(path_index)
    if ids.ndim > 1:
        raise ValueError("path_index must be an integer or a 1-D sequence")
    return ids


def sample_brownian(master_seed, path_index, t0, t1, steps, r=1) -> BrownianGrid:
    """Brownian increments for one path or a batch of paths.

    Args:
        master_seed: 64-bit master seed.
        path_index: integer, or a sequence of integers for a batch.
        t0, t1: time interval.
        steps: number of steps ``n``.
        r: noise dimension.

    Returns:
        A grid with increments of shape ``(n, r)`` or ``(M, n, r)``.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if not t1 > t0:
        raise ValueError("need t1 > t0")
    h = (t1 - t0) / steps
    ids = _path_ids(path_index)
    scale = np.sqrt(h)
    if ids.ndim == 0:
        inc = substream(master_seed, PATH, int(ids)).standard_normal((steps, r)) * scale
    else:
        inc = np.empty((len(ids), steps, r))
        for j, p in enumerate(ids):
            inc[j] = substream(master_seed, PATH, int(p)).standard_normal((steps, r)) * scale
    return BrownianGrid(float(t0), float(t1), int(steps), inc, master_seed,
                        int(ids) if ids.ndim == 0 else ids)


def refine(grid: BrownianGrid, factor: int = 2) -> BrownianGrid:
    """Brownian-bridge refinement: split each increment into ``factor`` pieces.

    Sub-increments are ``Z_j - mean(Z) + dW / factor`` with ``Z_j`` iid
    ``N(0, h / factor)``, which is exactly the conditional law given the sum.
    """
    if factor < 2:
        raise ValueError("factor must be >= 2")
    if grid.seed is None or grid.stream_id is None:
        raise ValueError("refine needs a grid created by sample_brownian")
    level = grid.level + 1
    sub_h = grid.h / factor
    ids = _path_ids(grid.stream_id)
    shape = (grid.steps, factor, grid.r)

    def one(p, dw):
        z = substream(grid.seed, BRIDGE, int(p), level).standard_normal(shape) * np.sqrt(sub_h)
        return z - z.mean(axis=1, keepdims=True) + dw[:, None, :] / factor

    if ids.ndim == 0:
        inc = one(ids, grid.increments).reshape(grid.steps * factor, grid.r)
    else:
        inc = np.stack([one(p, grid.increments[j]) for j, p in enumerate(ids)])
        inc = inc.reshape(len(ids), grid.steps * factor, grid.r)
    return replace(grid, steps=grid.steps * factor, increments=inc, level=level)


# ---------------------------------------------------------------------------
# deterministic small contractions


def matvec(A, v):
    """``out[..., j] = sum_k A[..., j, k] v[..., k]``."""
    out = A[..., 0] * v[..., 0:1]
    for k in range(1, A.shape[-1]):
        out = out + A[..., k] * v[..., k:k + 1]
    return out


def tvec(J, v):
    """``J' v``: ``out[..., k] = sum_i J[..., i, k] v[..., i]``."""
    out = J[..., 0, :] * v[..., 0:1]
    for i in range(1, J.shape[-2]):
        out = out + J[..., i, :] * v[..., i:i + 1]
    return out


def matmul(A, B):
    out = A[..., :, 0:1] * B[..., 0:1, :]
    for l in range(1, A.shape[-1]):
        out = out + A[..., :, l:l + 1] * B[..., l:l + 1, :]
    return out


def tensor_times_matrix(H, G):
    """``out[..., i, j, m] = sum_k H[..., i, j, k] G[..., k, m]``."""
    out = H[..., 0:1] * G[..., None, None, 0, :]
    for k in range(1, H.shape[-1]):
        out = out + H[..., k:k + 1] * G[..., None, None, k, :]
    return out


def jj_contract(J, Q):
    """``out[..., i, j, m] = sum_{k,l} J[..., i, k] J[..., j, l] Q[..., k, l, m]``."""
    d = J.shape[-1]
    out = 0.0
    for k in range(d):
        for l in range(d):
            w = J[..., :, k, None] * J[..., None, :, l]  # (..., i, j)
            out = out + w[..., None] * Q[..., None, None, k, l, :]
    return out


def hess_tvec(H, a):
    """``out[..., k] = sum_{i,j} H[..., i, j, k] a[..., i, j]``."""
    d = H.shape[-2]
    out = 0.0
    for i in range(d):
        for j in range(d):
            out = out + H[..., i, j, :] * a[..., i, j, None]
    return out


def _weighted_columns(T, dw):
    """``sum_k T[..., k, rest] dw[..., k]`` where ``dw`` has shape ``batch + (r,)``."""
    nb = dw.ndim - 1
    pad = (None,) * (T.ndim - nb - 1)
    out = 0.0
    for k in range(dw.shape[-1]):
        out = out + T[(slice(None),) * nb + (k,)] * dw[(Ellipsis, k) + pad]
    return out


# ---------------------------------------------------------------------------
# Euler steps


def euler_step(model: ModelSpec, t, x, dw, h, J=None, H=None):
    """One joint Euler step of state, tangent and Hessian.

    Returns:
        ``(x_next, J_next, H_next)``; missing inputs give ``None`` outputs.
    """
    b = model.drift(t, x)
    s = model.diffusion(t, x)
    x_next = x + b * h + matvec(s, dw)
    J_next = H_next = None
    if J is not None:
        G = model.drift_grad(t, x) * h
        if not model.constant_diffusion:
            G = G + _weighted_columns(model.diffusion_grad(t, x), dw)
        if H is not None:
            Q = model.drift_hess(t, x) * h
            if not model.constant_diffusion:
                Q = Q + _weighted_columns(model.diffusion_hess(t, x), dw)
            H_next = H + jj_contract(J, Q) + tensor_times_matrix(H, G)
        J_next = J + matmul(J, G)
    return x_next, J_next, H_next


@dataclass
class FlowPath:
    grid: BrownianGrid
    states: np.ndarray  # (..., n+1, d)
    x0: np.ndarray
    diverged: np.ndarray  # (...) bool
    start_index: int = 0

    @property
    def terminal(self):
        return self.states[..., -1, :]

    @property
    def times(self):
        return self.grid.times[self.start_index:]


@dataclass
class TangentPath:
    matrices: np.ndarray  # (..., n+1, d, d)


@dataclass
class HessianPath:
    tensors: np.ndarray  # (..., n+1, d, d, d)


def _initial(model, grid, x):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != model.d:
        raise ValueError(f"state dimension {x.shape[-1]} != model dimension {model.d}")
    if grid.r != model.r:
        raise ValueError(f"grid noise dimension {grid.r} != model noise dimension {model.r}")
    return np.broadcast_to(x, grid.batch_shape + (model.d,)).astype(float).copy()


def _integrate(model, grid, x, from_index, tangent, hessian, cap, store=True):
    n = grid.steps
    if not 0 <= from_index <= n:
        raise IndexError(f"from_index {from_index} outside [0, {n}]")
    d = model.d
    X = _initial(model, grid, x)
    batch = X.shape[:-1]
    J = np.broadcast_to(np.eye(d), batch + (d, d)).copy() if tangent or hessian else None
    H = np.zeros(batch + (d, d, d)) if hessian else None
    diverged = np.zeros(batch, dtype=bool)
    m = n - from_index + 1
    xs = np.empty(batch + (m, d)) if store else None
    Js = np.empty(batch + (m, d, d)) if store and J is not None else None
    Hs = np.empty(batch + (m, d, d, d)) if store and H is not None else None

    def put(j):
        if xs is not None:
            xs[..., j, :] = X
        if Js is not None:
            Js[..., j, :, :] = J
        if Hs is not None:
            Hs[..., j, :, :, :] = H

    put(0)
    h = grid.h
    for j, k in enumerate(range(from_index, n), start=1):
        dw = grid.increments[..., k, :]
        Xn, Jn, Hn = euler_step(model, grid.time(k), X, dw, h, J, H)
        diverged |= ~np.all(np.isfinite(Xn), axis=-1) | (np.linalg.norm(Xn, axis=-1) > cap)
        if diverged.any():
            keep = diverged[..., None]
            Xn = np.where(keep, X, Xn)
            if Jn is not None:
                Jn = np.where(keep[..., None], J, Jn)
            if Hn is not None:
                Hn = np.where(keep[..., None, None], H, Hn)
        X, J, H = Xn, Jn, Hn
        put(j)
    if not store:
        return X, J, H, diverged
    return xs, Js, Hs, diverged


def integrate_flow(model: ModelSpec, grid: BrownianGrid, x, cap: float = DEFAULT_CAP) -> FlowPath:
    """Euler-Maruyama flow ``X_{k+1} = X_k + b h + sigma dW`` on ``grid``."""
    xs, _, _, div = _integrate(model, grid, x, 0, False, False, cap)
    return FlowPath(grid, xs, np.asarray(x, dtype=float), div)


def integrate_tangent(model, grid, x, cap: float = DEFAULT_CAP):
    """Flow and tangent ``J_{k+1} = J_k + J_k (grad b h + sum_k grad sigma_k dW^k)``."""
    xs, Js, _, div = _integrate(model, grid, x, 0, True, False, cap)
    return FlowPath(grid, xs, np.asarray(x, dtype=float), div), TangentPath(Js)


def integrate_hessian(model, grid, x, cap: float = DEFAULT_CAP):
    """Flow, tangent and Hessian (a (2,1)-tensor, zero at the start)."""
    xs, Js, Hs, div = _integrate(model, grid, x, 0, True, True, cap)
    return FlowPath(grid, xs, np.asarray(x, dtype=float), div), TangentPath(Js), HessianPath(Hs)


def restart_flow(model, grid, from_index: int, y, want_tangent=False, want_hessian=False,
                 cap: float = DEFAULT_CAP):
    """Integrate from state ``y`` at node ``from_index`` with the same increments.

    Returns:
        ``(FlowPath, TangentPath or None, HessianPath or None)`` on
        ``[t_k, t1]``.
    """
    xs, Js, Hs, div = _integrate(model, grid, y, from_index, want_tangent, want_hessian, cap)
    flow = FlowPath(grid, xs, np.asarray(y, dtype=float), div, start_index=from_index)
    return (flow, TangentPath(Js) if Js is not None else None,
            HessianPath(Hs) if Hs is not None else None)


def restart_terminal(model, grid, starts, ys, want_tangent=True, want_hessian=False,
                     stop: int | None = None, cap: float = DEFAULT_CAP):
    """Terminal values of many restarts sharing one grid.

    Restart ``j`` begins at node ``starts[j]`` from ``ys[..., j, :]`` and runs to
    node ``stop`` (default: the last node). Only terminal state, tangent and
    Hessian are kept.

    Args:
        model: the model to integrate.
        grid: a (batched) grid with increments ``(..., n, r)``.
        starts: integer array ``(K,)`` of start nodes.
        ys: start states ``(..., K, d)``.

    Returns:
        ``(X, J, H, diverged)`` with shapes ``(..., K, d)``, ``(..., K, d, d)``,
        ``(..., K, d, d, d)`` and ``(..., K)``.
    """
    starts = np.asarray(starts, dtype=int)
    n = grid.steps if stop is None else int(stop)
    if starts.size and (starts.min() < 0 or starts.max() > n):
        raise IndexError("restart index out of range")
    d = model.d
    ys = np.asarray(ys, dtype=float)
    K = starts.size
    X = np.broadcast_to(ys, grid.batch_shape + (K, d)).copy()
    batch = X.shape[:-1]
    tangent = want_tangent or want_hessian
    J = np.broadcast_to(np.eye(d), batch + (d, d)).copy() if tangent else None
    H = np.zeros(batch + (d, d, d)) if want_hessian else None
    diverged = np.zeros(batch, dtype=bool)
    first = int(starts.min()) if K else n
    h = grid.h
    for k in range(first, n):
        active = starts <= k
        dw = np.broadcast_to(grid.increments[..., k, None, :], batch + (grid.r,))
        Xn, Jn, Hn = euler_step(model, grid.time(k), X, dw, h, J, H)
        bad = ~np.all(np.isfinite(Xn), axis=-1) | (np.linalg.norm(Xn, axis=-1) > cap)
        diverged |= bad & active
        upd = active & ~diverged
        X = np.where(upd[..., None], Xn, X)
        if J is not None:
            J = np.where(upd[..., None, None], Jn, J)
        if H is not None:
            H = np.where(upd[..., None, None, None], Hn, H)
    return X, J, H, diverged


def integrate_frozen_drift(model, grid, x, H: float, cap: float = DEFAULT_CAP) -> FlowPath:
    """Flow whose drift argument is frozen at the last multiple of ``H``.

    ``X_{k+1} = X_k + b(X_{m(k)}) h + sigma(X_k) dW_k`` with ``m(k)`` the last
    freeze node; for constant ``sigma`` this is the exact solution of the
    frozen-drift equation driven by the grid increments.
    """
    ratio = H / grid.h
    q = int(round(ratio))
    if q < 1 or abs(ratio - q) > 1e-9 * max(1.0, ratio):
        raise ValueError(f"H={H} is not an integer multiple of h={grid.h}")
    X = _initial(model, grid, x)
    batch = X.shape[:-1]
    xs = np.empty(batch + (grid.steps + 1, model.d))
    xs[..., 0, :] = X
    diverged = np.zeros(batch, dtype=bool)
    h = grid.h
    b = None
    for k in range(grid.steps):
        t = grid.time(k)
        if k % q == 0:
            b = model.drift(t, X)
        Xn = X + b * h + matvec(model.diffusion(t, X), grid.increments[..., k, :])
        bad = ~np.all(np.isfinite(Xn), axis=-1) | (np.linalg.norm(Xn, axis=-1) > cap)
        diverged |= bad
        X = np.where(diverged[..., None], X, Xn)
        xs[..., k + 1, :] = X
    return FlowPath(grid, xs, np.asarray(x, dtype=float), diverged)


def drift_sensitivity(model, grid, x, extra, cap: float = DEFAULT_CAP):
    """Flow and derivative of the Euler flow in ``delta`` for drift ``b + delta * extra``.

    The derivative at ``delta = 0`` is ``sum_k J_{k+1 -> n}(X_{k+1})' extra(X_k) h``,
    accumulated forward as ``D_{k+1} = D_k + G_k' D_k + extra(X_k) h``.

    Returns:
        ``(FlowPath, D)`` with ``D`` of shape ``(..., d)``.
    """
    X = _initial(model, grid, x)
    batch = X.shape[:-1]
    xs = np.empty(batch + (grid.steps + 1, model.d))
    xs[..., 0, :] = X
    D = np.zeros_like(X)
    diverged = np.zeros(batch, dtype=bool)
    h = grid.h
    for k in range(grid.steps):
        t = grid.time(k)
        dw = grid.increments[..., k, :]
        G = model.drift_grad(t, X) * h
        if not model.constant_diffusion:
            G = G + _weighted_columns(model.diffusion_grad(t, X), dw)
        D = D + tvec(G, D) + extra(t, X) * h
        X = X + model.drift(t, X) * h + matvec(model.diffusion(t, X), dw)
        diverged |= np.linalg.norm(X, axis=-1) > cap
        xs[..., k + 1, :] = X
    return FlowPath(grid, xs, np.asarray(x, dtype=float), diverged), D


def write_path_csv(file, flow: FlowPath, tangent: TangentPath | None = None, index=None):
    """Dump one path as CSV with columns ``t, x_1..x_d`` and optional ``J_i_j``.

    ``index`` selects a path from a batch.
    """
    states = flow.states if index is None else flow.states[index]
    if states.ndim != 2:
        raise ValueError("select a single path with index=")
    d = states.shape[-1]
    header = ["t"] + [f"x_{i + 1}" for i in range(d)]
    mats = None
    if tangent is not None:
        mats = tangent.matrices if index is None else tangent.matrices[index]
        header += [f"J_{i + 1}_{j + 1}" for i in range(d) for j in range(d)]
    times = flow.times
    with open(file, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for k in range(states.shape[0]):
            row = [repr(float(times[k]))] + [repr(float(v)) for v in states[k]]
            if mats is not None:
                row += [repr(float(v)) for v in mats[k].reshape(-1)]
            w.writerow(row)
