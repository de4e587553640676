"""Damped least-squares (Levenberg-Marquardt) solver over manifold-valued blocks.

Parameters live in a ParameterStore keyed by arbitrary hashable ids. Each
parameter declares its manifold: 'euclidean' (plain ndarray), 'se3'
(SE3Pose, 6-dim tangent), or 'sim3' (Sim3Transform, 7-dim decoupled chart
[rho, phi, log_scale]). Updates are applied by retraction, never raw
addition on pose objects.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Hashable, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from .geometry import SE3Pose, Sim3Transform, se3_exp

__all__ = [
    "Parameter",
    "ParameterStore",
    "ResidualBlock",
    "SolveReport",
    "SolveOptions",
    "IllPosedError",
    "huber_weight",
    "huber_cost",
    "solve",
    "sim3_local",
    "sim3_from_local",
]


class IllPosedError(RuntimeError):
    """Normal equations stayed singular beyond damping recovery."""


def huber_weight(residual_norm: float, delta: float) -> float:
    """IRLS weight for the Huber kernel: 1 inside delta, delta/norm outside."""
    if delta <= 0:
        raise ValueError("huber delta must be positive")
    if residual_norm <= delta:
        return 1.0
    return delta / residual_norm


def huber_cost(residual_norm: float, delta: float | None) -> float:
    """Robustified cost of one residual block (0.5 r^2 inside delta)."""
    if delta is None or residual_norm <= delta:
        return 0.5 * residual_norm**2
    return delta * residual_norm - 0.5 * delta**2


def sim3_from_local(vec: np.ndarray) -> Sim3Transform:
    """Decoupled chart: vec = [rho(3), phi(3), log_scale]."""
    vec = np.asarray(vec, dtype=np.float64).reshape(7)
    return Sim3Transform(
        float(np.exp(vec[6])), Rotation.from_rotvec(vec[3:6]).as_quat(), vec[:3]
    )


def sim3_local(S: Sim3Transform) -> np.ndarray:
    """Inverse of sim3_from_local; zero iff S is the identity."""
    return np.concatenate([
        S.t,
        Rotation.from_quat(S.quat).as_rotvec(),
        [np.log(S.scale)],
    ])


def _retract(value, manifold: str, delta: np.ndarray):
    if manifold == "euclidean":
        return np.asarray(value, dtype=np.float64) + delta
    if manifold == "se3":
        return se3_exp(delta) * value
    if manifold == "sim3":
        return sim3_from_local(delta) * value
    raise ValueError(f"unknown manifold {manifold!r}")


def _tangent_dim(value, manifold: str) -> int:
    if manifold == "euclidean":
        return int(np.asarray(value).size)
    if manifold == "se3":
        return 6
    if manifold == "sim3":
        return 7
    raise ValueError(f"unknown manifold {manifold!r}")


@dataclass
class Parameter:
    value: object
    manifold: str = "euclidean"
    fixed: bool = False


class ParameterStore(dict):
    """id -> Parameter mapping with typed add helpers."""

    def add(self, key: Hashable, value, manifold: str = "euclidean", fixed: bool = False):
        if isinstance(value, SE3Pose):
            manifold = "se3"
        elif isinstance(value, Sim3Transform):
            manifold = "sim3"
        elif manifold == "euclidean":
            value = np.asarray(value, dtype=np.float64)
        self[key] = Parameter(value, manifold, fixed)

    def value(self, key: Hashable):
        return self[key].value


@dataclass
class ResidualBlock:
    """One cost term: fn(*param_values) -> residual vector.

    jac, when given, returns one (r_dim, tangent_dim) Jacobian per parameter
    slot; otherwise central differences on the manifold are used.
    huber_delta=None means a plain squared kernel.
    """

    fn: Callable[..., np.ndarray]
    params: tuple
    jac: Callable[..., Sequence[np.ndarray]] | None = None
    huber_delta: float | None = None


@dataclass
class SolveOptions:
    max_iter: int = 20
    grad_tol: float = 1e-8
    step_tol: float = 1e-10
    damping_init: float = 1e-4
    damping_max: float = 1e12


@dataclass
class SolveReport:
    initial_cost: float
    final_cost: float
    iterations: int
    termination: str  # converged | max-iter | stalled


def _numeric_jacobians(block: ResidualBlock, values: list, manifolds: list[str],
                       h: float = 1e-6) -> list[np.ndarray]:
    r0 = np.atleast_1d(np.asarray(block.fn(*values), dtype=np.float64))
    jacs = []
    for k, (v, m) in enumerate(zip(values, manifolds)):
        dim = _tangent_dim(v, m)
        J = np.empty((r0.size, dim))
        for i in range(dim):
            e = np.zeros(dim)
            e[i] = h
            vp = list(values)
            vp[k] = _retract(v, m, e)
            vm = list(values)
            vm[k] = _retract(v, m, -e)
            rp = np.atleast_1d(np.asarray(block.fn(*vp), dtype=np.float64))
            rm = np.atleast_1d(np.asarray(block.fn(*vm), dtype=np.float64))
            J[:, i] = (rp - rm) / (2 * h)
        jacs.append(J)
    return jacs


def _total_cost(blocks: Sequence[ResidualBlock], store: ParameterStore) -> float:
    c = 0.0
    for b in blocks:
        r = np.atleast_1d(np.asarray(b.fn(*[store[p].value for p in b.params]),
                                     dtype=np.float64))
        c += huber_cost(float(np.linalg.norm(r)), b.huber_delta)
    return c


def solve(blocks: Sequence[ResidualBlock], store: ParameterStore,
          opts: SolveOptions | None = None) -> SolveReport:
    """Levenberg-Marquardt over all non-fixed parameters referenced by blocks.

    Multiplicative damping (x10 on reject, /10 on accept); accepted steps
    never increase the robustified cost. Parameters are updated in place.
    """
    opts = opts or SolveOptions()
    if not blocks:
        return SolveReport(0.0, 0.0, 0, "converged")

    for b in blocks:
        for p in b.params:
            if p not in store:
                raise KeyError(f"residual block references unknown parameter {p!r}")

    free_ids = []
    offsets = {}
    n = 0
    for b in blocks:
        for p in b.params:
            par = store[p]
            if par.fixed or p in offsets:
                continue
            offsets[p] = n
            n += _tangent_dim(par.value, par.manifold)
            free_ids.append(p)
    if n == 0:
        c = _total_cost(blocks, store)
        return SolveReport(c, c, 0, "converged")

    cost = _total_cost(blocks, store)
    initial_cost = cost
    lam = opts.damping_init
    termination = "max-iter"
    it = 0

    while it < opts.max_iter:
        it += 1
        H = np.zeros((n, n))
        g = np.zeros(n)
        for b in blocks:
            values = [store[p].value for p in b.params]
            manifolds = [store[p].manifold for p in b.params]
            r = np.atleast_1d(np.asarray(b.fn(*values), dtype=np.float64))
            if b.jac is not None:
                jacs = list(b.jac(*values))
            else:
                jacs = _numeric_jacobians(b, values, manifolds)
            w = 1.0
            if b.huber_delta is not None:
                w = huber_weight(float(np.linalg.norm(r)), b.huber_delta)
            slots = [
                (offsets[p], _tangent_dim(store[p].value, store[p].manifold))
                for p in b.params if not store[p].fixed
            ]
            live = [k for k, p in enumerate(b.params) if not store[p].fixed]
            for a_i, k_i in enumerate(live):
                Ji = jacs[k_i]
                oi, di = slots[a_i]
                g[oi:oi + di] += w * Ji.T @ r
                for a_j, k_j in enumerate(live):
                    Jj = jacs[k_j]
                    oj, dj = slots[a_j]
                    H[oi:oi + di, oj:oj + dj] += w * Ji.T @ Jj

        if np.max(np.abs(g)) < opts.grad_tol:
            termination = "converged"
            break

        stepped = False
        while lam <= opts.damping_max:
            try:
                delta = np.linalg.solve(H + lam * np.eye(n), -g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            if not np.all(np.isfinite(delta)):
                lam *= 10
                continue
            backup = {p: store[p].value for p in free_ids}
            for p in free_ids:
                par = store[p]
                o = offsets[p]
                d = _tangent_dim(par.value, par.manifold)
                par.value = _retract(par.value, par.manifold, delta[o:o + d])
            new_cost = _total_cost(blocks, store)
            if new_cost < cost:
                cost = new_cost
                lam = max(lam / 10, 1e-12)
                stepped = True
                if np.linalg.norm(delta) < opts.step_tol:
                    termination = "converged"
                break
            for p in free_ids:
                store[p].value = backup[p]
            lam *= 10
        if not stepped:
            if lam > opts.damping_max:
                if it == 1 and not np.all(np.isfinite(H)):
                    raise IllPosedError("non-finite normal equations")
            termination = "stalled"
            break
        if termination == "converged":
            break

    return SolveReport(initial_cost, cost, it, termination)
