"""Likelihood factors: hinge obstacle cost and velocity limits, with Jacobians."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tape as T
from .core import FixedParams, LearnedParams, State, Trajectory
from .env import Sdf, sdf_distance, sdf_distance_gradient


def hinge_cost(d, eps):
    """max(eps - d, 0); zero at and beyond the safety margin."""
    return T.relu(T.sub(eps, d))


@dataclass(frozen=True)
class ObstacleFactor:
    index: int
    eps: float
    sigma: float

    def __post_init__(self):
        if not (self.eps > 0 and self.sigma > 0):
            raise ValueError("eps and sigma must be positive")


@dataclass(frozen=True)
class VelocityFactor:
    index: int
    v_max: np.ndarray
    sigma: float

    def __post_init__(self):
        vm = np.asarray(self.v_max, dtype=float).reshape(2)
        if np.any(vm <= 0):
            raise ValueError("v_max components must be positive")
        object.__setattr__(self, "v_max", vm)


def obstacle_residual_jacobian(factor: ObstacleFactor, state: State, sdf: Sdf):
    """Hinge residual and its 1x4 jacobian row at one state.

    Active strictly below the margin; at d == eps the zero row is used.
    """
    p = state.position.reshape(1, 2)
    d = float(sdf_distance(sdf, p)[0])
    if d < factor.eps:
        g = sdf_distance_gradient(sdf, p)[0]
        jac = np.array([-g[0], -g[1], 0.0, 0.0])
        return factor.eps - d, jac
    return 0.0, np.zeros(4)


def velocity_residual_jacobian(factor: VelocityFactor, state: State):
    """Per-component hinge on |v| <= v_max: residual (2,), jacobian (2, 4)."""
    v = state.velocity
    res = np.zeros(2)
    jac = np.zeros((2, 4))
    for j in range(2):
        if v[j] > factor.v_max[j]:
            res[j] = v[j] - factor.v_max[j]
            jac[j, 2 + j] = 1.0
        elif v[j] < -factor.v_max[j]:
            res[j] = -factor.v_max[j] - v[j]
            jac[j, 2 + j] = -1.0
    return res, jac


# ---------------------------------------------------------------------------
# Batched terms shared by the planner step and the stacked view
# ---------------------------------------------------------------------------

def obstacle_terms(positions, sdf: Sdf, eps: float, sigma):
    """Per-state obstacle residual/jacobian/weight for all N states at once.

    positions: (N, 2); sigma: (N,). Returns (r (N,), J4 (N, 4), w (N,)).
    Generic over tape tensors; the active mask is a recorded branch constant.
    """
    d = sdf_distance(sdf, positions)
    r = T.relu(T.sub(eps, d))
    active = T.value_of(d) < eps
    g = sdf_distance_gradient(sdf, positions)
    n = T.value_of(positions).shape[0]
    jpos = T.masked(T.neg(g), active[:, None])
    j4 = T.concat([jpos, np.zeros((n, 2))], axis=1)
    w = T.power(sigma, -2.0)
    return r, j4, w


def velocity_terms(velocities, v_max: np.ndarray, k_vel: float):
    """Per-state velocity-limit residuals: (r (N,2), sign (N,2) const, w scalar)."""
    vm = np.asarray(v_max, dtype=float).reshape(1, 2)
    hi = T.relu(T.sub(velocities, vm))
    lo = T.relu(T.sub(-vm, velocities))
    v = T.value_of(velocities)
    sign = (v > vm).astype(float) - (v < -vm).astype(float)
    r = T.add(hi, lo)
    return r, sign, 1.0 / float(k_vel)


@dataclass(frozen=True)
class LikelihoodStack:
    """Stacked residuals h, jacobian H, and diagonal weights of Eq-6 form.

    Rows are the N obstacle rows followed by 2N velocity rows (when limits
    are present). Each row touches exactly one state's 4 columns.
    """

    h: np.ndarray
    jacobian: np.ndarray  # (rows, 4N)
    weights: np.ndarray   # (rows,) diagonal of Sigma^-1

    @property
    def n_rows(self) -> int:
        return self.h.shape[0]


def stack_likelihood(traj: Trajectory, sdf: Sdf, fixed: FixedParams,
                     learned: LearnedParams) -> LikelihoodStack:
    n = traj.n_states
    sigma = np.asarray(learned.sigma_obs, dtype=float)
    if sigma.shape != (n,):
        raise ValueError("sigma_obs length must equal the state count")
    if np.any(sigma <= 0):
        raise ValueError("sigma_obs entries must be positive")
    pos = traj.positions()
    r_obs, j4, w_obs = obstacle_terms(pos, sdf, fixed.eps, sigma)
    rows_h = [r_obs]
    jac = np.zeros((n, 4 * n))
    for i in range(n):
        jac[i, 4 * i:4 * i + 4] = j4[i]
    rows_j = [jac]
    rows_w = [w_obs]
    if fixed.v_max is not None:
        r_v, sign, w_v = velocity_terms(traj.velocities(), fixed.v_max, fixed.k_vel)
        jv = np.zeros((2 * n, 4 * n))
        for i in range(n):
            for j in range(2):
                jv[2 * i + j, 4 * i + 2 + j] = sign[i, j]
        rows_h.append(r_v.reshape(-1))
        rows_j.append(jv)
        rows_w.append(np.full(2 * n, w_v))
    return LikelihoodStack(np.concatenate(rows_h), np.vstack(rows_j),
                           np.concatenate(rows_w))
