"""Constant-velocity GP prior: transition model, segment covariances, energy."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from . import tape as T
from .core import Problem, Trajectory, straight_line_init


def transition_matrix(dt: float) -> np.ndarray:
    phi = np.eye(4)
    phi[0, 2] = dt
    phi[1, 3] = dt
    return phi


def segment_cov(q_c, dt: float):
    """Per-segment covariance of the constant-velocity model."""
    a = dt ** 3 / 3.0
    b = dt ** 2 / 2.0
    top = T.concat([T.mul(q_c, a), T.mul(q_c, b)], axis=1)
    bot = T.concat([T.mul(q_c, b), T.mul(q_c, dt)], axis=1)
    return T.concat([top, bot], axis=0)


def segment_cov_inv(q_c, dt: float):
    """Closed-form inverse of segment_cov, in terms of q_c^-1."""
    qi = T.inv2(q_c)
    top = T.concat([T.mul(qi, 12.0 / dt ** 3), T.mul(qi, -6.0 / dt ** 2)], axis=1)
    bot = T.concat([T.mul(qi, -6.0 / dt ** 2), T.mul(qi, 4.0 / dt)], axis=1)
    return T.concat([top, bot], axis=0)


@dataclass(frozen=True)
class GpSegment:
    phi: np.ndarray
    q: np.ndarray
    q_inv: np.ndarray


@dataclass(frozen=True)
class PriorModel:
    """Pairwise-factored GP prior plus soft start/goal anchors."""

    mean: Trajectory
    segments: Tuple[GpSegment, ...]
    k_start_inv: np.ndarray
    k_goal_inv: np.ndarray
    start_vec: np.ndarray
    goal_vec: np.ndarray

    @property
    def n_states(self) -> int:
        return self.mean.n_states

    @property
    def dt(self) -> float:
        return self.mean.dt


def build_prior(problem: Problem) -> PriorModel:
    """Segments share the problem's uniform dt; the mean is the straight-line
    initialization, which has zero residual under every factor."""
    q_c = problem.fixed.q_c
    try:
        np.linalg.cholesky(q_c)
    except np.linalg.LinAlgError as exc:
        raise ValueError("q_c must be symmetric positive definite") from exc
    dt = problem.dt
    phi = transition_matrix(dt)
    q = segment_cov(q_c, dt)
    q_inv = segment_cov_inv(q_c, dt)
    seg = GpSegment(phi, q, q_inv)
    mean = straight_line_init(problem)
    return PriorModel(
        mean=mean,
        segments=tuple(seg for _ in range(problem.n_states - 1)),
        k_start_inv=np.linalg.inv(problem.fixed.k_start),
        k_goal_inv=np.linalg.inv(problem.fixed.k_goal),
        start_vec=problem.start.as_vector(),
        goal_vec=problem.goal.as_vector(),
    )


def gp_residual(prior: PriorModel, traj: Trajectory, i: int) -> np.ndarray:
    """Pairwise factor residual e_i = theta_{i+1} - Phi theta_i."""
    if not 0 <= i < prior.n_states - 1:
        raise IndexError("segment index out of range")
    seg = prior.segments[i]
    return traj.states[i + 1].as_vector() - seg.phi @ traj.states[i].as_vector()


def gp_residuals_flat(prior: PriorModel, theta):
    """All segment residuals at once: (N-1, 4). Generic over tape tensors."""
    n = prior.n_states
    states = T.reshape(theta, (n, 4))
    phi = prior.segments[0].phi
    head = T.take(states, np.arange(0, n - 1), axis=0)
    tail = T.take(states, np.arange(1, n), axis=0)
    return T.sub(tail, T.matmul(head, phi.T))


def gp_energy_flat(prior: PriorModel, theta, q_inv=None):
    """0.5 * (segment Mahalanobis sum + anchor terms), on a flat 4N vector."""
    n = prior.n_states
    e = gp_residuals_flat(prior, theta)
    if q_inv is None:
        q_inv = prior.segments[0].q_inv
    quad = T.tsum(T.mul(T.matmul(e, q_inv), e))
    states = T.reshape(theta, (n, 4))
    es = T.sub(T.take(states, np.array([0]), axis=0), prior.start_vec[None, :])
    eg = T.sub(T.take(states, np.array([n - 1]), axis=0), prior.goal_vec[None, :])
    quad_s = T.tsum(T.mul(T.matmul(es, prior.k_start_inv), es))
    quad_g = T.tsum(T.mul(T.matmul(eg, prior.k_goal_inv), eg))
    return T.mul(T.add(quad, T.add(quad_s, quad_g)), 0.5)


def gp_energy(prior: PriorModel, traj: Trajectory) -> float:
    return float(gp_energy_flat(prior, traj.flatten()))


def prior_const_blocks(prior: PriorModel, q_c=None):
    """Constant normal-equation contributions of the prior factors.

    Returns (diag (N,4,4), offdiag (N-1,4,4)). When q_c is given (possibly a
    tape tensor) the blocks are rebuilt from it so gradients can flow;
    otherwise the stored numeric q_inv is used.
    """
    n = prior.n_states
    phi = prior.segments[0].phi
    if q_c is None:
        q_inv = prior.segments[0].q_inv
    else:
        q_inv = segment_cov_inv(q_c, prior.dt)
    a = T.reshape(T.matmul(T.matmul(phi.T, q_inv), phi), (1, 4, 4))
    b = T.reshape(q_inv, (1, 4, 4))
    tile = np.zeros(n - 1, dtype=int)
    tiles_a = T.take(a, tile, axis=0)
    tiles_b = T.take(b, tile, axis=0)
    zero1 = np.zeros((1, 4, 4))
    diag = T.add(T.concat([tiles_a, zero1], axis=0), T.concat([zero1, tiles_b], axis=0))
    anchors = np.zeros((n, 4, 4))
    anchors[0] = prior.k_start_inv
    anchors[n - 1] = prior.k_goal_inv
    diag = T.add(diag, anchors)
    offdiag = T.neg(T.matmul(tiles_b, phi[None, :, :]))
    return diag, offdiag


def prior_rhs_rows(prior: PriorModel, theta, q_inv=None):
    """-K^-1 (theta - mu) arranged as (N, 4) rows, built factor-wise."""
    n = prior.n_states
    phi = prior.segments[0].phi
    if q_inv is None:
        q_inv = prior.segments[0].q_inv
    e = gp_residuals_flat(prior, theta)
    f = T.matmul(e, q_inv)  # q_inv symmetric
    zero1 = np.zeros((1, 4))
    rows = T.sub(T.concat([T.matmul(f, phi), zero1], axis=0),
                 T.concat([zero1, f], axis=0))
    states = T.reshape(theta, (n, 4))
    es = T.sub(T.take(states, np.array([0]), axis=0), prior.start_vec[None, :])
    eg = T.sub(T.take(states, np.array([n - 1]), axis=0), prior.goal_vec[None, :])
    pad_s = T.concat([T.neg(T.matmul(es, prior.k_start_inv)), np.zeros((n - 1, 4))], axis=0)
    pad_g = T.concat([np.zeros((n - 1, 4)), T.neg(T.matmul(eg, prior.k_goal_inv))], axis=0)
    return T.add(rows, T.add(pad_s, pad_g))
