"""The iterative planning loop: linearize, assemble, solve, update."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from . import tape as T
from .core import LearnedParams, Problem, Trajectory, straight_line_init
from .env import Sdf
from .factors import obstacle_terms, velocity_terms
from .gp_prior import (PriorModel, build_prior, gp_energy_flat,
                       prior_const_blocks, prior_rhs_rows)
from .solver import SingularSystemError, solve_blocks

# relative objective change is measured against at least this floor
OBJECTIVE_FLOOR = 1e-12


@dataclass(frozen=True)
class PlannerConfig:
    t_max: int = 100
    tol_rel_err: float = 1e-4
    tol_update: float = 1e-3
    fixed_unroll: Optional[int] = None
    step_scale: float = 1.0

    def __post_init__(self):
        if self.t_max < 1:
            raise ValueError("t_max must be >= 1")
        if self.tol_rel_err < 0 or self.tol_update < 0:
            raise ValueError("tolerances must be >= 0")
        if self.fixed_unroll is not None and self.fixed_unroll < 0:
            raise ValueError("fixed_unroll must be >= 0")


@dataclass
class PlanResult:
    final: Trajectory
    iterates: List[Trajectory]
    iterations_used: int
    converged: bool
    objectives: List[float]
    error: Optional[str] = None

    def __post_init__(self):
        assert len(self.iterates) == self.iterations_used + 1


class PlanContext:
    """Per-problem constants shared by every iteration of one plan.

    When q_c is passed as a tape tensor, the prior blocks are rebuilt on the
    tape so prior gradients flow; otherwise everything here is plain numpy.
    """

    def __init__(self, problem: Problem, prior: Optional[PriorModel] = None,
                 q_c=None):
        self.problem = problem
        self.prior = prior if prior is not None else build_prior(problem)
        self.n = problem.n_states
        self.eps = problem.fixed.eps
        self.sdf = problem.sdf
        self.v_max = problem.fixed.v_max
        self.k_vel = problem.fixed.k_vel
        if q_c is None:
            self.q_inv = None
            diag, offdiag = prior_const_blocks(self.prior)
        else:
            from .gp_prior import segment_cov_inv
            self.q_inv = segment_cov_inv(q_c, self.prior.dt)
            diag, offdiag = prior_const_blocks(self.prior, q_c=q_c)
        self.prior_diag = diag
        self.prior_offdiag = offdiag
        self.mu = self.prior.mean.flatten()


def step_flat(theta, ctx: PlanContext, sigma, step_scale: float = 1.0):
    """One Gauss-Newton update on the flat 4N vector; generic over tensors.

    Returns (theta_next, delta).
    """
    n = ctx.n
    states = T.reshape(theta, (n, 4))
    pos = T.take(states, np.array([0, 1]), axis=1)
    vel = T.take(states, np.array([2, 3]), axis=1)

    r_obs, j4, w = obstacle_terms(pos, ctx.sdf, ctx.eps, sigma)
    jw = T.mul(j4, T.reshape(w, (n, 1)))
    # per-state rank-one information block: w * J^T J
    blocks = T.mul(T.reshape(jw, (n, 4, 1)), T.reshape(j4, (n, 1, 4)))
    rhs_rows = T.neg(T.mul(jw, T.reshape(r_obs, (n, 1))))

    if ctx.v_max is not None:
        r_v, sign, w_v = velocity_terms(vel, ctx.v_max, ctx.k_vel)
        active = np.abs(sign)  # (N, 2) constant
        dvel = np.concatenate([np.zeros((n, 2)), active * w_v], axis=1)
        blocks = T.add(blocks, T.diag_embed(dvel))
        rv_signed = T.mul(r_v, sign * w_v)
        rhs_rows = T.add(rhs_rows, T.concat(
            [np.zeros((n, 2)), T.neg(rv_signed)], axis=1))

    diag = T.add(ctx.prior_diag, blocks)
    rhs_rows = T.add(rhs_rows, prior_rhs_rows(ctx.prior, theta, q_inv=ctx.q_inv))
    rhs = T.reshape(rhs_rows, (4 * n,))
    delta = solve_blocks(diag, ctx.prior_offdiag, rhs)
    if step_scale != 1.0:
        delta = T.mul(delta, step_scale)
    return T.add(theta, delta), delta


def objective_flat(theta, ctx: PlanContext, sigma):
    """Full MAP objective: prior energy plus weighted likelihood residuals."""
    n = ctx.n
    states = T.reshape(theta, (n, 4))
    pos = T.take(states, np.array([0, 1]), axis=1)
    r_obs, _, w = obstacle_terms(pos, ctx.sdf, ctx.eps, sigma)
    like = T.mul(T.tsum(T.mul(T.mul(r_obs, r_obs), w)), 0.5)
    if ctx.v_max is not None:
        vel = T.take(states, np.array([2, 3]), axis=1)
        r_v, _, w_v = velocity_terms(vel, ctx.v_max, ctx.k_vel)
        like = T.add(like, T.mul(T.tsum(T.mul(r_v, r_v)), 0.5 * w_v))
    return T.add(gp_energy_flat(ctx.prior, theta, q_inv=ctx.q_inv), like)


def step(traj: Trajectory, problem: Problem, learned: LearnedParams,
         step_scale: float = 1.0) -> Trajectory:
    """Single update of the full trajectory (raises on singular systems)."""
    ctx = PlanContext(problem)
    theta, _ = step_flat(traj.flatten(), ctx, learned.sigma_obs, step_scale)
    return Trajectory.from_flat(theta, problem.total_time)


def constant_provider(learned: LearnedParams) -> Callable:
    """Provider for fixed-covariance planning: the same sigmas every iteration."""

    def provider(iteration: int, traj: Trajectory) -> LearnedParams:
        return learned

    return provider


def plan(problem: Problem, learned_provider: Callable,
         config: PlannerConfig = PlannerConfig(),
         init: Optional[Trajectory] = None) -> PlanResult:
    """Iterate Gauss-Newton updates from the straight-line initialization
    (or a caller-supplied one) until the convergence check or t_max.

    learned_provider(iteration, trajectory) supplies the per-state sigmas for
    each iteration; iteration counts from 1. In fixed_unroll mode exactly that
    many steps run with no convergence branching. Step failures are recorded
    on the result instead of raised, so batch runs keep going.
    """
    ctx = PlanContext(problem)
    traj = init if init is not None else straight_line_init(problem)
    theta = traj.flatten()
    iterates = [traj]
    sigma0 = learned_provider(0, traj).sigma_obs
    objectives = [float(objective_flat(theta, ctx, sigma0))]
    fixed = config.fixed_unroll
    budget = fixed if fixed is not None else config.t_max
    converged = False
    error = None
    used = 0
    for it in range(1, budget + 1):
        learned = learned_provider(it, iterates[-1])
        sigma = learned.sigma_obs
        try:
            theta, delta = step_flat(theta, ctx, sigma, config.step_scale)
        except SingularSystemError as exc:
            error = str(exc)
            break
        traj = Trajectory.from_flat(theta, problem.total_time)
        iterates.append(traj)
        used = it
        objectives.append(float(objective_flat(theta, ctx, sigma)))
        if fixed is None:
            prev, cur = objectives[-2], objectives[-1]
            rel = abs(cur - prev) / max(abs(prev), OBJECTIVE_FLOOR)
            if rel < config.tol_rel_err or np.max(np.abs(delta)) < config.tol_update:
                converged = True
                break
    return PlanResult(final=iterates[-1], iterates=iterates,
                      iterations_used=used, converged=converged,
                      objectives=objectives, error=error)
