"""Shared domain types: states, trajectories, planner parameters, problems."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

STATE_DIM = 4  # [x, y, vx, vy]


def _as_vec2(v) -> np.ndarray:
    a = np.asarray(v, dtype=float).reshape(2)
    return a


@dataclass(frozen=True)
class State:
    """A single support state [x, y, vx, vy] in meters / meters per second."""

    position: np.ndarray
    velocity: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "position", _as_vec2(self.position))
        object.__setattr__(self, "velocity", _as_vec2(self.velocity))
        if not (np.all(np.isfinite(self.position)) and np.all(np.isfinite(self.velocity))):
            raise ValueError("state components must be finite")

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.position, self.velocity])

    @staticmethod
    def from_vector(v) -> "State":
        v = np.asarray(v, dtype=float).reshape(STATE_DIM)
        return State(v[:2], v[2:])


@dataclass(frozen=True)
class Trajectory:
    """N support states on a uniform time grid spanning total_time seconds."""

    states: tuple
    total_time: float

    def __post_init__(self):
        states = tuple(self.states)
        object.__setattr__(self, "states", states)
        if len(states) < 2:
            raise ValueError("a trajectory needs at least 2 states")
        if not self.total_time > 0:
            raise ValueError("total_time must be positive")

    @property
    def n_states(self) -> int:
        return len(self.states)

    @property
    def dt(self) -> float:
        return self.total_time / (self.n_states - 1)

    def flatten(self) -> np.ndarray:
        """Flat 4N vector in state-major order [x1, y1, vx1, vy1, x2, ...]."""
        return np.concatenate([s.as_vector() for s in self.states])

    @staticmethod
    def from_flat(vec, total_time: float) -> "Trajectory":
        vec = np.asarray(vec, dtype=float)
        if vec.size % STATE_DIM != 0:
            raise ValueError("flat trajectory length must be a multiple of 4")
        mat = vec.reshape(-1, STATE_DIM)
        return Trajectory(tuple(State(row[:2], row[2:]) for row in mat), total_time)

    def positions(self) -> np.ndarray:
        return np.stack([s.position for s in self.states])

    def velocities(self) -> np.ndarray:
        return np.stack([s.velocity for s in self.states])


def _as_spd(m, dim: int, name: str) -> np.ndarray:
    a = np.asarray(m, dtype=float)
    if a.shape == ():
        a = float(a) * np.eye(dim)
    if a.shape != (dim, dim):
        raise ValueError(f"{name} must be {dim}x{dim}")
    if not np.allclose(a, a.T):
        raise ValueError(f"{name} must be symmetric")
    if np.any(np.diag(a) <= 0):
        raise ValueError(f"{name} must have a strictly positive diagonal")
    return a


@dataclass(frozen=True)
class FixedParams:
    """User-set planner parameters that are not learned.

    q_c is the power spectral density of the constant-velocity prior;
    k_start / k_goal are the start and goal anchor covariances; k_vel is the
    covariance of the velocity-limit factors, active only when v_max is set.
    """

    q_c: np.ndarray
    eps_safe: float = 0.2
    robot_radius: float = 0.2
    k_start: np.ndarray = 1e-6
    k_goal: np.ndarray = 1e-6
    k_vel: float = 1e-4
    v_max: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "q_c", _as_spd(self.q_c, 2, "q_c"))
        object.__setattr__(self, "k_start", _as_spd(self.k_start, 4, "k_start"))
        object.__setattr__(self, "k_goal", _as_spd(self.k_goal, 4, "k_goal"))
        if self.eps_safe < 0:
            raise ValueError("eps_safe must be >= 0")
        if not self.robot_radius > 0:
            raise ValueError("robot_radius must be positive")
        if not self.k_vel > 0:
            raise ValueError("k_vel must be positive")
        if self.v_max is not None:
            vm = _as_vec2(self.v_max)
            if np.any(vm <= 0):
                raise ValueError("v_max components must be positive")
            object.__setattr__(self, "v_max", vm)

    @property
    def eps(self) -> float:
        """Hinge activation margin: robot radius plus safety distance."""
        return self.robot_radius + self.eps_safe


@dataclass(frozen=True)
class LearnedParams:
    """Per-state obstacle standard deviations predicted or hand-set."""

    sigma_obs: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.sigma_obs, dtype=float).reshape(-1)
        if np.any(s <= 0):
            raise ValueError("sigma_obs entries must be positive")
        object.__setattr__(self, "sigma_obs", s)

    @staticmethod
    def uniform(sigma: float, n_states: int) -> "LearnedParams":
        return LearnedParams(np.full(n_states, float(sigma)))


@dataclass(frozen=True)
class Problem:
    """A single planning query against one signed distance field."""

    start: State
    goal: State
    sdf: "object"  # env.Sdf; kept loose to avoid an import cycle
    fixed: FixedParams
    n_states: int
    total_time: float

    def __post_init__(self):
        if self.n_states < 2:
            raise ValueError("n_states must be >= 2")
        if not self.total_time > 0:
            raise ValueError("total_time must be positive")
        for name, s in (("start", self.start), ("goal", self.goal)):
            if not self.sdf.grid.contains(s.position):
                raise ValueError(f"{name} position lies outside the SDF extent")

    @property
    def dt(self) -> float:
        return self.total_time / (self.n_states - 1)


def average_velocity(start_pos, goal_pos, total_time: float) -> np.ndarray:
    return (_as_vec2(goal_pos) - _as_vec2(start_pos)) / float(total_time)


def make_problem(start_pos, goal_pos, sdf, fixed: FixedParams, n_states: int,
                 total_time: float) -> Problem:
    """Build a problem whose anchor states carry the straight-line average
    velocity, so the prior mean satisfies both anchors and GP factors."""
    v = average_velocity(start_pos, goal_pos, total_time)
    return Problem(State(start_pos, v), State(goal_pos, v), sdf, fixed,
                   n_states, total_time)


def straight_line_init(problem: Problem) -> Trajectory:
    """Linear position interpolation start->goal with the constant average
    velocity at every state; endpoint positions match start/goal exactly."""
    n = problem.n_states
    p0 = problem.start.position
    p1 = problem.goal.position
    alphas = np.linspace(0.0, 1.0, n)
    v = average_velocity(p0, p1, problem.total_time)
    states = []
    for i, a in enumerate(alphas):
        pos = (1.0 - a) * p0 + a * p1
        states.append(State(pos, v))
    # endpoints exact, no interpolation rounding
    states[0] = State(p0, v)
    states[-1] = State(p1, v)
    return Trajectory(tuple(states), problem.total_time)
