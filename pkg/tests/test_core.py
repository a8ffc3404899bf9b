import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dgpmp2.core import (FixedParams, LearnedParams, State, Trajectory,
                         make_problem, straight_line_init)
from dgpmp2.env import OccupancyGrid, Sdf, compute_sdf


def empty_sdf(extent=10.0, cells=16):
    res = extent / cells
    grid = OccupancyGrid(cells, cells, res, np.array([res / 2, res / 2]),
                         np.zeros((cells, cells), dtype=np.uint8))
    return compute_sdf(grid)


def default_fixed(**kw):
    return FixedParams(q_c=0.5 * np.eye(2), **kw)


def test_state_rejects_nonfinite():
    with pytest.raises(ValueError):
        State([np.nan, 0.0], [0.0, 0.0])


def test_trajectory_needs_two_states():
    s = State([0, 0], [0, 0])
    with pytest.raises(ValueError):
        Trajectory((s,), 1.0)


def test_straight_line_interpolates():
    sdf = empty_sdf(extent=12.0)
    prob = make_problem([0, 0], [10, 0], sdf, default_fixed(), 11, 10.0)
    traj = straight_line_init(prob)
    for i, s in enumerate(traj.states):
        assert np.allclose(s.position, [i, 0])
        assert np.allclose(s.velocity, [1, 0])
    assert traj.dt == pytest.approx(1.0)


def test_straight_line_degenerate_zero_length():
    sdf = empty_sdf()
    prob = make_problem([3, 3], [3, 3], sdf, default_fixed(), 5, 2.0)
    traj = straight_line_init(prob)
    assert np.allclose(traj.positions(), 3.0)
    assert np.allclose(traj.velocities(), 0.0)


def test_straight_line_two_states():
    sdf = empty_sdf()
    prob = make_problem([0, 0], [4, 3], sdf, default_fixed(), 2, 5.0)
    traj = straight_line_init(prob)
    assert np.allclose(traj.states[0].position, [0, 0])
    assert np.allclose(traj.states[1].position, [4, 3])
    assert np.allclose(traj.velocities(), [[0.8, 0.6], [0.8, 0.6]])


@given(n=st.integers(2, 30),
       coords=st.lists(st.floats(-5, 5, allow_nan=False), min_size=4, max_size=4),
       total_time=st.floats(0.5, 20, allow_nan=False))
@settings(max_examples=50, deadline=None)
def test_flatten_round_trip(n, coords, total_time):
    sdf = empty_sdf(extent=20.0)
    x0, y0, x1, y1 = coords
    prob = make_problem([x0 + 8, y0 + 8], [x1 + 8, y1 + 8], sdf,
                        default_fixed(), n, total_time)
    traj = straight_line_init(prob)
    flat = traj.flatten()
    back = Trajectory.from_flat(flat, total_time)
    assert np.array_equal(back.flatten(), flat)
    assert back.dt == traj.dt


def test_init_satisfies_trajectory_invariants():
    sdf = empty_sdf()
    prob = make_problem([1, 1], [9, 9], sdf, default_fixed(), 17, 7.0)
    traj = straight_line_init(prob)
    assert traj.n_states == 17
    assert traj.dt > 0
    flat = traj.flatten()
    assert flat.shape == (17 * 4,)
    assert np.all(np.isfinite(flat))


def test_problem_rejects_out_of_extent_start():
    sdf = empty_sdf(extent=10.0)
    with pytest.raises(ValueError):
        make_problem([-5, 0], [5, 5], sdf, default_fixed(), 10, 5.0)


def test_fixed_params_validation():
    with pytest.raises(ValueError):
        FixedParams(q_c=np.array([[1.0, 2.0], [0.0, 1.0]]))  # asymmetric
    with pytest.raises(ValueError):
        FixedParams(q_c=np.eye(2), robot_radius=0.0)
    with pytest.raises(ValueError):
        FixedParams(q_c=np.eye(2), v_max=[1.0, -1.0])
    fp = FixedParams(q_c=np.eye(2), robot_radius=0.3, eps_safe=0.2)
    assert fp.eps == pytest.approx(0.5)


def test_learned_params_positive():
    with pytest.raises(ValueError):
        LearnedParams(np.array([0.1, 0.0]))
    lp = LearnedParams.uniform(0.1, 5)
    assert lp.sigma_obs.shape == (5,)
