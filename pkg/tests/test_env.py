import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dgpmp2 import env
from dgpmp2.env import (EnvSpec, GenerationError, OccupancyGrid, Sdf,
                        compute_sdf, generate, load_grid, load_sdf, query_dist,
                        query_grad, save_grid, save_sdf)


def make_grid(cells, resolution=1.0):
    cells = np.asarray(cells, dtype=np.uint8)
    h, w = cells.shape
    return OccupancyGrid(w, h, resolution,
                         np.array([resolution / 2, resolution / 2]), cells)


def brute_force_sdf(grid: OccupancyGrid) -> np.ndarray:
    """O(n^2) oracle: per-cell nearest occupied / nearest free center scan."""
    occ = grid.cells.astype(bool)
    h, w = occ.shape
    ys, xs = np.mgrid[0:h, 0:w]
    pts = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(float)
    occ_pts = pts[occ.ravel()]
    free_pts = pts[~occ.ravel()]
    out = np.empty(h * w)
    diag = grid.diagonal
    for k, p in enumerate(pts):
        if occ.ravel()[k]:
            if free_pts.size == 0:
                out[k] = -diag
            else:
                out[k] = -np.min(np.hypot(*(free_pts - p).T)) * grid.resolution
        else:
            if occ_pts.size == 0:
                out[k] = diag
            else:
                out[k] = np.min(np.hypot(*(occ_pts - p).T)) * grid.resolution
    return out.reshape(h, w)


def bilinear_oracle(sdf: Sdf, p):
    """Loop-based reference interpolation, independent of the vectorized path."""
    g = sdf.grid
    u = (p[0] - g.origin[0]) / g.resolution
    v = (p[1] - g.origin[1]) / g.resolution
    u = min(max(u, 0.0), g.width - 1.0)
    v = min(max(v, 0.0), g.height - 1.0)
    i0 = min(int(u), g.width - 2)
    j0 = min(int(v), g.height - 2)
    fx, fy = u - i0, v - j0
    acc = 0.0
    for dj, wj in ((0, 1 - fy), (1, fy)):
        for di, wi in ((0, 1 - fx), (1, fx)):
            acc += wi * wj * sdf.dist[j0 + dj, i0 + di]
    return acc


# --- compute_sdf -----------------------------------------------------------

def test_sdf_single_center_obstacle():
    cells = np.zeros((5, 5))
    cells[2, 2] = 1
    sdf = compute_sdf(make_grid(cells))
    assert sdf.dist[0, 0] == pytest.approx(np.sqrt(8.0))
    assert sdf.dist[2, 2] == pytest.approx(-1.0)


def test_sdf_all_free_sentinel():
    grid = make_grid(np.zeros((3, 3)))
    sdf = compute_sdf(grid)
    assert np.all(sdf.dist == grid.diagonal)


def test_sdf_all_occupied_sentinel():
    grid = make_grid(np.ones((3, 3)))
    sdf = compute_sdf(grid)
    assert np.all(sdf.dist == -grid.diagonal)


def test_sdf_unit_neighbor_distance():
    cells = np.zeros((4, 4))
    cells[1, 2] = 1
    sdf = compute_sdf(make_grid(cells, resolution=0.25))
    assert sdf.dist[1, 1] == pytest.approx(0.25)
    assert sdf.dist[0, 2] == pytest.approx(0.25)


def test_sdf_matches_brute_force_on_random_grids():
    rng = np.random.default_rng(0)
    for trial in range(25):
        h = int(rng.integers(2, 33))
        w = int(rng.integers(2, 33))
        occ = (rng.random((h, w)) < rng.uniform(0.05, 0.5)).astype(np.uint8)
        grid = make_grid(occ, resolution=float(rng.uniform(0.1, 2.0)))
        sdf = compute_sdf(grid)
        assert np.allclose(sdf.dist, brute_force_sdf(grid), atol=1e-9)


def test_sdf_sign_matches_occupancy():
    rng = np.random.default_rng(3)
    occ = (rng.random((12, 12)) < 0.3).astype(np.uint8)
    occ[0, 0] = 1
    occ[5, 5] = 0
    sdf = compute_sdf(make_grid(occ))
    assert np.all((sdf.dist < 0) == (occ > 0))


@given(seed=st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_sdf_lipschitz(seed):
    rng = np.random.default_rng(seed)
    occ = (rng.random((9, 9)) < 0.3).astype(np.uint8)
    if occ.sum() in (0, occ.size):
        return
    grid = make_grid(occ)
    d = compute_sdf(grid).dist
    # 1-Lipschitz up to one resolution unit of sign quantization: the signed
    # value jumps by up to 2*res across a free/occupied boundary
    bound = grid.resolution + grid.resolution + 1e-12
    assert np.all(np.abs(np.diff(d, axis=0)) <= bound)
    assert np.all(np.abs(np.diff(d, axis=1)) <= bound)


# --- queries ---------------------------------------------------------------

def random_sdf(seed, cells=16, resolution=0.5):
    rng = np.random.default_rng(seed)
    grid = make_grid(np.zeros((cells, cells)), resolution)
    return Sdf(grid, rng.normal(size=(cells, cells)))


def test_query_at_cell_center_is_stored_value():
    sdf = random_sdf(1)
    g = sdf.grid
    p = g.origin + np.array([3, 5]) * g.resolution
    d, inside = query_dist(sdf, p)
    assert inside
    assert d == pytest.approx(sdf.dist[5, 3], abs=1e-12)


def test_query_midpoint_linear():
    cells = np.zeros((2, 2))
    grid = make_grid(cells)
    sdf = Sdf(grid, np.array([[1.0, 2.0], [1.0, 2.0]]))
    d, _ = query_dist(sdf, [1.0, 0.5])
    assert d == pytest.approx(1.5)


def test_query_matches_dense_oracle():
    sdf = random_sdf(7)
    lo, hi = sdf.grid.extent
    rng = np.random.default_rng(11)
    pts = rng.uniform(lo, hi, size=(200, 2))
    d, _ = query_dist(sdf, pts)
    oracle = np.array([bilinear_oracle(sdf, p) for p in pts])
    assert np.allclose(d, oracle, atol=1e-12)


def test_query_out_of_extent_clamps_and_flags():
    sdf = random_sdf(2)
    d_out, inside = query_dist(sdf, [-100.0, -100.0])
    assert not inside
    d_corner, _ = query_dist(sdf, sdf.grid.origin)
    assert d_out == pytest.approx(d_corner)


def test_grad_linear_field():
    grid = make_grid(np.zeros((8, 8)), resolution=0.5)
    xs = (np.arange(8) + 0.5) * 0.5
    field = np.tile(3.0 * xs, (8, 1))  # d = 3x
    sdf = Sdf(grid, field)
    g, inside = query_grad(sdf, [1.3, 1.7])
    assert inside
    assert np.allclose(g, [3.0, 0.0], atol=1e-12)


def test_grad_constant_field():
    sdf = Sdf(make_grid(np.zeros((4, 4))), np.full((4, 4), 2.5))
    g, _ = query_grad(sdf, [1.2, 2.1])
    assert np.allclose(g, 0.0)


def test_grad_matches_finite_differences():
    sdf = random_sdf(5, cells=20, resolution=0.3)
    g = sdf.grid
    rng = np.random.default_rng(13)
    # sample strictly inside cells, away from the interpolation gridlines
    ij = rng.integers(0, 19, size=(1000, 2))
    frac = rng.uniform(0.2, 0.8, size=(1000, 2))
    pts = g.origin + (ij + frac) * g.resolution
    grad, _ = query_grad(sdf, pts)
    h = 1e-5
    for axis in range(2):
        dp = np.zeros(2)
        dp[axis] = h
        dplus, _ = query_dist(sdf, pts + dp)
        dminus, _ = query_dist(sdf, pts - dp)
        fd = (dplus - dminus) / (2 * h)
        assert np.allclose(grad[:, axis], fd, atol=1e-4)


def test_grad_zero_in_clamped_direction():
    sdf = random_sdf(9)
    g, inside = query_grad(sdf, [-50.0, 1.0])
    assert not inside
    assert g[0] == 0.0


# --- generators -------------------------------------------------------------

def test_generate_deterministic():
    spec = EnvSpec("tarpit", seed=7)
    a = generate(spec)
    b = generate(spec)
    assert np.array_equal(a.cells, b.cells)


def test_generate_zero_count_forest_empty():
    spec = EnvSpec("forest", count_range=(0, 0), seed=1)
    grid = generate(spec)
    assert grid.cells.sum() == 0


def test_generate_tarpit_centroids_central_third():
    for seed in range(10):
        spec = EnvSpec("tarpit", seed=seed)
        grid = generate(spec)
        occ = grid.cells
        assert occ.sum() > 0
        ys, xs = np.nonzero(occ)
        # every connected blob was drawn with its center in the central third;
        # check the occupied mass center falls there too
        cx = (xs.mean() + 0.5) * grid.resolution
        cy = (ys.mean() + 0.5) * grid.resolution
        e = spec.extent
        assert e / 3 - 1.5 <= cx <= 2 * e / 3 + 1.5
        assert e / 3 - 1.5 <= cy <= 2 * e / 3 + 1.5


def test_generate_clears_start_goal_corridor():
    spec = EnvSpec("forest", count_range=(30, 30), seed=3,
                   start=[1.0, 1.0], goal=[9.0, 9.0], clear_radius=1.0)
    grid = generate(spec)
    sdf = compute_sdf(grid)
    d_start, _ = query_dist(sdf, [1.0, 1.0])
    d_goal, _ = query_dist(sdf, [9.0, 9.0])
    assert d_start > 0.5
    assert d_goal > 0.5


def test_generate_infeasible_spec_errors():
    spec = EnvSpec("forest", count_range=(400, 400), size_range=(1.0, 1.0), seed=0)
    with pytest.raises(GenerationError):
        generate(spec)


def test_unknown_distribution_rejected():
    with pytest.raises(ValueError):
        EnvSpec("swamp")


# --- file formats ------------------------------------------------------------

def test_grid_file_round_trip(tmp_path):
    spec = EnvSpec("multi_obs", seed=4)
    grid = generate(spec)
    path = tmp_path / "env.occ"
    save_grid(path, grid)
    back = load_grid(path)
    assert back.width == grid.width and back.height == grid.height
    assert back.resolution == grid.resolution
    assert np.array_equal(back.origin, grid.origin)
    assert np.array_equal(back.cells, grid.cells)


def test_sdf_file_round_trip(tmp_path):
    grid = generate(EnvSpec("forest", seed=5))
    sdf = compute_sdf(grid)
    path = tmp_path / "env.sdf"
    save_sdf(path, sdf)
    back = load_sdf(path)
    assert np.array_equal(back.dist, sdf.dist)
    assert np.array_equal(back.grid.cells, grid.cells)


def test_save_is_byte_deterministic(tmp_path):
    grid = generate(EnvSpec("forest", seed=6))
    p1, p2 = tmp_path / "a.occ", tmp_path / "b.occ"
    save_grid(p1, grid)
    save_grid(p2, grid)
    assert p1.read_bytes() == p2.read_bytes()
