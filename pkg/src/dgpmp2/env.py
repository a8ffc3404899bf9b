"""Occupancy grids, Euclidean signed distance fields, and environment generators."""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np


class GenerationError(RuntimeError):
    """Raised when an environment spec cannot be realized."""


@dataclass(frozen=True)
class OccupancyGrid:
    """Row-major binary occupancy; cells[j, i] covers column i (x), row j (y).

    origin is the world coordinate of the center of cell (0, 0).
    """

    width: int
    height: int
    resolution: float
    origin: np.ndarray
    cells: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float).reshape(2))
        cells = np.asarray(self.cells, dtype=np.uint8).reshape(self.height, self.width)
        object.__setattr__(self, "cells", cells)
        if self.width <= 0 or self.height <= 0:
            raise ValueError("grid must be non-empty")
        if not self.resolution > 0:
            raise ValueError("resolution must be positive")
        if cells.size != self.width * self.height:
            raise ValueError("cell count must equal width*height")

    @property
    def extent(self) -> Tuple[np.ndarray, np.ndarray]:
        """(lower, upper) world corners of the grid footprint (cell edges)."""
        lo = self.origin - 0.5 * self.resolution
        hi = self.origin + (np.array([self.width, self.height]) - 0.5) * self.resolution
        return lo, hi

    @property
    def diagonal(self) -> float:
        return float(np.hypot(self.width, self.height) * self.resolution)

    def contains(self, p) -> bool:
        lo, hi = self.extent
        p = np.asarray(p, dtype=float)
        return bool(np.all(p >= lo) and np.all(p <= hi))

    def world_to_cell(self, p) -> Tuple[int, int]:
        """Nearest cell index (col, row) for a world point; no bounds check."""
        p = np.asarray(p, dtype=float)
        ij = np.rint((p - self.origin) / self.resolution).astype(int)
        return int(ij[0]), int(ij[1])


@dataclass(frozen=True)
class Sdf:
    """Signed Euclidean distances (meters) on the grid geometry of `grid`.

    Positive in free space, negative inside obstacles; distances are measured
    between cell centers. An obstacle-free grid stores +diagonal everywhere so
    downstream hinge costs are identically zero; an all-occupied grid stores
    -diagonal symmetrically.
    """

    grid: OccupancyGrid
    dist: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.dist, dtype=float).reshape(self.grid.height, self.grid.width)
        object.__setattr__(self, "dist", d)


def _axis_dist_sq(occ: np.ndarray) -> np.ndarray:
    """Per column j and row x: squared row-distance to the nearest occupied
    cell in column j (np.inf where the column is empty)."""
    h, w = occ.shape
    rows = np.broadcast_to(np.arange(h, dtype=float)[:, None], occ.shape)
    big = np.inf
    # nearest occupied row at-or-above / at-or-below each row, per column
    up = np.maximum.accumulate(np.where(occ > 0, rows, -np.inf), axis=0)
    down = np.flip(np.minimum.accumulate(np.flip(np.where(occ > 0, rows, np.inf), axis=0), axis=0), axis=0)
    d_up = np.where(np.isfinite(up), rows - up, big)
    d_down = np.where(np.isfinite(down), down - rows, big)
    d = np.minimum(d_up, d_down)
    return np.where(np.isfinite(d), d * d, np.inf)


def _euclidean_dist(occ: np.ndarray, resolution: float) -> np.ndarray:
    """Exact center-to-center Euclidean distance to the nearest cell with
    occ > 0; np.inf where no such cell exists.

    Two-pass construction: exact per-column vertical distances, then for each
    target cell the minimum over columns of (vertical^2 + horizontal^2). The
    second pass is an O(w) reduction per cell, vectorized per row.
    """
    h, w = occ.shape
    g2 = _axis_dist_sq(occ)  # (h, w) squared vertical distances per column
    cols = np.arange(w, dtype=float)
    dx2 = (cols[:, None] - cols[None, :]) ** 2  # (w_target, w_source)
    out = np.empty((h, w))
    for y in range(h):
        out[y] = np.min(g2[y][None, :] + dx2, axis=1)
    return np.sqrt(out) * resolution


def compute_sdf(grid: OccupancyGrid) -> Sdf:
    """Exact signed Euclidean distance transform of the occupancy grid."""
    occ = grid.cells
    n_occ = int(occ.sum())
    diag = grid.diagonal
    if n_occ == 0:
        return Sdf(grid, np.full(occ.shape, diag))
    if n_occ == occ.size:
        return Sdf(grid, np.full(occ.shape, -diag))
    d_to_occ = _euclidean_dist(occ, grid.resolution)
    d_to_free = _euclidean_dist(1 - occ, grid.resolution)
    signed = np.where(occ > 0, -d_to_free, d_to_occ)
    return Sdf(grid, signed)


# ---------------------------------------------------------------------------
# Interpolated queries
# ---------------------------------------------------------------------------

def _interp_setup(sdf: Sdf, points: np.ndarray):
    """Common bilinear-cell lookup. Returns corner values, in-cell fractions,
    base indices, per-axis clamp flags, and the inside-extent flag."""
    g = sdf.grid
    p = np.asarray(points, dtype=float).reshape(-1, 2)
    u = (p[:, 0] - g.origin[0]) / g.resolution
    v = (p[:, 1] - g.origin[1]) / g.resolution
    clamped_x = (u < 0.0) | (u > g.width - 1.0)
    clamped_y = (v < 0.0) | (v > g.height - 1.0)
    lo, hi = g.extent
    inside = np.all((p >= lo) & (p <= hi), axis=1)
    u = np.clip(u, 0.0, g.width - 1.0)
    v = np.clip(v, 0.0, g.height - 1.0)
    i0 = np.minimum(u.astype(int), g.width - 2)
    j0 = np.minimum(v.astype(int), g.height - 2)
    fx = u - i0
    fy = v - j0
    d = sdf.dist
    d00 = d[j0, i0]
    d10 = d[j0, i0 + 1]
    d01 = d[j0 + 1, i0]
    d11 = d[j0 + 1, i0 + 1]
    return d00, d10, d01, d11, fx, fy, i0, j0, clamped_x, clamped_y, inside


def interp_distance(sdf: Sdf, points) -> Tuple[np.ndarray, np.ndarray]:
    """Bilinear distance at world points (M, 2) -> (values (M,), inside (M,)).

    Points beyond the grid of cell centers are clamped, which makes the
    interpolant constant in the clamped direction.
    """
    d00, d10, d01, d11, fx, fy, *_, inside = _interp_setup(sdf, points)
    top = d00 * (1 - fx) + d10 * fx
    bot = d01 * (1 - fx) + d11 * fx
    return top * (1 - fy) + bot * fy, inside


def interp_gradient(sdf: Sdf, points) -> Tuple[np.ndarray, np.ndarray]:
    """Analytic gradient of the (clamped) bilinear interpolant, (M, 2)."""
    d00, d10, d01, d11, fx, fy, i0, j0, cx, cy, inside = _interp_setup(sdf, points)
    res = sdf.grid.resolution
    gx = ((d10 - d00) * (1 - fy) + (d11 - d01) * fy) / res
    gy = ((d01 - d00) * (1 - fx) + (d11 - d10) * fx) / res
    gx = np.where(cx, 0.0, gx)
    gy = np.where(cy, 0.0, gy)
    return np.stack([gx, gy], axis=1), inside


def interp_hessian(sdf: Sdf, points) -> np.ndarray:
    """Second derivative of the interpolant: only the cross term is nonzero
    inside a cell; zero in clamped directions. Returns (M, 2, 2)."""
    d00, d10, d01, d11, fx, fy, i0, j0, cx, cy, _ = _interp_setup(sdf, points)
    res = sdf.grid.resolution
    c = (d11 - d10 - d01 + d00) / (res * res)
    c = np.where(cx | cy, 0.0, c)
    m = np.zeros((c.shape[0], 2, 2))
    m[:, 0, 1] = c
    m[:, 1, 0] = c
    return m


def interp_cell_signature(sdf: Sdf, points) -> np.ndarray:
    """Integer signature of which bilinear cell (and clamp branch) each point
    falls in; used to detect non-smooth crossings between two evaluations."""
    *_, i0, j0, cx, cy, _ = _interp_setup(sdf, points)
    return np.stack([i0, j0, cx.astype(int), cy.astype(int)], axis=1)


def query_dist(sdf: Sdf, p):
    """Signed distance at a world point (or (M, 2) batch).

    Returns (distance, inside_extent); out-of-extent queries clamp to the
    boundary value and report inside_extent = False.
    """
    p = np.asarray(p, dtype=float)
    single = p.ndim == 1
    d, inside = interp_distance(sdf, p.reshape(-1, 2))
    if single:
        return float(d[0]), bool(inside[0])
    return d, inside


def query_grad(sdf: Sdf, p):
    """Gradient of query_dist at a world point (or batch); same clamping."""
    p = np.asarray(p, dtype=float)
    single = p.ndim == 1
    g, inside = interp_gradient(sdf, p.reshape(-1, 2))
    if single:
        return g[0], bool(inside[0])
    return g, inside


# Tape-aware query primitives. The value op backpropagates through the
# interpolant gradient; the gradient op through its (cross-term) Hessian, so
# the jacobian's dependence on the trajectory stays differentiable.

def sdf_distance(sdf: Sdf, points):
    """Batched interpolated distance, recordable on a tape. (M, 2) -> (M,)."""
    from . import tape as T
    if not T.is_tensor(points):
        return interp_distance(sdf, points)[0]
    tp = points.tape
    tp.note_branch(interp_cell_signature(sdf, points.value))

    def fwd(p):
        return interp_distance(sdf, p)[0]

    def vjp(g, v, o):
        grad, _ = interp_gradient(sdf, v[0])
        return (g[:, None] * grad,)

    return tp.record("sdf_distance", (points,), fwd, vjp)


def sdf_distance_gradient(sdf: Sdf, points):
    """Batched interpolant gradient, recordable on a tape. (M, 2) -> (M, 2)."""
    from . import tape as T
    if not T.is_tensor(points):
        return interp_gradient(sdf, points)[0]
    tp = points.tape
    tp.note_branch(interp_cell_signature(sdf, points.value))

    def fwd(p):
        return interp_gradient(sdf, p)[0]

    def vjp(g, v, o):
        hess = interp_hessian(sdf, v[0])
        return (np.einsum("nij,nj->ni", hess, g),)

    return tp.record("sdf_gradient", (points,), fwd, vjp)


# ---------------------------------------------------------------------------
# Random environment generators
# ---------------------------------------------------------------------------

DISTRIBUTIONS = ("forest", "tarpit", "multi_obs")


@dataclass(frozen=True)
class EnvSpec:
    """Declarative description of a random environment draw.

    Obstacles are axis-aligned squares or discs; sizes are edge lengths /
    diameters in meters. start/goal, when given, get a free corridor disc of
    clear_radius carved around them after rasterization.
    """

    distribution: str
    extent: float = 10.0
    cells: int = 64
    count_range: Tuple[int, int] = None
    size_range: Tuple[float, float] = None
    seed: int = 0
    start: Optional[np.ndarray] = None
    goal: Optional[np.ndarray] = None
    clear_radius: float = 0.9

    def __post_init__(self):
        if self.distribution not in DISTRIBUTIONS:
            raise ValueError(f"unknown distribution {self.distribution!r}")
        defaults = {
            "forest": ((15, 30), (0.3, 0.6)),
            "tarpit": ((6, 8), (1.6, 2.4)),
            "multi_obs": ((5, 8), (0.8, 1.4)),
        }[self.distribution]
        if self.count_range is None:
            object.__setattr__(self, "count_range", defaults[0])
        if self.size_range is None:
            object.__setattr__(self, "size_range", defaults[1])
        for name in ("start", "goal"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, np.asarray(v, dtype=float).reshape(2))


def _rasterize_obstacles(spec: EnvSpec, centers, sizes, shapes,
                         free_band=None) -> np.ndarray:
    n = spec.cells
    res = spec.extent / n
    ax = (np.arange(n) + 0.5) * res
    xx, yy = np.meshgrid(ax, ax)
    occ = np.zeros((n, n), dtype=np.uint8)
    for (cx, cy), s, shape in zip(centers, sizes, shapes):
        half = 0.5 * s
        if shape == 0:  # square
            mask = (np.abs(xx - cx) <= half) & (np.abs(yy - cy) <= half)
        else:  # disc
            mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= half * half
        occ[mask] = 1
    if free_band is not None:
        y0, y1 = free_band
        occ[(yy >= y0) & (yy <= y1)] = 0
    for p in (spec.start, spec.goal):
        if p is not None:
            mask = (xx - p[0]) ** 2 + (yy - p[1]) ** 2 <= spec.clear_radius ** 2
            occ[mask] = 0
    return occ


def generate(spec: EnvSpec) -> OccupancyGrid:
    """Draw an occupancy grid from the spec's distribution, deterministically
    in (spec, seed)."""
    rng = np.random.default_rng(spec.seed)
    lo_n, hi_n = spec.count_range
    count = int(rng.integers(lo_n, hi_n + 1)) if hi_n > lo_n else int(lo_n)
    sizes = rng.uniform(spec.size_range[0], spec.size_range[1], size=count)
    budget = 0.6 * spec.extent ** 2
    if np.sum(sizes ** 2) > budget:
        raise GenerationError("requested obstacle area exceeds the free-space budget")
    e = spec.extent
    free_band = None
    if spec.distribution == "tarpit":
        # two lumpy half-clusters around a narrow free channel that runs
        # parallel to, but offset from, the nominal crossing line: squeezing
        # through the channel is the tempting local minimum, going around the
        # whole clump is the good homotopy class
        lo, hi = e / 3.0, 2.0 * e / 3.0
        if spec.start is not None and spec.goal is not None:
            mid = 0.5 * (spec.start + spec.goal)
            liney = float(np.clip(mid[1], lo + 1.1, hi - 1.1))
            cx = float(np.clip(mid[0] + rng.uniform(-0.6, 0.6), lo + 0.8, hi - 0.8))
        else:
            liney = rng.uniform(lo + 1.1, hi - 1.1)
            cx = rng.uniform(lo + 0.8, hi - 0.8)
        chan_w = 0.75
        chan_y = liney + rng.choice([-1.0, 1.0]) * rng.uniform(0.6, 1.0)
        free_band = (chan_y - chan_w / 2, chan_y + chan_w / 2)
        centers = np.empty((count, 2))
        halves = np.array_split(np.arange(count), 2)
        for sgn, idx in zip((+1.0, -1.0), halves):
            base = np.array([cx, chan_y + sgn * (chan_w / 2)])
            for k in idx:
                off = rng.normal(scale=0.8, size=2).clip(-1.4, 1.4)
                off[1] = sgn * abs(off[1]) * 0.9
                centers[k] = base + off
        centers = np.clip(centers, lo, hi)
        shapes = np.ones(count, dtype=int)  # discs
    elif spec.distribution == "forest":
        margin = 0.5
        centers = rng.uniform(margin, e - margin, size=(count, 2))
    else:  # multi_obs
        margin = 1.0
        centers = rng.uniform(margin, e - margin, size=(count, 2))
    if spec.distribution != "tarpit":
        shapes = rng.integers(0, 2, size=count)
    occ = _rasterize_obstacles(spec, centers, sizes, shapes, free_band)
    res = e / spec.cells
    return OccupancyGrid(spec.cells, spec.cells, res,
                         origin=np.array([res / 2.0, res / 2.0]), cells=occ)


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

def _write_header(fh, tag: str, grid: OccupancyGrid) -> None:
    fh.write(f"{tag} {grid.width} {grid.height} {float(grid.resolution)!r} "
             f"{float(grid.origin[0])!r} {float(grid.origin[1])!r}\n".encode("ascii"))


def _read_header(fh, tag: str):
    line = bytearray()
    while True:
        ch = fh.read(1)
        if not ch or ch == b"\n":
            break
        line.extend(ch)
    parts = line.decode("ascii").split()
    if len(parts) != 6 or parts[0] != tag:
        raise ValueError(f"bad {tag} header: {line!r}")
    w, h = int(parts[1]), int(parts[2])
    res, ox, oy = float(parts[3]), float(parts[4]), float(parts[5])
    return w, h, res, np.array([ox, oy])


def save_grid(path, grid: OccupancyGrid) -> None:
    with open(path, "wb") as fh:
        _write_header(fh, "OCC", grid)
        fh.write(grid.cells.astype(np.uint8).tobytes())


def load_grid(path) -> OccupancyGrid:
    with open(path, "rb") as fh:
        w, h, res, origin = _read_header(fh, "OCC")
        data = np.frombuffer(fh.read(w * h), dtype=np.uint8)
    return OccupancyGrid(w, h, res, origin, data.reshape(h, w))


def save_sdf(path, sdf: Sdf) -> None:
    with open(path, "wb") as fh:
        _write_header(fh, "SDF", sdf.grid)
        fh.write(sdf.grid.cells.astype(np.uint8).tobytes())
        fh.write(sdf.dist.astype("<f8").tobytes())


def load_sdf(path) -> Sdf:
    with open(path, "rb") as fh:
        w, h, res, origin = _read_header(fh, "SDF")
        cells = np.frombuffer(fh.read(w * h), dtype=np.uint8)
        dist = np.frombuffer(fh.read(w * h * 8), dtype="<f8")
    grid = OccupancyGrid(w, h, res, origin, cells.reshape(h, w))
    return Sdf(grid, dist.reshape(h, w))
