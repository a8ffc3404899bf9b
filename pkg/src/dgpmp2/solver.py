"""Block-tridiagonal normal equations: assembly and Cholesky solve."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tape as T
from .core import Trajectory
from .factors import LikelihoodStack
from .gp_prior import PriorModel, prior_const_blocks, prior_rhs_rows


class SingularSystemError(RuntimeError):
    """Cholesky hit a non-positive pivot; `block` is the failing state index."""

    def __init__(self, block: int):
        super().__init__(f"system not positive definite at block {block}")
        self.block = block


@dataclass(frozen=True)
class LinearizedSystem:
    """Symmetric block-tridiagonal system: N diagonal 4x4 blocks, N-1
    sub-diagonal blocks (the super-diagonal is their transpose), rhs 4N."""

    diag: np.ndarray      # (N, 4, 4)
    offdiag: np.ndarray   # (N-1, 4, 4), block (i+1, i)
    rhs: np.ndarray       # (4N,)

    def __post_init__(self):
        n = self.diag.shape[0]
        if self.diag.shape != (n, 4, 4):
            raise ValueError("diag blocks must be (N, 4, 4)")
        if self.offdiag.shape != (n - 1, 4, 4):
            raise ValueError("offdiag blocks must be (N-1, 4, 4)")
        if self.rhs.shape != (4 * n,):
            raise ValueError("rhs length must be 4N")

    @property
    def n_blocks(self) -> int:
        return self.diag.shape[0]

    def dense(self) -> np.ndarray:
        n = self.n_blocks
        m = np.zeros((4 * n, 4 * n))
        for i in range(n):
            m[4 * i:4 * i + 4, 4 * i:4 * i + 4] = self.diag[i]
        for i in range(n - 1):
            m[4 * i + 4:4 * i + 8, 4 * i:4 * i + 4] = self.offdiag[i]
            m[4 * i:4 * i + 4, 4 * i + 4:4 * i + 8] = self.offdiag[i].T
        return m


class OpCounter:
    """Counts 4x4 block operations inside the factorization/solve."""

    def __init__(self):
        self.count = 0

    def tick(self, n: int = 1):
        self.count += n


def bt_factor(diag: np.ndarray, offdiag: np.ndarray,
              counter: Optional[OpCounter] = None):
    """Block Cholesky M = L L^T: returns per-block inverse Cholesky factors
    and the sub-diagonal factors E_i = Off_i C_i^-T."""
    n = diag.shape[0]
    c_inv = np.empty_like(diag)
    e = np.empty_like(offdiag) if n > 1 else np.zeros((0, 4, 4))
    s = diag[0]
    for i in range(n):
        try:
            c = np.linalg.cholesky(s)
        except np.linalg.LinAlgError:
            raise SingularSystemError(i) from None
        if not np.all(np.isfinite(c)):
            raise SingularSystemError(i)
        c_inv[i] = np.linalg.inv(c)
        if counter is not None:
            counter.tick(2)
        if i < n - 1:
            e[i] = offdiag[i] @ c_inv[i].T
            s = diag[i + 1] - e[i] @ e[i].T
            if counter is not None:
                counter.tick(2)
    return c_inv, e


def bt_apply(c_inv: np.ndarray, e: np.ndarray, rhs: np.ndarray,
             counter: Optional[OpCounter] = None) -> np.ndarray:
    """Solve M x = rhs given the factorization from bt_factor."""
    n = c_inv.shape[0]
    b = rhs.reshape(n, 4)
    y = np.empty_like(b)
    y[0] = c_inv[0] @ b[0]
    for i in range(1, n):
        y[i] = c_inv[i] @ (b[i] - e[i - 1] @ y[i - 1])
        if counter is not None:
            counter.tick(2)
    x = np.empty_like(b)
    x[n - 1] = c_inv[n - 1].T @ y[n - 1]
    for i in range(n - 2, -1, -1):
        x[i] = c_inv[i].T @ (y[i] - e[i].T @ x[i + 1])
        if counter is not None:
            counter.tick(2)
    return x.reshape(-1)


def solve(system: LinearizedSystem, counter: Optional[OpCounter] = None) -> np.ndarray:
    """Direct O(N) block-tridiagonal Cholesky solve."""
    c_inv, e = bt_factor(system.diag, system.offdiag, counter)
    return bt_apply(c_inv, e, system.rhs, counter)


def solve_blocks(diag, offdiag, rhs):
    """Tape-recordable solve on raw block arrays.

    Adjoint contract for x = M^-1 b with symmetric M: rhs_bar = M^-1 g (the
    forward factorization is reused), diag_bar_i = -outer(rhs_bar_i, x_i),
    offdiag_bar_i = -(outer(rhs_bar_{i+1}, x_i) + outer(x_{i+1}, rhs_bar_i)).
    """
    tp = T.tape_of(diag, offdiag, rhs)
    if tp is None:
        c_inv, e = bt_factor(diag, offdiag)
        return bt_apply(c_inv, e, rhs)

    cache = {}

    def fwd(d, o, b):
        c_inv, e = bt_factor(d, o)
        cache["fact"] = (c_inv, e)
        return bt_apply(c_inv, e, b)

    def vjp(g, vals, out):
        c_inv, e = cache["fact"]
        bbar = bt_apply(c_inv, e, g)
        xb = out.reshape(-1, 4)
        bb = bbar.reshape(-1, 4)
        d_diag = -np.einsum("ni,nj->nij", bb, xb)
        d_off = -(np.einsum("ni,nj->nij", bb[1:], xb[:-1])
                  + np.einsum("ni,nj->nij", xb[1:], bb[:-1]))
        return d_diag, d_off, bbar

    return tp.record("bt_solve", (diag, offdiag, rhs), fwd, vjp)


def assemble(prior: PriorModel, traj: Trajectory,
             likelihood: LikelihoodStack) -> LinearizedSystem:
    """Form the normal equations at traj: prior information plus J^T W J of
    the stacked likelihood rows, with rhs from the same factors."""
    n = prior.n_states
    theta = traj.flatten()
    if likelihood.jacobian.shape != (likelihood.n_rows, 4 * n):
        raise ValueError("likelihood jacobian has inconsistent dimensions")
    diag, offdiag = prior_const_blocks(prior)
    diag = diag.copy()
    rhs = prior_rhs_rows(prior, theta).reshape(-1)
    jw = likelihood.jacobian * likelihood.weights[:, None]
    rhs = rhs - jw.T @ likelihood.h
    info = jw.T @ likelihood.jacobian  # block-diagonal by construction
    for i in range(n):
        diag[i] += info[4 * i:4 * i + 4, 4 * i:4 * i + 4]
    return LinearizedSystem(diag, offdiag, rhs)
