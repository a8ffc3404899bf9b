"""Recording a full fixed-length unroll and querying reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np

from . import tape as T
from .core import LearnedParams, Problem, Trajectory, straight_line_init
from .gp_prior import build_prior
from .planner import PlanContext, PlanResult, objective_flat, step_flat
from .tape import Tape, Tensor


class IncompleteTapeError(RuntimeError):
    """The tape was not recorded through a scalar loss."""


@dataclass
class GradientReport:
    """Gradients of the recorded loss w.r.t. the unroll inputs.

    d_sigma / d_log_sigma are (N, T): column t holds the gradient w.r.t. the
    sigmas fed to iteration t+1. d_qc is present only when the unroll was
    recorded with q_c on the tape.
    """

    d_sigma: np.ndarray
    d_log_sigma: np.ndarray
    d_theta0: np.ndarray
    d_qc: Optional[np.ndarray] = None

    def __post_init__(self):
        arrays = [self.d_sigma, self.d_log_sigma, self.d_theta0]
        if self.d_qc is not None:
            arrays.append(self.d_qc)
        if not all(np.all(np.isfinite(a)) for a in arrays):
            raise ValueError("gradient report contains non-finite entries")


def default_loss(iterates: List[Tensor], ctx: PlanContext) -> Tensor:
    """Half squared norm of the final trajectory; a simple scalar for checks."""
    last = iterates[-1]
    return T.mul(T.tsum(T.mul(last, last)), 0.5)


def record_unroll(problem: Problem, provider: Callable, t_steps: int,
                  loss_fn: Optional[Callable] = None,
                  init: Optional[Trajectory] = None,
                  with_qc_grad: bool = False,
                  step_scale: float = 1.0):
    """Run exactly t_steps planner iterations on a fresh tape.

    provider(iteration, trajectory, theta_tensor) returns the sigmas for that
    iteration, either as LearnedParams / ndarray (recorded as a fresh
    log-sigma leaf) or as a Tensor already living on this tape (e.g. a
    network output). Returns (PlanResult, Tape); the tape's `output` holds
    the recorded scalar loss and `meta` what backward() needs.
    """
    tape = Tape()
    prior = build_prior(problem)
    qc_tensor = tape.leaf(problem.fixed.q_c, "q_c") if with_qc_grad else None
    ctx = PlanContext(problem, prior=prior, q_c=qc_tensor)
    ctx_np = ctx if qc_tensor is None else PlanContext(problem, prior=prior)
    init_traj = init if init is not None else straight_line_init(problem)
    theta = tape.leaf(init_traj.flatten(), "theta0")
    iterates_t = [theta]
    iterates = [init_traj]
    sigma_values = []
    sigma0 = _sigma_value(provider(0, init_traj, theta))
    objectives = [float(objective_flat(theta.value, ctx_np, sigma0))]
    for it in range(1, t_steps + 1):
        out = provider(it, iterates[-1], iterates_t[-1])
        if isinstance(out, Tensor):
            sigma_t = out
        else:
            sigma = _sigma_value(out)
            log_leaf = tape.leaf(np.log(sigma), f"log_sigma_{it}")
            sigma_t = T.exp(log_leaf)
        theta, _ = step_flat(iterates_t[-1], ctx, sigma_t, step_scale)
        iterates_t.append(theta)
        traj = Trajectory.from_flat(theta.value, problem.total_time)
        iterates.append(traj)
        sigma_values.append(np.asarray(T.value_of(sigma_t)))
        objectives.append(float(objective_flat(theta.value, ctx_np, sigma_values[-1])))
    loss_fn = loss_fn if loss_fn is not None else default_loss
    loss = loss_fn(iterates_t, ctx)
    if not isinstance(loss, Tensor) or np.asarray(loss.value).size != 1:
        raise IncompleteTapeError("loss_fn must produce a scalar tensor on the tape")
    tape.output = loss
    tape.meta = {
        "n_states": problem.n_states,
        "t_steps": t_steps,
        "sigma_values": sigma_values,
        "with_qc_grad": with_qc_grad,
        "theta0_dim": 4 * problem.n_states,
    }
    result = PlanResult(final=iterates[-1], iterates=iterates,
                        iterations_used=t_steps, converged=False,
                        objectives=objectives)
    return result, tape


def _sigma_value(out) -> np.ndarray:
    if isinstance(out, LearnedParams):
        return out.sigma_obs
    return np.asarray(T.value_of(out), dtype=float)


def backward(tape: Tape, loss_adjoint: float = 1.0) -> GradientReport:
    """Reverse pass over a recorded unroll; reuses the forward factorizations."""
    if tape.output is None or "t_steps" not in tape.meta:
        raise IncompleteTapeError("tape does not carry a recorded loss")
    grads = tape.backward(tape.output, seed=loss_adjoint)
    n = tape.meta["n_states"]
    t_steps = tape.meta["t_steps"]
    sigma_values = tape.meta["sigma_values"]
    cols_log = []
    cols_sig = []
    for it in range(1, t_steps + 1):
        name = f"log_sigma_{it}"
        if name in tape._leaf_names:
            g_log = tape.leaf_grad(grads, name)
            sigma = sigma_values[it - 1]
            cols_log.append(g_log)
            cols_sig.append(g_log / sigma)
        else:
            cols_log.append(np.zeros(n))
            cols_sig.append(np.zeros(n))
    d_log = np.stack(cols_log, axis=1) if cols_log else np.zeros((n, 0))
    d_sig = np.stack(cols_sig, axis=1) if cols_sig else np.zeros((n, 0))
    d_theta0 = tape.leaf_grad(grads, "theta0")
    d_qc = None
    if tape.meta.get("with_qc_grad"):
        d_qc = tape.leaf_grad(grads, "q_c")
    return GradientReport(d_sigma=d_sig, d_log_sigma=d_log,
                          d_theta0=d_theta0, d_qc=d_qc)


# ---------------------------------------------------------------------------
# Finite-difference comparison harness (shared by tests and the CLI check)
# ---------------------------------------------------------------------------

@dataclass
class GradCheckResult:
    analytic: np.ndarray
    numeric: np.ndarray
    checked: np.ndarray   # bool mask; False where a branch-crossing excluded
    rel_err: np.ndarray

    @property
    def n_checked(self) -> int:
        return int(self.checked.sum())

    @property
    def max_rel_err(self) -> float:
        errs = self.rel_err[self.checked]
        return float(errs.max()) if errs.size else 0.0

    def fraction_within(self, rel_tol: float, abs_tol: float) -> float:
        if self.n_checked == 0:
            return 1.0
        a = self.analytic[self.checked]
        f = self.numeric[self.checked]
        ok = np.abs(a - f) <= abs_tol + rel_tol * np.maximum(np.abs(a), np.abs(f))
        return float(np.mean(ok))


def _relative_errors(analytic, numeric):
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return np.abs(analytic - numeric) / scale


def check_log_sigma_gradients(problem: Problem, log_sigma: np.ndarray,
                              t_steps: int, loss_fn=None, h: float = 1e-4,
                              loss_adjoint: float = 1.0) -> GradCheckResult:
    """Central finite differences in log-sigma, one coordinate at a time.

    Coordinates whose +/- evaluations take different branches (hinge
    activations, interpolation cells, clips) are excluded from the
    comparison; the mask reports which entries were actually checked.
    """
    log_sigma = np.asarray(log_sigma, dtype=float)  # (T, N)

    def make_provider(arr):
        def provider(it, traj, theta_t):
            if it == 0:
                return np.exp(arr[0])
            return np.exp(arr[it - 1])
        return provider

    result, tape = record_unroll(problem, make_provider(log_sigma), t_steps,
                                 loss_fn=loss_fn)
    report = backward(tape, loss_adjoint)
    analytic = report.d_log_sigma * 1.0  # (N, T)
    numeric = np.zeros_like(analytic)
    checked = np.ones_like(analytic, dtype=bool)
    n = problem.n_states
    for t in range(t_steps):
        for i in range(n):
            vals = []
            sigs = []
            for delta in (h, -h):
                pert = log_sigma.copy()
                pert[t, i] += delta
                _, tp = record_unroll(problem, make_provider(pert), t_steps,
                                      loss_fn=loss_fn)
                vals.append(float(tp.output.value) * loss_adjoint)
                sigs.append(tp.branch_signature())
            if sigs[0] != sigs[1]:
                checked[i, t] = False
            numeric[i, t] = (vals[0] - vals[1]) / (2 * h)
    return GradCheckResult(analytic=analytic, numeric=numeric, checked=checked,
                           rel_err=_relative_errors(analytic, numeric))


def check_theta0_gradients(problem: Problem, log_sigma: np.ndarray,
                           t_steps: int, loss_fn=None, h: float = 1e-6,
                           coords: Optional[np.ndarray] = None) -> GradCheckResult:
    """Central finite differences of the loss w.r.t. the initial trajectory."""
    log_sigma = np.asarray(log_sigma, dtype=float)

    def provider(it, traj, theta_t):
        return np.exp(log_sigma[max(it - 1, 0)])

    base_init = straight_line_init(problem)
    theta0 = base_init.flatten()
    result, tape = record_unroll(problem, provider, t_steps, loss_fn=loss_fn)
    report = backward(tape)
    if coords is None:
        coords = np.arange(theta0.size)
    analytic = report.d_theta0[coords]
    numeric = np.zeros_like(analytic)
    checked = np.ones_like(analytic, dtype=bool)
    for k, c in enumerate(coords):
        vals = []
        sigs = []
        for delta in (h, -h):
            pert = theta0.copy()
            pert[c] += delta
            init = Trajectory.from_flat(pert, problem.total_time)
            _, tp = record_unroll(problem, provider, t_steps, loss_fn=loss_fn,
                                  init=init)
            vals.append(float(tp.output.value))
            sigs.append(tp.branch_signature())
        if sigs[0] != sigs[1]:
            checked[k] = False
        numeric[k] = (vals[0] - vals[1]) / (2 * h)
    return GradCheckResult(analytic=analytic, numeric=numeric, checked=checked,
                           rel_err=_relative_errors(analytic, numeric))


def check_qc_gradients(problem: Problem, log_sigma: np.ndarray, t_steps: int,
                       loss_fn=None, h: float = 1e-6) -> GradCheckResult:
    """Central finite differences w.r.t. the prior power spectral density."""
    log_sigma = np.asarray(log_sigma, dtype=float)

    def provider(it, traj, theta_t):
        return np.exp(log_sigma[max(it - 1, 0)])

    from dataclasses import replace

    result, tape = record_unroll(problem, provider, t_steps, loss_fn=loss_fn,
                                 with_qc_grad=True)
    report = backward(tape)
    analytic = report.d_qc.ravel()
    numeric = np.zeros_like(analytic)
    checked = np.ones(analytic.size, dtype=bool)
    base = problem.fixed.q_c
    for k in range(4):
        r, c = divmod(k, 2)
        vals = []
        sigs = []
        for delta in (h, -h):
            qc = base.copy()
            # keep the matrix symmetric under perturbation
            qc[r, c] += delta
            if r != c:
                qc[c, r] += delta
            fixed = replace(problem.fixed, q_c=qc)
            prob = replace(problem, fixed=fixed)
            _, tp = record_unroll(prob, provider, t_steps, loss_fn=loss_fn,
                                  with_qc_grad=True)
            vals.append(float(tp.output.value))
            sigs.append(tp.branch_signature())
        if sigs[0] != sigs[1]:
            checked[k] = False
        numeric[k] = (vals[0] - vals[1]) / (2 * h)
        if r != c:
            # symmetric perturbation sees both off-diagonal cotangents
            analytic_sym = report.d_qc[r, c] + report.d_qc[c, r]
            analytic[k] = analytic_sym
    return GradCheckResult(analytic=analytic, numeric=numeric, checked=checked,
                           rel_err=_relative_errors(analytic, numeric))
