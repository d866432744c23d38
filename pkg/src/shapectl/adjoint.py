"""Trajectory-cost gradients by the generalized adjoint method.

For ``x' = f(t, x; theta)``, ``x(0) = x0`` and

    loss = L(x(T); theta) + int_0^T l(t, x; theta) dt

the costate ``lam`` solves ``lam' = -(lam^T df/dx + dl/dx)`` backward from
``lam(T) = dL/dx(T)`` and

    dloss/dtheta = dL/dtheta + int_0^T (lam^T df/dtheta + dl/dtheta) dt.

The parameter integral rides along the backward solve as an extra state. By
default the state itself is re-integrated backward alongside the costate
(constant memory); ``mode="checkpoint"`` instead reads ``x(t)`` from the
dense output of the forward pass, which is what strongly damped closed loops
need since they cannot be integrated backward accurately.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from .ode import SolverConfig, SolverError, Trajectory, dopri5, dopri5_fixed, rms_norm

Vector = np.ndarray


class AdjointDivergence(SolverError):
    """Backward reconstruction of the state drifted away from the initial condition."""


@dataclass(frozen=True)
class AdjointProblem:
    """Differentiable trajectory cost.

    ``field(t, x, theta)`` returns ``x'``. ``adjoint_terms(t, x, theta, lam)``
    returns ``(x', lam^T df/dx + dl/dx, lam^T df/dtheta + dl/dtheta)``.
    ``monitor`` (optional) is integrated along the forward pass for reporting
    and is never differentiated. ``forward_terms(t, x, theta)``, when given,
    returns ``(x', l, monitor)`` in one call so shared work is done once.
    """

    field: Callable
    adjoint_terms: Callable
    terminal: Callable
    terminal_grad: Callable
    theta: Vector
    horizon: float
    running: Optional[Callable] = None
    monitor: Optional[Callable] = None
    solver: SolverConfig = SolverConfig()
    forward_terms: Optional[Callable] = None

    @property
    def n_params(self) -> int:
        return int(np.asarray(self.theta).size)

    def with_theta(self, theta) -> "AdjointProblem":
        return replace(self, theta=np.asarray(theta, dtype=float))


@dataclass
class LossResult:
    value: float
    terminal: float
    running: float
    monitor: float
    trajectory: Trajectory

    @property
    def final_state(self) -> Vector:
        return self.trajectory.final


@dataclass
class GradResult:
    loss: LossResult
    grad: Vector
    x0_reconstructed: Optional[Vector] = None
    backward_steps: int = 0


def _forward(problem: AdjointProblem, x0, dense: bool, record: bool, solver: Optional[SolverConfig] = None,
             grid=None):
    theta = problem.theta
    x0 = np.asarray(x0, dtype=float).ravel()
    n = x0.size
    extra = (problem.running is not None) + (problem.monitor is not None)

    def rhs(t, z):
        x = z[:n]
        if problem.forward_terms is not None:
            dx, l, m = problem.forward_terms(t, x, theta)
            parts = [dx]
            if problem.running is not None:
                parts.append([l])
            if problem.monitor is not None:
                parts.append([m])
            return np.concatenate(parts)
        dx = problem.field(t, x, theta)
        if not extra:
            return dx
        parts = [dx]
        if problem.running is not None:
            parts.append([problem.running(t, x, theta)])
        if problem.monitor is not None:
            parts.append([problem.monitor(t, x, theta)])
        return np.concatenate(parts)

    z0 = np.concatenate([x0, np.zeros(extra)])
    norm = _grouped_norm([n, extra]) if extra else None
    if grid is None:
        traj = dopri5(rhs, z0, (0.0, problem.horizon), solver or problem.solver, dense=dense, norm=norm, record=record)
    else:
        traj = dopri5_fixed(rhs, z0, grid)
    zT = traj.final
    xT = zT[:n]
    run = float(zT[n]) if problem.running is not None else 0.0
    mon = float(zT[-1]) if problem.monitor is not None else 0.0
    term = float(problem.terminal(xT, theta))
    return LossResult(term + run, term, run, mon, traj), n


def _grouped_norm(sizes):
    """Largest RMS over consecutive blocks, so a large block cannot drown a small one."""
    bounds = np.cumsum([0, *sizes])
    blocks = [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]

    def norm(v):
        return max(rms_norm(v[a:b]) for a, b in blocks)

    return norm


def loss(problem: AdjointProblem, x0, solver: Optional[SolverConfig] = None) -> tuple:
    """Forward solve; returns ``(loss value, LossResult)``."""
    res, _ = _forward(problem, x0, dense=False, record=True, solver=solver)
    return res.value, res


def grad(problem: AdjointProblem, x0, mode: str = "backsolve", guard: float = 1e-3) -> GradResult:
    """Loss and its exact parameter gradient.

    ``mode`` is ``"backsolve"`` (re-integrate the state backward, O(1)
    memory) or ``"checkpoint"`` (interpolate the stored forward solution).
    In backsolve mode the reconstructed ``x(0)`` must stay within ``guard``
    of ``x0`` in the norm ``rms(|dx| / (1 + |x0|))``, otherwise
    ``AdjointDivergence`` is raised.
    """
    if mode not in ("backsolve", "checkpoint"):
        raise ValueError(f"unknown adjoint mode {mode!r}")
    theta = problem.theta
    x0 = np.asarray(x0, dtype=float).ravel()
    fwd, n = _forward(problem, x0, dense=(mode == "checkpoint"), record=(mode == "checkpoint"))
    traj = fwd.trajectory
    xT = traj.final[:n]
    lam_T, dL_dtheta = problem.terminal_grad(xT, theta)
    lam_T = np.asarray(lam_T, dtype=float).ravel()
    p = problem.n_params

    if mode == "backsolve":
        def rhs(t, z):
            x, lam = z[:n], z[n:2 * n]
            dx, ax, ath = problem.adjoint_terms(t, x, theta, lam)
            return np.concatenate([dx, -ax, -ath])

        z_T = np.concatenate([xT, lam_T, np.zeros(p)])
        sizes = [n, n, p]
    else:
        def rhs(t, z):
            x = traj(t)[:n]
            lam = z[:n]
            _, ax, ath = problem.adjoint_terms(t, x, theta, lam)
            return np.concatenate([-ax, -ath])

        z_T = np.concatenate([lam_T, np.zeros(p)])
        sizes = [n, p]

    back = dopri5(rhs, z_T, (problem.horizon, 0.0), problem.solver, norm=_grouped_norm(sizes), record=False)
    z0 = back.final
    g = np.asarray(dL_dtheta, dtype=float) + z0[-p:]
    x_rec = None
    if mode == "backsolve":
        x_rec = z0[:n]
        drift = rms_norm(np.abs(x_rec - x0) / (1.0 + np.abs(x0)))
        if not math.isfinite(drift) or drift > guard:
            raise AdjointDivergence(f"backward state reconstruction drifted by {drift:.3g}")
    return GradResult(fwd, g, x_rec, back.n_steps)


def loss_on_grid(problem: AdjointProblem, x0, grid) -> tuple:
    """Loss from fixed fifth-order steps on ``grid`` instead of an adaptive solve."""
    res, _ = _forward(problem, x0, dense=False, record=True, grid=np.asarray(grid, dtype=float))
    return res.value, res


def fd_grad(problem: AdjointProblem, x0, h: float = 1e-5, indices=None,
            solver: Optional[SolverConfig] = None, frozen_grid: bool = False) -> Vector:
    """Central differences of the loss, one independent forward solve per evaluation.

    ``indices`` restricts the differences to a subset of parameters; the
    result then has one entry per index. With ``frozen_grid`` every
    perturbed solve replays the step sequence accepted by the nominal
    adaptive solve, so step-size switching does not leak into the quotient.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    theta = np.asarray(problem.theta, dtype=float)
    idx = np.arange(theta.size) if indices is None else np.asarray(indices, dtype=int)
    if frozen_grid:
        grid = loss(problem, x0, solver)[1].trajectory.times

        def evaluate(th):
            return loss_on_grid(problem.with_theta(th), x0, grid)[0]
    else:
        def evaluate(th):
            return loss(problem.with_theta(th), x0, solver)[0]
    out = np.empty(len(idx))
    for j, i in enumerate(idx):
        tp = theta.copy()
        tp[i] += h
        tm = theta.copy()
        tm[i] -= h
        out[j] = (evaluate(tp) - evaluate(tm)) / (2 * h)
    return out


def fd_directional(problem: AdjointProblem, x0, direction, h: float = 1e-5,
                   solver: Optional[SolverConfig] = None, frozen_grid: bool = False) -> float:
    """Central difference of the loss along one parameter direction."""
    theta = np.asarray(problem.theta, dtype=float)
    d = np.asarray(direction, dtype=float)
    if frozen_grid:
        grid = loss(problem, x0, solver)[1].trajectory.times
        lp = loss_on_grid(problem.with_theta(theta + h * d), x0, grid)[0]
        lm = loss_on_grid(problem.with_theta(theta - h * d), x0, grid)[0]
    else:
        lp = loss(problem.with_theta(theta + h * d), x0, solver)[0]
        lm = loss(problem.with_theta(theta - h * d), x0, solver)[0]
    return (lp - lm) / (2 * h)
