"""Batched closed-loop dynamics with the products the adjoint solver needs.

A batch of ``N`` trajectories of a fully actuated mechanical system with
constant inertia ``M``, damping ``D`` and input matrix ``B`` is integrated as
one stacked state of shape ``(N, 2 n_q)`` (flattened for the solver):

    q' = M^-1 p
    p' = -grad V(q) + D M^-1 p + B u(t, q, p)

``u`` comes from either the learned controller or the PD baseline. Every
system exposes ``control``, ``rhs`` and ``vjp``; the latter returns the state
and parameter cotangents for a costate ``lam`` and an extra cotangent ``cu``
on the control (from a running cost that depends on ``u``).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import neural
from .adjoint import AdjointProblem, _grouped_norm
from .controller import OesController
from .ode import SolverConfig, Trajectory, dopri5
from .ph import ContractError, MechanicalPH


def _plant_arrays(plant: MechanicalPH):
    if not plant.constant_inertia:
        raise ContractError("batched closed loops need a constant inertia matrix")
    M_inv = plant.M_inv(np.zeros(plant.n_q))
    B = plant.B
    return M_inv, B, np.linalg.inv(B), plant.D


def _grad_v(plant: MechanicalPH, Q):
    return np.asarray(plant.grad_V(Q), dtype=float).reshape(Q.shape)


def _hess_v_times(plant: MechanicalPH, Q, c):
    """Rows of ``Hess V(q_n) @ c_n``."""
    if plant.hess_V is None:
        raise ContractError("plant potential Hessian is required for adjoint gradients")
    H = np.asarray(plant.hess_V(Q), dtype=float)
    if H.shape == Q.shape:  # elementwise (diagonal) Hessian
        return H * c
    return np.einsum("nij,nj->ni", H.reshape(Q.shape[0], Q.shape[1], Q.shape[1]), c)


@dataclass
class OesLoop:
    """Learned energy shaping plus damping injection, batched over rows."""

    controller: OesController
    q_star: Optional[np.ndarray] = None

    def __post_init__(self):
        c = self.controller
        self.n = c.plant.n_q
        self.M_inv, self.B, self.B_inv, self.D = _plant_arrays(c.plant)
        self.n_v = c.potential.n_params
        if c.setpoint_input and self.q_star is None:
            raise ContractError("set-point conditioned controller needs q_star rows")
        if self.q_star is not None:
            self.q_star = np.asarray(self.q_star, dtype=float).reshape(-1, self.n)

    @property
    def n_params(self) -> int:
        return self.controller.n_params

    def _split(self, X):
        X = np.asarray(X, dtype=float).reshape(-1, 2 * self.n)
        return X[:, : self.n], X[:, self.n:]

    def _inputs(self, t, Q, P):
        c = self.controller
        qs = self.q_star if c.setpoint_input else None
        return c.potential_input(Q, qs), c.gain_input(t, Q, P, qs)

    def control(self, t, X, theta) -> np.ndarray:
        c = self.controller
        Q, P = self._split(X)
        zv, zk = self._inputs(t, Q, P)
        tv, tk = theta[: self.n_v], theta[self.n_v:]
        gv = neural.input_gradient(c.potential, tv, zv)[:, : self.n]
        k = neural.forward(c.gain, tk, zk)
        y = (P @ self.M_inv.T) @ self.B.T
        return -gv @ self.B_inv.T - k * y

    def rhs(self, t, X, theta) -> np.ndarray:
        return self.rhs_and_control(t, X, theta)[0]

    def rhs_and_control(self, t, X, theta):
        Q, P = self._split(X)
        u = self.control(t, X, theta)
        v = P @ self.M_inv.T
        dP = -_grad_v(self.controller.plant, Q) + v @ self.D.T + u @ self.B.T
        return np.hstack([v, dP]).ravel(), u

    def vjp(self, t, X, theta, lam, cu=None):
        """``(x', u, lam^T df/dx + cu^T du/dx, lam^T df/dtheta + cu^T du/dtheta)``."""
        c = self.controller
        n = self.n
        Q, P = self._split(X)
        lam = np.asarray(lam, dtype=float).reshape(-1, 2 * n)
        lq, lp = lam[:, :n], lam[:, n:]
        zv, zk = self._inputs(t, Q, P)
        tv, tk = theta[: self.n_v], theta[self.n_v:]

        v = P @ self.M_inv.T
        y = v @ self.B.T
        c_tot = lp @ self.B
        if cu is not None:
            c_tot = c_tot + cu
        c_grad = -c_tot @ self.B_inv          # cotangent on grad_q V*
        direction = np.zeros_like(zv)
        direction[:, :n] = c_grad
        _, gv_full, hvp, g_theta_v = neural.gradient_terms(c.potential, tv, zv, direction)
        gv = gv_full[:, :n]
        k = neural.forward(c.gain, tk, zk)
        zbar, g_theta_k = neural.vjp(c.gain, tk, zk, -c_tot * y)
        off = 1 if c.time_input else 0

        u = -gv @ self.B_inv.T - k * y
        dP = -_grad_v(c.plant, Q) + v @ self.D.T + u @ self.B.T
        dx = np.hstack([v, dP]).ravel()

        cv = lq + lp @ self.D + (-c_tot * k) @ self.B
        ax_q = -_hess_v_times(c.plant, Q, lp) + hvp[:, :n] + zbar[:, off:off + n]
        ax_p = cv @ self.M_inv + zbar[:, off + n:off + 2 * n]
        ax = np.hstack([ax_q, ax_p]).ravel()
        return dx, u, ax, np.concatenate([g_theta_v, g_theta_k])


@dataclass
class PdPlusLoop:
    """Potential compensation with PD action; ``theta = (k_p, k_d)``."""

    plant: MechanicalPH
    q_star: Optional[np.ndarray] = None

    def __post_init__(self):
        self.n = self.plant.n_q
        self.M_inv, self.B, self.B_inv, self.D = _plant_arrays(self.plant)
        qs = np.zeros(self.n) if self.q_star is None else self.q_star
        self.q_star = np.asarray(qs, dtype=float).reshape(-1, self.n)

    n_params = 2

    def _split(self, X):
        X = np.asarray(X, dtype=float).reshape(-1, 2 * self.n)
        return X[:, : self.n], X[:, self.n:]

    def control(self, t, X, theta) -> np.ndarray:
        Q, P = self._split(X)
        v = P @ self.M_inv.T
        inner = _grad_v(self.plant, Q) + theta[0] * (Q - self.q_star) + theta[1] * v
        return -inner @ self.B_inv.T

    def rhs(self, t, X, theta) -> np.ndarray:
        return self.rhs_and_control(t, X, theta)[0]

    def rhs_and_control(self, t, X, theta):
        Q, P = self._split(X)
        u = self.control(t, X, theta)
        v = P @ self.M_inv.T
        dP = -_grad_v(self.plant, Q) + v @ self.D.T + u @ self.B.T
        return np.hstack([v, dP]).ravel(), u

    def vjp(self, t, X, theta, lam, cu=None):
        n = self.n
        Q, P = self._split(X)
        lam = np.asarray(lam, dtype=float).reshape(-1, 2 * n)
        lq, lp = lam[:, :n], lam[:, n:]
        dx, u = self.rhs_and_control(t, X, theta)
        v = P @ self.M_inv.T
        c_tot = lp @ self.B
        if cu is not None:
            c_tot = c_tot + cu
        ci = -c_tot @ self.B_inv              # cotangent on grad V + k_p e + k_d v
        e = Q - self.q_star
        g_theta = np.array([np.sum(ci * e), np.sum(ci * v)])
        ax_q = _hess_v_times(self.plant, Q, ci - lp) + theta[0] * ci
        cv = lq + lp @ self.D + theta[1] * ci
        ax = np.hstack([ax_q, cv @ self.M_inv]).ravel()
        return dx, u, ax, g_theta


# ---------------------------------------------------------------- cost terms

def smooth_abs(u, eps):
    """``sqrt(|u|^2 + eps^2) - eps`` per row and its gradient with respect to ``u``."""
    r = np.sqrt(np.sum(u * u, axis=1) + eps * eps)
    return r - eps, u / r[:, None]


@dataclass(frozen=True)
class CostSpec:
    """Terminal plus running cost.

    ``regulation_nll``: negative log-likelihood of the final state under an
    isotropic Gaussian centred at ``(q*, 0)`` with variance ``sigma2``, plus
    ``gamma * int |u| dt``. ``setpoint_quadratic``: ``e^T Q e`` with
    ``e = x(T) - x*`` plus ``gamma * int 1/2 |u|^2 dt``.
    """

    variant: str = "regulation_nll"
    gamma: float = 0.01
    q_star: float = 0.0
    sigma2: float = 1e-3
    Q: tuple = (10.0, 1.0)
    horizon: float = 3.0
    eps: float = 1e-6

    def __post_init__(self):
        if self.variant not in ("regulation_nll", "setpoint_quadratic"):
            raise ValueError(f"unknown cost variant {self.variant!r}")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if not self.sigma2 > 0:
            raise ValueError("sigma2 must be positive")
        if any(q < 0 for q in self.Q):
            raise ValueError("Q must be positive semidefinite")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if not self.eps > 0:
            raise ValueError("smoothing eps must be positive")


def nll_floor(sigma2: float, n_x: int = 2) -> float:
    """Minimum of the terminal negative log-likelihood, ``n_x/2 log(2 pi sigma2)``."""
    return 0.5 * n_x * np.log(2 * np.pi * sigma2)


@dataclass
class BatchProblem:
    """Batch-mean cost of a closed loop, ready for :func:`adjoint.grad`.

    ``targets`` (rows of full target states) is only used by the quadratic
    set-point cost; the regulation cost targets ``(q*, 0)``.
    """

    loop: object
    cost: CostSpec
    n_samples: int
    targets: Optional[np.ndarray] = None
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        self.n = self.loop.n
        w = np.full(self.n_samples, 1.0 / self.n_samples) if self.weights is None else np.asarray(self.weights, float)
        self.w = w.reshape(-1, 1)
        if self.cost.variant == "regulation_nll":
            tgt = np.zeros(2 * self.n)
            tgt[: self.n] = self.cost.q_star
            self.target_rows = np.broadcast_to(tgt, (self.n_samples, 2 * self.n))
        else:
            if self.targets is None:
                raise ValueError("set-point cost needs target states")
            self.target_rows = np.asarray(self.targets, dtype=float).reshape(self.n_samples, 2 * self.n)
            self.Qd = np.tile(np.asarray(self.cost.Q, dtype=float), 1)
            if self.Qd.size != 2 * self.n:
                raise ValueError("Q must have one weight per state component")

    # per-sample pieces -------------------------------------------------
    def terminal_rows(self, xT) -> np.ndarray:
        X = np.asarray(xT, dtype=float).reshape(self.n_samples, 2 * self.n)
        e = X - self.target_rows
        if self.cost.variant == "regulation_nll":
            return np.sum(e * e, axis=1) / (2 * self.cost.sigma2) + nll_floor(self.cost.sigma2, 2 * self.n)
        return np.sum(self.Qd * e * e, axis=1)

    def effort_rows(self, u, exact: bool = False) -> np.ndarray:
        if self.cost.variant == "regulation_nll":
            return np.sqrt(np.sum(u * u, axis=1)) if exact else smooth_abs(u, self.cost.eps)[0]
        return 0.5 * np.sum(u * u, axis=1)

    # AdjointProblem callables -------------------------------------------
    def field(self, t, x, theta):
        return self.loop.rhs(t, x, theta)

    def running(self, t, x, theta):
        u = self.loop.control(t, x, theta)
        return self.cost.gamma * float(self.w[:, 0] @ self.effort_rows(u))

    def monitor(self, t, x, theta):
        u = self.loop.control(t, x, theta)
        return float(self.w[:, 0] @ self.effort_rows(u, exact=True))

    def forward_terms(self, t, x, theta):
        dx, u = self.loop.rhs_and_control(t, x, theta)
        w = self.w[:, 0]
        return dx, self.cost.gamma * float(w @ self.effort_rows(u)), float(w @ self.effort_rows(u, exact=True))

    def terminal(self, x, theta):
        return float(self.w[:, 0] @ self.terminal_rows(x))

    def terminal_grad(self, x, theta):
        X = np.asarray(x, dtype=float).reshape(self.n_samples, 2 * self.n)
        e = X - self.target_rows
        if self.cost.variant == "regulation_nll":
            g = e / self.cost.sigma2
        else:
            g = 2 * self.Qd * e
        return (self.w * g).ravel(), np.zeros(self.loop.n_params)

    def adjoint_terms(self, t, x, theta, lam):
        if self.cost.gamma == 0.0:
            dx, _, ax, ath = self.loop.vjp(t, x, theta, lam, None)
            return dx, ax, ath
        u = self.loop.control(t, x, theta)
        if self.cost.variant == "regulation_nll":
            _, du = smooth_abs(u, self.cost.eps)
        else:
            du = u
        cu = self.cost.gamma * self.w * du
        dx, _, ax, ath = self.loop.vjp(t, x, theta, lam, cu)
        return dx, ax, ath

    def problem(self, theta, solver: Optional[SolverConfig] = None) -> AdjointProblem:
        return AdjointProblem(
            field=self.field,
            adjoint_terms=self.adjoint_terms,
            terminal=self.terminal,
            terminal_grad=self.terminal_grad,
            theta=np.asarray(theta, dtype=float),
            horizon=self.cost.horizon,
            running=self.running,
            monitor=self.monitor,
            solver=solver or SolverConfig(),
            forward_terms=self.forward_terms,
        )


# ---------------------------------------------------------------- rollouts

@dataclass
class Rollout:
    """Per-sample outcome of one batched closed-loop solve.

    ``abs_effort`` and ``sq_effort`` are ``int |u| dt`` and ``int 1/2 |u|^2 dt``
    for every row, integrated alongside the state.
    """

    final: np.ndarray
    abs_effort: np.ndarray
    sq_effort: np.ndarray
    trajectory: Trajectory
    n_samples: int
    n_x: int

    def states(self, k: int) -> np.ndarray:
        """State history of sample ``k`` on the accepted time grid."""
        Z = self.trajectory.states[:, : self.n_samples * self.n_x]
        return Z.reshape(len(self.trajectory.times), self.n_samples, self.n_x)[:, k, :]


def rollout(loop, theta, x0, horizon: float, solver: Optional[SolverConfig] = None,
            dense: bool = False) -> Rollout:
    """Integrate a batch of initial conditions and accumulate per-row effort."""
    X0 = np.asarray(x0, dtype=float).reshape(-1, 2 * loop.n)
    N, nx = X0.shape
    m = N * nx
    theta = np.asarray(theta, dtype=float)

    def rhs(t, z):
        dx, u = loop.rhs_and_control(t, z[:m], theta)
        return np.concatenate([dx, np.sqrt(np.sum(u * u, axis=1)), 0.5 * np.sum(u * u, axis=1)])

    z0 = np.concatenate([X0.ravel(), np.zeros(2 * N)])
    traj = dopri5(rhs, z0, (0.0, horizon), solver or SolverConfig(), dense=dense,
                  norm=_grouped_norm([m, N, N]))
    zT = traj.final
    return Rollout(zT[:m].reshape(N, nx), zT[m:m + N].copy(), zT[m + N:].copy(), traj, N, nx)
