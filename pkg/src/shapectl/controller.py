"""Passivity-based control laws.

``OesController`` combines a learned additive potential ``V*(q)`` with a
learned, state- and time-dependent diagonal damping-injection gain:

    u = -B^-1 grad_q V*(q) - K(t, q, p) B M^-1 p

``PdPlusController`` is the classic baseline that cancels the plant potential
and substitutes a quadratic one with linear damping.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import neural
from .neural import MlpSpec
from .ph import ContractError, MechanicalPH, PHSystem, matching_residual, pendulum


class InvariantViolation(RuntimeError):
    """A structural guarantee of the controller was broken at run time."""


def potential_spec(n_q: int = 1, width: int = 64, depth: int = 2, setpoint: bool = False) -> MlpSpec:
    """Shaped-potential network; the last hidden layer is tanh so the output stays bounded."""
    acts = ("softplus",) * (depth - 1) + ("tanh",)
    return MlpSpec(n_q * (2 if setpoint else 1), (width,) * depth, acts, 1, None)


def gain_spec(n_q: int = 1, width: int = 64, depth: int = 1, setpoint: bool = False, time_input: bool = True) -> MlpSpec:
    """Damping-gain network with a softplus output (diagonal gains stay positive)."""
    d_in = (1 if time_input else 0) + 2 * n_q + (n_q if setpoint else 0)
    return MlpSpec(d_in, (width,) * depth, ("softplus",) * depth, n_q, "softplus")


@dataclass(frozen=True)
class OesController:
    potential: MlpSpec
    gain: MlpSpec
    theta: np.ndarray
    horizon: float
    plant: MechanicalPH = field(default_factory=pendulum)
    time_input: bool = True
    setpoint_input: bool = False

    def __post_init__(self):
        n = self.plant.n_q
        theta = np.asarray(self.theta, dtype=float)
        object.__setattr__(self, "theta", theta)
        if theta.shape != (self.n_params,):
            raise ContractError(f"controller needs {self.n_params} parameters, got {theta.shape}")
        if self.horizon <= 0:
            raise ContractError("horizon must be positive")
        if self.potential.output_dim != 1 or self.potential.output_activation is not None:
            raise ContractError("potential network must have a scalar affine output")
        if self.potential.activations[-1] != "tanh":
            raise ContractError("potential network needs a tanh last hidden layer")
        if self.potential.input_dim != n * (2 if self.setpoint_input else 1):
            raise ContractError("potential network input size does not match the plant")
        if self.gain.output_activation != "softplus" or self.gain.output_dim != n:
            raise ContractError("gain network needs n_q softplus outputs")
        d_in = (1 if self.time_input else 0) + 2 * n + (n if self.setpoint_input else 0)
        if self.gain.input_dim != d_in:
            raise ContractError("gain network input size does not match the plant")

    @property
    def n_params(self) -> int:
        return self.potential.n_params + self.gain.n_params

    @property
    def theta_potential(self) -> np.ndarray:
        return self.theta[: self.potential.n_params]

    @property
    def theta_gain(self) -> np.ndarray:
        return self.theta[self.potential.n_params:]

    def with_theta(self, theta) -> "OesController":
        return replace(self, theta=np.asarray(theta, dtype=float))

    def potential_input(self, q, q_star=None) -> np.ndarray:
        q = np.atleast_2d(np.asarray(q, dtype=float))
        if self.setpoint_input:
            return np.hstack([q, _setpoint_rows(q_star, q.shape)])
        return q

    def gain_input(self, t, q, p, q_star=None) -> np.ndarray:
        q = np.atleast_2d(np.asarray(q, dtype=float))
        p = np.atleast_2d(np.asarray(p, dtype=float))
        cols = []
        if self.time_input:
            tt = np.broadcast_to(np.asarray(t, dtype=float).reshape(-1, 1) / self.horizon, (q.shape[0], 1))
            cols.append(tt)
        cols += [q, p]
        if self.setpoint_input:
            cols.append(_setpoint_rows(q_star, q.shape))
        return np.hstack(cols)


def _setpoint_rows(q_star, shape):
    if q_star is None:
        raise ContractError("set-point conditioned controller needs q_star")
    return np.broadcast_to(np.asarray(q_star, dtype=float).reshape(-1, shape[1]), shape)


def init_oes(
    rng: np.random.Generator,
    horizon: float,
    plant: Optional[MechanicalPH] = None,
    width: int = 64,
    setpoint: bool = False,
    zero_last: bool = True,
) -> OesController:
    """Controller with Xavier-initialised networks and (by default) zeroed last layers.

    ``setpoint=True`` builds the set-point conditioned variant: one extra
    softplus hidden layer in both networks and no time input.
    """
    plant = plant or pendulum()
    n = plant.n_q
    pot = potential_spec(n, width, depth=3 if setpoint else 2, setpoint=setpoint)
    gain = gain_spec(n, width, depth=2 if setpoint else 1, setpoint=setpoint, time_input=not setpoint)
    th_v = neural.xavier_init(pot, rng)
    th_k = neural.xavier_init(gain, rng)
    if zero_last:
        th_v = neural.zero_last_layer(pot, th_v)
        th_k = neural.zero_last_layer(gain, th_k)
    return OesController(pot, gain, np.concatenate([th_v, th_k]), horizon, plant,
                         time_input=not setpoint, setpoint_input=setpoint)


def shaped_potential(c: OesController, q, q_star=None) -> np.ndarray:
    """Learned additive potential ``V*(q)`` (batched: one value per row)."""
    out = neural.forward(c.potential, c.theta_potential, c.potential_input(q, q_star))[:, 0]
    return out if np.ndim(q) > 1 else out[0]


def shaped_potential_grad(c: OesController, q, q_star=None) -> np.ndarray:
    z = c.potential_input(q, q_star)
    g = neural.input_gradient(c.potential, c.theta_potential, z)[:, : c.plant.n_q]
    return g if np.ndim(q) > 1 else g[0]


def damping_gain(c: OesController, t, q, p, q_star=None) -> np.ndarray:
    """Diagonal entries of ``K(t, q, p)``."""
    k = neural.forward(c.gain, c.theta_gain, c.gain_input(t, q, p, q_star))
    return k if np.ndim(q) > 1 else k[0]


def oes_control(c: OesController, t, q, p, q_star=None) -> np.ndarray:
    """``u = -B^-1 grad V*(q) - K(t,q,p) B M^-1 p`` for one state or a batch of rows."""
    if not (-1e-12 <= np.min(t) and np.max(t) <= c.horizon * (1 + 1e-12)):
        raise ContractError("time outside the controller horizon")
    plant = c.plant
    batched = np.ndim(q) > 1
    q2 = np.atleast_2d(np.asarray(q, dtype=float))
    p2 = np.atleast_2d(np.asarray(p, dtype=float))
    k = np.atleast_2d(damping_gain(c, t, q2, p2, q_star))
    if np.any(k < 0):
        raise InvariantViolation("damping gain became negative")
    y = (p2 @ plant.M_inv(q2[0]).T) @ plant.B.T
    grad_v = np.atleast_2d(shaped_potential_grad(c, q2, q_star))
    u = -grad_v @ np.linalg.inv(plant.B).T - k * y
    return u if batched else u[0]


def shaped_energy(c: OesController, sys: MechanicalPH, q, p, q_star=None) -> float:
    """``H*(q, p) = H(q, p) + V*(q)``."""
    return sys.hamiltonian(q, p) + float(np.sum(shaped_potential(c, np.atleast_1d(q), q_star)))


def shaped_energy_grid(c: OesController, q_grid, q_star=None) -> np.ndarray:
    """Closed-loop potential ``V(q) + V*(q)`` on a batch of configurations."""
    q = np.atleast_2d(np.asarray(q_grid, dtype=float))
    if q.shape[0] == 1 and c.plant.n_q == 1:
        q = q.T
    plant_v = np.asarray(c.plant.V(q), dtype=float).reshape(q.shape[0], -1).sum(axis=1)
    return plant_v + shaped_potential(c, q, q_star)


@dataclass(frozen=True)
class PdPlusController:
    k_p: float
    k_d: float
    q_star: float = 0.0
    plant: MechanicalPH = field(default_factory=pendulum)

    def __post_init__(self):
        if self.k_p < 0 or self.k_d < 0:
            raise ContractError("PD gains must be non-negative")


def pd_plus_control(c: PdPlusController, q, p) -> np.ndarray:
    """Potential compensation plus stabilising PD: ``-B^-1 (grad V + k_p (q - q*) + k_d M^-1 p)``."""
    plant = c.plant
    q = np.atleast_1d(np.asarray(q, dtype=float))
    p = np.atleast_1d(np.asarray(p, dtype=float))
    v = plant.M_inv(q) @ p
    inner = np.atleast_1d(plant.grad_V(q)) + c.k_p * (q - c.q_star) + c.k_d * v
    return -np.linalg.solve(plant.B, inner)


def ebpbc_beta(sys: PHSystem, grad_H_star, x, check_matching: bool = True, tol: float = 1e-9) -> np.ndarray:
    """Energy-balancing feedback ``-g^+ F^T (grad H* - grad H)``.

    With ``check_matching`` the matching residual must vanish at ``x``;
    otherwise the feedback does not realise ``H*``.
    """
    x = sys.check_state(x)
    g = sys.g(x)
    if np.linalg.matrix_rank(g) < sys.n_u:
        raise ContractError("input matrix is column-rank deficient")
    if check_matching:
        res = matching_residual(sys, grad_H_star, x)
        if np.max(np.abs(res), initial=0.0) > tol * max(1.0, np.abs(grad_H_star(x)).max()):
            raise ContractError("desired energy violates the matching equations at x")
    diff = np.asarray(grad_H_star(x), dtype=float) - sys.grad_H(x)
    g_pinv = np.linalg.solve(g.T @ g, g.T)
    return -g_pinv @ sys.F(x).T @ diff


def damping_injection(K, y) -> np.ndarray:
    """Negative output feedback ``v = -K y`` with ``K`` symmetric PSD."""
    K = np.atleast_2d(np.asarray(K, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if not np.allclose(K, K.T, atol=1e-12 * max(1.0, np.abs(K).max())):
        raise ContractError("damping matrix must be symmetric")
    if np.linalg.eigvalsh(K).min() < -1e-12 * max(1.0, np.abs(K).max()):
        raise ContractError("damping matrix must be positive semidefinite")
    return -K @ y
