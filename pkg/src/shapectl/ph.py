"""Port-Hamiltonian models.

A generic input-state-output system ``x' = F(x) grad H(x) + g(x) u`` with
passive output ``y = g(x)^T grad H(x)``, and the mechanical canonical form in
coordinates ``x = (q, p)`` with ``F = [[0, I], [-I, D]]`` and ``g = [0; B]``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np


class ContractError(ValueError):
    """Arguments violate an operation's dimensional or structural contract."""


@dataclass(frozen=True)
class PHSystem:
    n_x: int
    n_u: int
    F: Callable[[np.ndarray], np.ndarray]
    g: Callable[[np.ndarray], np.ndarray]
    H: Callable[[np.ndarray], float]
    grad_H: Callable[[np.ndarray], np.ndarray]

    def __post_init__(self):
        if self.n_x <= 0 or self.n_u <= 0:
            raise ContractError("state and input dimensions must be positive")

    def check_state(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n_x,):
            raise ContractError(f"state has shape {x.shape}, expected ({self.n_x},)")
        return x

    def check_input(self, u) -> np.ndarray:
        u = np.atleast_1d(np.asarray(u, dtype=float))
        if u.shape != (self.n_u,):
            raise ContractError(f"input has shape {u.shape}, expected ({self.n_u},)")
        return u


def vector_field(sys: PHSystem, x, u) -> np.ndarray:
    x = sys.check_state(x)
    u = sys.check_input(u)
    return sys.F(x) @ sys.grad_H(x) + sys.g(x) @ u


def passive_output(sys: PHSystem, x) -> np.ndarray:
    x = sys.check_state(x)
    return sys.g(x).T @ sys.grad_H(x)


def power_balance_residual(sys: PHSystem, x, u) -> float:
    """``dH/dt - <y, u>``; non-positive for a passive system."""
    x = sys.check_state(x)
    u = sys.check_input(u)
    h_dot = float(sys.grad_H(x) @ vector_field(sys, x, u))
    return h_dot - float(passive_output(sys, x) @ u)


def left_annihilator(g: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Full-rank ``g_perp`` with ``g_perp @ g = 0``, from the SVD of ``g``."""
    n_x, n_u = g.shape
    U, s, _ = np.linalg.svd(g)
    rank = int(np.sum(s > tol * max(1.0, s[0] if s.size else 0.0)))
    if rank < n_u:
        raise ContractError("input matrix is column-rank deficient")
    return U[:, rank:].T


def matching_residual(sys: PHSystem, grad_H_star, x, annihilator: Optional[np.ndarray] = None) -> np.ndarray:
    """``[g_perp F^T; g^T] (grad H* - grad H)`` evaluated at ``x``.

    Zero exactly when the desired energy satisfies the matching equations at
    ``x``. ``grad_H_star`` is a callable returning the gradient of the
    desired energy.
    """
    x = sys.check_state(x)
    g = sys.g(x)
    gp = left_annihilator(g) if annihilator is None else np.asarray(annihilator, dtype=float)
    if gp.ndim != 2 or gp.shape[1] != sys.n_x:
        raise ContractError("annihilator has the wrong shape")
    if gp.shape[0] and np.linalg.matrix_rank(gp) < gp.shape[0]:
        raise ContractError("annihilator is rank deficient")
    if not np.allclose(gp @ g, 0.0, atol=1e-12 * max(1.0, np.abs(g).max())):
        raise ContractError("annihilator does not annihilate g")
    diff = np.asarray(grad_H_star(x), dtype=float) - sys.grad_H(x)
    return np.concatenate([gp @ sys.F(x).T @ diff, g.T @ diff])


@dataclass(frozen=True)
class MechanicalPH:
    """``H(q, p) = 1/2 p^T M^-1(q) p + V(q)`` in canonical form.

    ``inertia`` is either a constant matrix or a callable ``q -> M(q)``; a
    configuration-dependent inertia also needs ``kinetic_grad_q`` returning
    ``d/dq (1/2 p^T M^-1(q) p)``. ``hess_V`` is only required by the adjoint
    gradient of closed-loop costs.
    """

    n_q: int
    inertia: object
    V: Callable[[np.ndarray], np.ndarray]
    grad_V: Callable[[np.ndarray], np.ndarray]
    D: np.ndarray
    B: np.ndarray
    hess_V: Optional[Callable[[np.ndarray], np.ndarray]] = None
    kinetic_grad_q: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None

    def __post_init__(self):
        n = self.n_q
        D = np.atleast_2d(np.asarray(self.D, dtype=float))
        B = np.atleast_2d(np.asarray(self.B, dtype=float))
        if D.shape != (n, n) or B.shape != (n, n):
            raise ContractError("D and B must be n_q x n_q")
        if not np.allclose(D, D.T) or np.linalg.eigvalsh(D).max() > 1e-12:
            raise ContractError("damping D must be symmetric negative semidefinite")
        if abs(np.linalg.det(B)) < 1e-12:
            raise ContractError("input matrix B must be invertible")
        object.__setattr__(self, "D", D)
        object.__setattr__(self, "B", B)
        if not callable(self.inertia):
            M = np.atleast_2d(np.asarray(self.inertia, dtype=float))
            if M.shape != (n, n) or not np.allclose(M, M.T) or np.linalg.eigvalsh(M).min() <= 0:
                raise ContractError("inertia must be symmetric positive definite")
            object.__setattr__(self, "inertia", M)
        elif self.kinetic_grad_q is None:
            raise ContractError("configuration-dependent inertia needs kinetic_grad_q")

    @property
    def constant_inertia(self) -> bool:
        return not callable(self.inertia)

    def M(self, q) -> np.ndarray:
        M = self.inertia(np.asarray(q, dtype=float)) if callable(self.inertia) else self.inertia
        M = np.atleast_2d(np.asarray(M, dtype=float))
        return M

    def M_inv(self, q) -> np.ndarray:
        try:
            return np.linalg.inv(self.M(q))
        except np.linalg.LinAlgError as exc:
            raise ContractError("singular inertia matrix") from exc

    def split(self, x):
        x = np.asarray(x, dtype=float)
        return x[..., : self.n_q], x[..., self.n_q:]

    def hamiltonian(self, q, p) -> float:
        q = np.atleast_1d(np.asarray(q, dtype=float))
        p = np.atleast_1d(np.asarray(p, dtype=float))
        return float(0.5 * p @ self.M_inv(q) @ p + np.sum(self.V(q)))

    def grad_hamiltonian(self, q, p) -> np.ndarray:
        q = np.atleast_1d(np.asarray(q, dtype=float))
        p = np.atleast_1d(np.asarray(p, dtype=float))
        dq = np.atleast_1d(self.grad_V(q)).astype(float)
        if not self.constant_inertia:
            dq = dq + self.kinetic_grad_q(q, p)
        return np.concatenate([dq, self.M_inv(q) @ p])

    def F(self, x) -> np.ndarray:
        n = self.n_q
        return np.block([[np.zeros((n, n)), np.eye(n)], [-np.eye(n), self.D]])

    def g(self, x) -> np.ndarray:
        return np.vstack([np.zeros((self.n_q, self.n_q)), self.B])

    def annihilator(self) -> np.ndarray:
        # [I 0]: any full-rank left block works since B is invertible
        return np.hstack([np.eye(self.n_q), np.zeros((self.n_q, self.n_q))])

    def to_ph(self) -> PHSystem:
        n = self.n_q

        def H(x):
            return self.hamiltonian(x[:n], x[n:])

        def grad_H(x):
            return self.grad_hamiltonian(x[:n], x[n:])

        return PHSystem(n_x=2 * n, n_u=n, F=self.F, g=self.g, H=H, grad_H=grad_H)


def hamiltonian(sys: MechanicalPH, q, p) -> float:
    return sys.hamiltonian(q, p)


@dataclass(frozen=True)
class PendulumParams:
    m: float = 1.0
    r: float = 1.0
    k: float = 0.5
    beta: float = 0.01
    J: float = 1.0
    g_acc: float = 9.81

    def __post_init__(self):
        for name in ("m", "r", "k", "J", "g_acc"):
            if not getattr(self, name) > 0:
                raise ContractError(f"pendulum parameter {name} must be positive")
        if self.beta < 0:
            raise ContractError("pendulum damping beta must be non-negative")

    def potential(self, q):
        q = np.asarray(q, dtype=float)
        return self.m * self.g_acc * self.r * (1.0 - np.cos(q)) + 0.5 * self.k * q * q

    def grad_potential(self, q):
        q = np.asarray(q, dtype=float)
        return self.m * self.g_acc * self.r * np.sin(q) + self.k * q

    def hess_potential(self, q):
        q = np.asarray(q, dtype=float)
        return self.m * self.g_acc * self.r * np.cos(q) + self.k


def pendulum(params: Optional[PendulumParams] = None) -> MechanicalPH:
    """Elastic-joint pendulum, single actuated joint (``B = 1``)."""
    pr = params or PendulumParams()
    return MechanicalPH(
        n_q=1,
        inertia=[[pr.J]],
        V=pr.potential,
        grad_V=pr.grad_potential,
        hess_V=pr.hess_potential,
        D=[[-pr.beta]],
        B=[[1.0]],
    )
