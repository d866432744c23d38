"""Adjoint gradients of the swing-up cost against central differences.

The differences replay the nominal step sequence, so the only error left is
the truncation of the difference quotient itself.
"""
import numpy as np

from shapectl import adjoint
from shapectl.closed_loop import BatchProblem, CostSpec, OesLoop
from shapectl.controller import init_oes
from shapectl.ode import SolverConfig

rng = np.random.default_rng(0)
c = init_oes(rng, 3.0, zero_last=False)
x0 = rng.uniform(-2 * np.pi, 2 * np.pi, (4, 2))
problem = BatchProblem(OesLoop(c), CostSpec(gamma=0.01), len(x0)).problem(c.theta, SolverConfig(1e-8, 1e-8))

g = adjoint.grad(problem, x0, mode="checkpoint")
idx = rng.choice(problem.n_params, 12, replace=False)
fd = adjoint.fd_grad(problem, x0, 1e-5, idx, frozen_grid=True)
print(f"loss {g.loss.value:.6f} with {problem.n_params} parameters")
for i, a, b in zip(idx, g.grad[idx], fd):
    print(f"  theta[{i:4d}]  adjoint {a: .8e}  differences {b: .8e}")
print("relative L2 error", np.linalg.norm(g.grad[idx] - fd) / np.linalg.norm(fd))
