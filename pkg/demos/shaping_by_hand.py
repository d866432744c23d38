"""Energy shaping on the pendulum without any training.

A hand-written potential moves the minimum of the closed-loop energy from the
hanging position to q = 1, and constant damping injection drains energy until
the state settles there.
"""
import numpy as np

from shapectl.ode import SolverConfig, dopri5
from shapectl.ph import pendulum, vector_field

plant = pendulum()
sys_ = plant.to_ph()
target = 1.0
kp, kd = 5.0, 2.0


def control(x):
    q, p = x
    # cancel gravity and the spring, then add a quadratic well around the target
    grad_shaped = -plant.grad_V(np.array([q]))[0] + kp * (q - target)
    return np.array([-grad_shaped - kd * p])


def closed_energy(x):
    q, p = x
    return 0.5 * p * p + 0.5 * kp * (q - target) ** 2


tr = dopri5(lambda t, x: vector_field(sys_, x, control(x)), [-2.0, 0.0], (0.0, 8.0),
            SolverConfig(1e-9, 1e-9), dense=True)
for t in np.linspace(0.0, 8.0, 9):
    x = tr(t)
    print(f"t={t:4.1f}  q={x[0]: .4f}  p={x[1]: .4f}  H*={closed_energy(x):.6f}")
