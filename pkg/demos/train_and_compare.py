"""Short training runs of the learned controller and the PD+ baseline.

Uses a small batch and few iterations so it finishes in a couple of minutes;
the configs in demos/configs hold the full settings for the command line.
Two gains settle within a few dozen steps; the networks are nowhere near
converged at this budget, and the printout shows it.
"""
from dataclasses import replace

from shapectl.closed_loop import CostSpec
from shapectl.optimize import SamplerConfig, TrainConfig, eval_batch, evaluate, train

base = TrainConfig(iterations=40, cost=CostSpec(gamma=0.01), sampler=SamplerConfig(batch_size=32), width=32)
for method in ("oes", "pdplus"):
    # Adam moves each weight by about lr per step, so a 40-step demo needs a larger rate than 1e-3
    cfg = replace(base, method=method, lr=1e-2 if method == "oes" else None)
    res = train(cfg)
    ev = evaluate(cfg, res.theta, eval_batch(cfg, 64, 12345))
    extra = f"  gains {res.theta[0]:.3f}, {res.theta[1]:.3f}" if method == "pdplus" else ""
    print(f"{method:7s} terminal {ev.mean_terminal:9.3f}  effort {ev.mean_integral:7.3f}{extra}")
