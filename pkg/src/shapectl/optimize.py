"""Sampling, costs, Adam and the training loops for both controllers.

A training iteration draws a fresh batch of initial conditions (and, for the
set-point task, target states), evaluates the batch-mean cost and its adjoint
gradient, and takes one Adam step. The batch is split into a fixed number of
chunks, each integrated as one stacked ODE; chunks may run in worker
processes but are always reduced in chunk order.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import adjoint
from .closed_loop import BatchProblem, CostSpec, OesLoop, PdPlusLoop, nll_floor, rollout
from .controller import OesController, PdPlusController, init_oes
from .ode import SolverConfig, SolverError
from .ph import PendulumParams, pendulum

log = logging.getLogger(__name__)

TWO_PI = 2 * math.pi


class TrainingAborted(RuntimeError):
    """Too many samples of a batch failed to integrate."""


# ---------------------------------------------------------------- sampling

@dataclass(frozen=True)
class SamplerConfig:
    q_box: tuple = (-TWO_PI, TWO_PI)
    p_box: tuple = (-TWO_PI, TWO_PI)
    target_q_box: tuple = (-TWO_PI, TWO_PI)
    target_p_box: tuple = (-1e-4, 1e-4)
    batch_size: int = 256
    n_targets: int = 1
    seed: int = 0

    def __post_init__(self):
        for name in ("q_box", "p_box", "target_q_box", "target_p_box"):
            lo, hi = getattr(self, name)
            if not hi > lo:
                raise ValueError(f"{name} must have lower < upper")
        if self.batch_size < 1 or self.n_targets < 1:
            raise ValueError("batch_size and n_targets must be at least 1")


@dataclass
class Batch:
    x0: np.ndarray
    targets: Optional[np.ndarray] = None

    def __len__(self):
        return self.x0.shape[0]


def sample_batch(cfg: SamplerConfig, rng: np.random.Generator, with_targets: bool = False) -> Batch:
    """Uniform initial conditions; with targets, every initial condition is paired with every target."""
    N = cfg.batch_size
    x0 = np.column_stack([rng.uniform(*cfg.q_box, N), rng.uniform(*cfg.p_box, N)])
    if not with_targets:
        return Batch(x0)
    M = cfg.n_targets
    tg = np.column_stack([rng.uniform(*cfg.target_q_box, M), rng.uniform(*cfg.target_p_box, M)])
    return Batch(np.repeat(x0, M, axis=0), np.tile(tg, (N, 1)))


# ---------------------------------------------------------------- trajectory costs

def _trapezoid(times, values) -> float:
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    return float(np.sum(0.5 * (values[1:] + values[:-1]) * np.diff(times)))


def regulation_cost(times, states, controls, q_star: float = 0.0, sigma2: float = 1e-3) -> tuple:
    """``(terminal NLL, int |u| dt)`` of one sampled trajectory (trapezoidal rule)."""
    states = np.atleast_2d(np.asarray(states, dtype=float))
    xT = states[-1]
    n_q = xT.size // 2
    e = xT.copy()
    e[:n_q] -= q_star
    terminal = float(e @ e) / (2 * sigma2) + nll_floor(sigma2, xT.size)
    u = np.asarray(controls, dtype=float).reshape(len(states), -1)
    return terminal, _trapezoid(times, np.sqrt(np.sum(u * u, axis=1)))


def setpoint_cost(times, states, controls, targets, Q=(10.0, 1.0)) -> float:
    """Mean of ``e^T Q e`` over the target rows plus ``1/2 int u^2 dt``."""
    xT = np.atleast_2d(np.asarray(states, dtype=float))[-1]
    tg = np.atleast_2d(np.asarray(targets, dtype=float))
    Qd = np.asarray(Q, dtype=float)
    if np.any(Qd < 0):
        raise ValueError("Q must be positive semidefinite")
    e = xT - tg
    u = np.asarray(controls, dtype=float).reshape(len(times), -1)
    return float(np.mean(np.sum(Qd * e * e, axis=1))) + _trapezoid(times, 0.5 * np.sum(u * u, axis=1))


# ---------------------------------------------------------------- Adam

@dataclass
class AdamState:
    lr: float
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    skipped: int = 0

    @classmethod
    def zeros(cls, n: int, lr: float, **kw) -> "AdamState":
        return cls(lr, np.zeros(n), np.zeros(n), **kw)


def adam_step(state: AdamState, theta, grad) -> tuple:
    """One bias-corrected Adam update; a non-finite gradient leaves everything unchanged."""
    theta = np.asarray(theta, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if grad.shape != theta.shape or state.m.shape != theta.shape:
        raise ValueError("gradient, moments and parameters must have the same shape")
    if not np.all(np.isfinite(grad)):
        log.warning("non-finite gradient at step %d, update skipped", state.step)
        return replace(state, skipped=state.skipped + 1), theta.copy()
    k = state.step + 1
    m = state.beta1 * state.m + (1 - state.beta1) * grad
    v = state.beta2 * state.v + (1 - state.beta2) * grad * grad
    m_hat = m / (1 - state.beta1 ** k)
    v_hat = v / (1 - state.beta2 ** k)
    new = theta - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return replace(state, m=m, v=v, step=k), new


# ---------------------------------------------------------------- training

DEFAULT_LR = {"oes": 1e-3, "pdplus": 1.0}


@dataclass(frozen=True)
class TrainConfig:
    method: str = "oes"
    cost: CostSpec = CostSpec()
    sampler: SamplerConfig = SamplerConfig()
    solver: SolverConfig = SolverConfig(rtol=1e-5, atol=1e-5)
    plant: PendulumParams = PendulumParams()
    iterations: int = 300
    lr: Optional[float] = None
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    width: int = 64
    pd_init: tuple = (0.0, 0.0)
    adjoint_mode: str = "checkpoint"
    chunks: int = 1
    workers: int = 1
    checkpoint_every: int = 0
    stop_window: int = 20
    stop_rtol: float = 1e-4
    max_failure_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.method not in ("oes", "pdplus"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if self.lr is not None and not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.adjoint_mode not in ("backsolve", "checkpoint"):
            raise ValueError("adjoint_mode must be backsolve or checkpoint")
        if self.chunks < 1 or self.workers < 1:
            raise ValueError("chunks and workers must be at least 1")
        if self.chunks > self.sampler.batch_size * self.sampler.n_targets:
            raise ValueError("more chunks than samples")
        if min(self.pd_init) < 0:
            raise ValueError("PD gains must start non-negative")
        if self.width < 1 or self.stop_window < 1:
            raise ValueError("width and stop_window must be positive")

    @property
    def setpoint(self) -> bool:
        return self.cost.variant == "setpoint_quadratic"

    @property
    def learning_rate(self) -> float:
        return self.lr if self.lr is not None else DEFAULT_LR[self.method]


def initial_params(cfg: TrainConfig):
    """Starting point: zero-output networks, or the configured PD gains."""
    if cfg.method == "pdplus":
        return np.asarray(cfg.pd_init, dtype=float)
    rng = np.random.default_rng(cfg.seed)
    return init_oes(rng, cfg.cost.horizon, pendulum(cfg.plant), cfg.width, setpoint=cfg.setpoint).theta


def build_controller(cfg: TrainConfig, theta) -> OesController:
    """OES controller with the configured architecture and the given parameters."""
    rng = np.random.default_rng(0)
    c = init_oes(rng, cfg.cost.horizon, pendulum(cfg.plant), cfg.width, setpoint=cfg.setpoint)
    return c.with_theta(theta)


def make_loop(cfg: TrainConfig, theta, targets=None):
    plant = pendulum(cfg.plant)
    if cfg.method == "pdplus":
        qs = targets[:, : plant.n_q] if targets is not None else np.full((1, plant.n_q), cfg.cost.q_star)
        return PdPlusLoop(plant, qs)
    c = build_controller(cfg, theta)
    return OesLoop(c, targets[:, : plant.n_q] if (targets is not None and c.setpoint_input) else None)


@dataclass
class ChunkResult:
    value: float
    terminal: float
    running: float
    monitor: float
    grad: np.ndarray
    n_failed: int
    weight: float
    messages: list = field(default_factory=list)


def _chunk_task(args) -> ChunkResult:
    cfg, theta, x0, targets, weight_each, with_grad = args
    try:
        return _solve_rows(cfg, theta, x0, targets, weight_each, with_grad)
    except SolverError as exc:
        if len(x0) == 1:
            return ChunkResult(0.0, 0.0, 0.0, 0.0, np.zeros_like(theta), 1, 0.0, [str(exc)])
    # a stiff sample spoils the shared step size: retry row by row
    parts = [_chunk_task((cfg, theta, x0[i:i + 1], None if targets is None else targets[i:i + 1],
                          weight_each, with_grad)) for i in range(len(x0))]
    return _merge(parts, theta)


def _solve_rows(cfg, theta, x0, targets, weight_each, with_grad) -> ChunkResult:
    loop = make_loop(cfg, theta, targets)
    n = len(x0)
    bp = BatchProblem(loop, cfg.cost, n, targets=targets, weights=np.full(n, weight_each))
    pr = bp.problem(theta, cfg.solver)
    if with_grad:
        g = adjoint.grad(pr, x0, mode=cfg.adjoint_mode)
        res, grad = g.loss, g.grad
    else:
        res = adjoint.loss(pr, x0)[1]
        grad = np.zeros_like(theta)
    return ChunkResult(res.value, res.terminal, res.running, res.monitor, grad, 0, weight_each * n)


def _merge(parts: Sequence[ChunkResult], theta) -> ChunkResult:
    out = ChunkResult(0.0, 0.0, 0.0, 0.0, np.zeros_like(theta), 0, 0.0)
    for p in parts:  # fixed order keeps the reduction reproducible
        out.value += p.value
        out.terminal += p.terminal
        out.running += p.running
        out.monitor += p.monitor
        out.grad = out.grad + p.grad
        out.n_failed += p.n_failed
        out.weight += p.weight
        out.messages += p.messages
    return out


def batch_gradient(cfg: TrainConfig, theta, batch: Batch, with_grad: bool = True,
                   pool: Optional[ProcessPoolExecutor] = None) -> ChunkResult:
    """Batch-mean loss (and gradient) over the successful samples.

    Raises :class:`TrainingAborted` when more than ``max_failure_fraction``
    of the samples fail.
    """
    N = len(batch)
    bounds = np.linspace(0, N, cfg.chunks + 1).astype(int)
    tasks = [(cfg, theta, batch.x0[a:b], None if batch.targets is None else batch.targets[a:b], 1.0 / N, with_grad)
             for a, b in zip(bounds[:-1], bounds[1:])]
    parts = list(pool.map(_chunk_task, tasks)) if pool is not None else [_chunk_task(t) for t in tasks]
    total = _merge(parts, theta)
    if total.n_failed > cfg.max_failure_fraction * N:
        raise TrainingAborted(f"{total.n_failed} of {N} samples failed: " + "; ".join(total.messages[:5]))
    if total.n_failed:
        log.warning("%d of %d samples failed and were dropped", total.n_failed, N)
        scale = 1.0 / total.weight
        total.value *= scale
        total.terminal *= scale
        total.running *= scale
        total.monitor *= scale
        total.grad = total.grad * scale
    return total


@dataclass
class TrainResult:
    config: TrainConfig
    theta: np.ndarray
    history: list
    stopped_early: bool = False

    def controller(self):
        if self.config.method == "pdplus":
            return PdPlusController(float(self.theta[0]), float(self.theta[1]), self.config.cost.q_star,
                                    pendulum(self.config.plant))
        return build_controller(self.config, self.theta)


METRIC_FIELDS = ("iter", "loss", "terminal", "integral", "wallclock_s")


def _fmt(v) -> str:
    return str(v) if isinstance(v, (int, np.integer)) else "%.17g" % v


def train(cfg: TrainConfig, out_dir=None, theta0=None,
          on_checkpoint: Optional[Callable[[int, np.ndarray], None]] = None) -> TrainResult:
    """Adam on the batch-mean cost with a fresh batch every iteration.

    Metrics go to ``out_dir/metrics.csv`` when ``out_dir`` is given.
    ``on_checkpoint(iteration, theta)`` is called at iteration 0, every
    ``checkpoint_every`` iterations and at the end. Stops after
    ``iterations`` steps or when the loss changes by less than ``stop_rtol``
    (relative) across ``stop_window`` iterations.
    """
    theta = initial_params(cfg) if theta0 is None else np.asarray(theta0, dtype=float).copy()
    state = AdamState.zeros(theta.size, cfg.learning_rate, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)
    rng = np.random.default_rng(cfg.seed)
    history = []
    writer = fh = None
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        fh = open(Path(out_dir) / "metrics.csv", "w", newline="", encoding="utf-8")
        writer = csv.writer(fh)
        writer.writerow(METRIC_FIELDS)
    if on_checkpoint is not None:
        on_checkpoint(0, theta.copy())
    pool = ProcessPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    t_start = time.perf_counter()
    stopped = False
    try:
        for it in range(1, cfg.iterations + 1):
            batch = sample_batch(cfg.sampler, rng, with_targets=cfg.setpoint)
            res = batch_gradient(cfg, theta, batch, pool=pool)
            state, theta = adam_step(state, theta, res.grad)
            if cfg.method == "pdplus":
                theta = np.maximum(theta, 0.0)
            row = {"iter": it, "loss": res.value, "terminal": res.terminal, "integral": res.monitor,
                   "wallclock_s": time.perf_counter() - t_start}
            history.append(row)
            if writer is not None:
                writer.writerow([_fmt(row[k]) for k in METRIC_FIELDS])
                fh.flush()
            log.info("iter %d loss %.6g terminal %.6g integral %.6g", it, res.value, res.terminal, res.monitor)
            if on_checkpoint is not None and cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
                on_checkpoint(it, theta.copy())
            if it > cfg.stop_window:
                old = history[-1 - cfg.stop_window]["loss"]
                if abs(res.value - old) < cfg.stop_rtol * max(abs(old), 1e-300):
                    stopped = True
                    break
    finally:
        if pool is not None:
            pool.shutdown()
        if fh is not None:
            fh.close()
    if on_checkpoint is not None:
        on_checkpoint(len(history), theta.copy())
    return TrainResult(cfg, theta, history, stopped)


# ---------------------------------------------------------------- evaluation

@dataclass
class Evaluation:
    terminal: np.ndarray
    integral: np.ndarray
    final: np.ndarray
    rollout: object

    @property
    def mean_terminal(self) -> float:
        return float(np.mean(self.terminal))

    @property
    def mean_integral(self) -> float:
        return float(np.mean(self.integral))


def evaluate(cfg: TrainConfig, theta, batch: Batch, solver: Optional[SolverConfig] = None,
             dense: bool = False) -> Evaluation:
    """Per-sample terminal cost and exact effort integral at (by default) tight tolerance."""
    solver = solver or SolverConfig(rtol=1e-8, atol=1e-8)
    loop = make_loop(cfg, theta, batch.targets)
    ro = rollout(loop, theta, batch.x0, cfg.cost.horizon, solver, dense=dense)
    bp = BatchProblem(loop, cfg.cost, len(batch), targets=batch.targets)
    term = bp.terminal_rows(ro.final)
    integral = ro.abs_effort if cfg.cost.variant == "regulation_nll" else ro.sq_effort
    return Evaluation(term, integral, ro.final, ro)


def eval_batch(cfg: TrainConfig, n: int, seed: int) -> Batch:
    """Fresh evaluation batch of ``n`` initial conditions (times targets for the set-point task)."""
    sampler = replace(cfg.sampler, batch_size=n, seed=seed)
    return sample_batch(sampler, np.random.default_rng(seed), with_targets=cfg.setpoint)


# ---------------------------------------------------------------- Pareto sweep

PARETO_FIELDS = ("method", "gamma", "seed", "terminal", "integral", "status")


def pareto_sweep(base: TrainConfig, gammas: Sequence[float], seeds: Sequence[int],
                 n_eval: int = 256, eval_seed: int = 12345,
                 eval_solver: Optional[SolverConfig] = None) -> list:
    """Train and evaluate both controllers for every ``(gamma, seed)``.

    Returns one row per run; failed runs carry NaN costs and the error in
    ``status``.
    """
    rows = []
    for gamma in gammas:
        for seed in seeds:
            for method in ("oes", "pdplus"):
                cfg = replace(base, method=method, seed=int(seed), cost=replace(base.cost, gamma=float(gamma)))
                row = {"method": method, "gamma": float(gamma), "seed": int(seed)}
                try:
                    res = train(cfg)
                    ev = evaluate(cfg, res.theta, eval_batch(cfg, n_eval, eval_seed), eval_solver)
                    row.update(terminal=ev.mean_terminal, integral=ev.mean_integral, status="ok")
                except (SolverError, TrainingAborted, FloatingPointError) as exc:
                    row.update(terminal=float("nan"), integral=float("nan"), status=f"failed: {exc}")
                rows.append(row)
    return rows


def front_means(rows) -> dict:
    """``{(method, gamma): (mean terminal, mean integral)}`` over successful runs."""
    acc = {}
    for r in rows:
        if r["status"] != "ok":
            continue
        acc.setdefault((r["method"], r["gamma"]), []).append((r["terminal"], r["integral"]))
    return {k: tuple(np.mean(v, axis=0)) for k, v in acc.items()}


def dominates(a, b) -> bool:
    """``a`` Pareto-dominates ``b`` when minimising both coordinates."""
    return all(x <= y for x, y in zip(a, b)) and any(x < y for x, y in zip(a, b))


def oes_not_dominated(rows) -> dict:
    """Per gamma: True when the OES mean point is not dominated by the PD+ mean point."""
    means = front_means(rows)
    out = {}
    for (method, gamma), point in means.items():
        if method == "oes" and ("pdplus", gamma) in means:
            out[gamma] = not dominates(means[("pdplus", gamma)], point)
    return out
