"""Explicit Runge-Kutta integrators.

``dopri5`` is the adaptive Dormand-Prince 5(4) pair with PI step control and
the usual continuous extension; ``rk4`` is the classical fixed-step scheme and
serves as an independent cross-check. Both integrate forward or backward in
time and operate on flat float64 state vectors.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

Field = Callable[[float, np.ndarray], np.ndarray]
Norm = Callable[[np.ndarray], float]


class SolverError(RuntimeError):
    """Integration could not be completed."""

    def __init__(self, message: str, t: float | None = None, h: float | None = None, n_steps: int = 0):
        details = []
        if t is not None:
            details.append(f"t={t:.6g}")
        if h is not None:
            details.append(f"h={h:.3g}")
        if n_steps:
            details.append(f"steps={n_steps}")
        super().__init__(message + (f" ({', '.join(details)})" if details else ""))
        self.t = t
        self.h = h
        self.n_steps = n_steps


@dataclass(frozen=True)
class SolverConfig:
    rtol: float = 1e-6
    atol: float = 1e-6
    initial_step: Optional[float] = None
    max_steps: int = 100_000
    safety: float = 0.9
    min_factor: float = 0.2
    max_factor: float = 10.0

    def __post_init__(self):
        if not (self.rtol > 0 and self.atol > 0):
            raise ValueError("rtol and atol must be positive")
        if self.max_steps <= 0:
            raise ValueError("max_steps must be positive")
        if not (0 < self.safety <= 1):
            raise ValueError("safety factor must lie in (0, 1]")
        if not (0 < self.min_factor < 1 < self.max_factor):
            raise ValueError("need min_factor < 1 < max_factor")


@dataclass
class Trajectory:
    """Accepted solution points of one integration.

    ``dense`` holds, for each accepted step ``k`` (from ``times[k]`` to
    ``times[k + 1]``), the five coefficient vectors of the continuous
    extension. It is empty unless dense output was requested.
    """

    times: np.ndarray
    states: np.ndarray
    dense: list = field(default_factory=list, repr=False)
    nfev: int = 0
    n_rejected: int = 0
    errors: Optional[np.ndarray] = field(default=None, repr=False)
    accepted: Optional[int] = None

    @property
    def n_steps(self) -> int:
        return len(self.times) - 1 if self.accepted is None else self.accepted

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def __call__(self, t) -> np.ndarray:
        """Evaluate the continuous extension at scalar or array ``t``."""
        if not self.dense:
            raise ValueError("trajectory was computed without dense output")
        scalar = np.ndim(t) == 0
        ts = np.atleast_1d(np.asarray(t, dtype=float))
        forward = self.times[-1] >= self.times[0]
        grid = self.times if forward else -self.times
        key = ts if forward else -ts
        lo, hi = min(grid[0], grid[-1]), max(grid[0], grid[-1])
        if np.any(key < lo - 1e-12 * max(1.0, abs(lo))) or np.any(key > hi + 1e-12 * max(1.0, abs(hi))):
            raise ValueError("requested time lies outside the integration interval")
        idx = np.clip(np.searchsorted(grid, key, side="right") - 1, 0, len(self.dense) - 1)
        out = np.empty((len(ts), self.states.shape[1]))
        for j, (k, tj) in enumerate(zip(idx, ts)):
            out[j] = _dense_eval(self.dense[k], self.times[k], self.times[k + 1], tj)
        return out[0] if scalar else out

    def to_csv(self, path, controls: Optional[np.ndarray] = None, precision: int = 17):
        """Write ``t,x0,x1,...`` (plus ``u`` columns when controls are given)."""
        n = self.states.shape[1]
        header = ["t"] + [f"x{i}" for i in range(n)]
        ctrl = None
        if controls is not None:
            ctrl = np.asarray(controls, dtype=float).reshape(len(self.times), -1)
            header += ["u"] if ctrl.shape[1] == 1 else [f"u{i}" for i in range(ctrl.shape[1])]
        fmt = f"{{:.{precision}g}}"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for k, t in enumerate(self.times):
                row = [t, *self.states[k]]
                if ctrl is not None:
                    row += list(ctrl[k])
                w.writerow([fmt.format(v) for v in row])


def rms_norm(v: np.ndarray) -> float:
    return math.sqrt(float(np.dot(v, v)) / v.size) if v.size else 0.0


# Dormand-Prince 5(4) tableau.
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
# 5th-order minus embedded 4th-order weights
_E = np.array([71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40])
# continuous extension (Hairer, Norsett & Wanner)
_D = np.array([
    -12715105075 / 11282082432, 0.0, 87487479700 / 32700410799, -10690763975 / 1880347072,
    701980252875 / 199316789632, -1453857185 / 822651844, 69997945 / 29380423,
])

_PI_ALPHA = 0.17
_PI_BETA = 0.04


def _dense_coeffs(y0, y1, k, h):
    ydiff = y1 - y0
    bspl = h * k[0] - ydiff
    r5 = h * (_D[0] * k[0] + _D[2] * k[2] + _D[3] * k[3] + _D[4] * k[4] + _D[5] * k[5] + _D[6] * k[6])
    return (y0.copy(), ydiff, bspl, ydiff - h * k[6] - bspl, r5)


def _dense_eval(coeffs, t0, t1, t):
    r1, r2, r3, r4, r5 = coeffs
    s = (t - t0) / (t1 - t0)
    s1 = 1.0 - s
    return r1 + s * (r2 + s1 * (r3 + s * (r4 + s1 * r5)))


def _initial_step(f, t0, y0, f0, direction, rtol, atol, norm):
    # Hairer, Norsett & Wanner II.4 starting-step heuristic
    scale = atol + np.abs(y0) * rtol
    d0 = norm(y0 / scale)
    d1 = norm(f0 / scale)
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    y1 = y0 + direction * h0 * f0
    f1 = f(t0 + direction * h0, y1)
    d2 = norm((f1 - f0) / scale) / h0
    if d1 <= 1e-15 and d2 <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1 / 5)
    return min(100 * h0, h1)


def dopri5(
    f: Field,
    x0,
    t_span: Sequence[float],
    cfg: Optional[SolverConfig] = None,
    *,
    dense: bool = False,
    norm: Optional[Norm] = None,
    record: bool = True,
) -> Trajectory:
    """Integrate ``dx/dt = f(t, x)`` over ``t_span = (t0, t1)``.

    ``t1 < t0`` integrates backward. ``norm`` maps the vector of scaled
    embedded errors ``e_i / (atol + rtol * max(|x_i|, |x_new_i|))`` to a
    scalar; a step is accepted when it is at most one (RMS by default).
    With ``record=False`` only the endpoints are kept.
    """
    cfg = cfg or SolverConfig()
    norm = norm or rms_norm
    t0, t1 = float(t_span[0]), float(t_span[1])
    y = np.array(x0, dtype=float).ravel()
    span = t1 - t0
    if span == 0.0:
        return Trajectory(np.array([t0]), y[None, :].copy())
    direction = 1.0 if span > 0 else -1.0
    h_min = 1e-14 * abs(span)

    nfev = 0

    def call(t, x):
        nonlocal nfev
        nfev += 1
        out = np.asarray(f(t, x), dtype=float).ravel()
        return out

    k = [None] * 7
    k[0] = call(t0, y)
    if not np.all(np.isfinite(k[0])):
        raise SolverError("non-finite vector field at initial state", t=t0)
    if cfg.initial_step is not None:
        h = min(abs(cfg.initial_step), abs(span))
    else:
        h = min(_initial_step(call, t0, y, k[0], direction, cfg.rtol, cfg.atol, norm), abs(span))

    times = [t0]
    states = [y.copy()]
    errs = []
    coeffs = []
    t = t0
    err_prev = 1e-4
    rejected_last = False
    n_rejected = 0
    n_steps = 0

    while direction * (t1 - t) > 0:
        if n_steps >= cfg.max_steps:
            raise SolverError("maximum number of steps exceeded", t=t, h=h, n_steps=n_steps)
        if h < h_min:
            raise SolverError("step size underflow", t=t, h=h, n_steps=n_steps)
        last = h >= abs(t1 - t) * (1 - 1e-12)
        if last:
            h = abs(t1 - t)
        hs = direction * h

        for i in range(1, 7):
            dy = _A[i][0] * k[0]
            for j in range(1, i):
                if _A[i][j] != 0.0:
                    dy = dy + _A[i][j] * k[j]
            yi = y + hs * dy
            if i == 6:
                y_new = yi
            k[i] = call(t + _C[i] * hs, yi)
        err_vec = hs * (_E[0] * k[0] + _E[2] * k[2] + _E[3] * k[3] + _E[4] * k[4] + _E[5] * k[5] + _E[6] * k[6])
        scale = cfg.atol + cfg.rtol * np.maximum(np.abs(y), np.abs(y_new))
        err = norm(err_vec / scale)

        if not np.isfinite(err) or not np.all(np.isfinite(k[6])):
            raise SolverError("non-finite vector field or state", t=t, h=h, n_steps=n_steps)

        if err <= 1.0:
            t_new = t1 if last else t + hs
            if dense:
                coeffs.append(_dense_coeffs(y, y_new, k, hs))
            y = y_new
            t = t_new
            k[0] = k[6]
            n_steps += 1
            if record or direction * (t1 - t) <= 0:
                times.append(t)
                states.append(y.copy())
                errs.append(err)
            if err == 0.0:
                factor = cfg.max_factor
            else:
                factor = cfg.safety * err ** (-_PI_ALPHA) * max(err_prev, 1e-4) ** _PI_BETA
                factor = min(cfg.max_factor, max(cfg.min_factor, factor))
            if rejected_last:
                factor = min(1.0, factor)
            h *= factor
            err_prev = err
            rejected_last = False
        else:
            factor = max(cfg.min_factor, cfg.safety * err ** (-1 / 5))
            h *= factor
            rejected_last = True
            n_rejected += 1

    return Trajectory(
        times=np.asarray(times),
        states=np.asarray(states),
        dense=coeffs,
        nfev=nfev,
        n_rejected=n_rejected,
        errors=np.asarray(errs),
        accepted=n_steps,
    )


def dopri5_fixed(f: Field, x0, t_grid) -> Trajectory:
    """Fifth-order Dormand-Prince steps on a prescribed grid, no error control.

    Replaying the accepted grid of an adaptive solve makes the result a
    smooth function of the problem data, which is what finite differences
    need.
    """
    ts = np.asarray(t_grid, dtype=float)
    if ts.ndim != 1 or len(ts) < 1:
        raise ValueError("t_grid must be a non-empty 1-D array")
    y = np.array(x0, dtype=float).ravel()
    out = np.empty((len(ts), y.size))
    out[0] = y
    k = [None] * 7
    for n in range(len(ts) - 1):
        t, h = ts[n], ts[n + 1] - ts[n]
        k[0] = np.asarray(f(t, y), dtype=float).ravel()
        for i in range(1, 6):
            dy = _A[i][0] * k[0]
            for j in range(1, i):
                if _A[i][j] != 0.0:
                    dy = dy + _A[i][j] * k[j]
            k[i] = np.asarray(f(t + _C[i] * h, y + h * dy), dtype=float).ravel()
        y = y + h * sum(_B[i] * k[i] for i in range(6) if _B[i] != 0.0)
        if not np.all(np.isfinite(y)):
            raise SolverError("non-finite state encountered", t=ts[n + 1], h=h, n_steps=n + 1)
        out[n + 1] = y
    return Trajectory(times=ts.copy(), states=out, nfev=6 * (len(ts) - 1))


def rk4(f: Field, x0, t_grid) -> Trajectory:
    """Classical fixed-step RK4 on an explicit time grid (either direction)."""
    ts = np.asarray(t_grid, dtype=float)
    if ts.ndim != 1 or len(ts) < 1:
        raise ValueError("t_grid must be a non-empty 1-D array")
    y = np.array(x0, dtype=float).ravel()
    out = np.empty((len(ts), y.size))
    out[0] = y
    for i in range(len(ts) - 1):
        t, h = ts[i], ts[i + 1] - ts[i]
        k1 = f(t, y)
        k2 = f(t + h / 2, y + h / 2 * k1)
        k3 = f(t + h / 2, y + h / 2 * k2)
        k4 = f(t + h, y + h * k3)
        y = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(y)):
            raise SolverError("non-finite state encountered", t=ts[i + 1], h=h, n_steps=i + 1)
        out[i + 1] = y
    return Trajectory(times=ts.copy(), states=out, nfev=4 * (len(ts) - 1))


def uniform_grid(t0: float, t1: float, h: float) -> np.ndarray:
    n = max(1, int(round(abs(t1 - t0) / h)))
    return np.linspace(t0, t1, n + 1)
