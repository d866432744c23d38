"""Command-line front end: ``shapectl {train,eval,landscape,pareto}``.

All files are UTF-8 CSV/JSON with floats written to 17 significant digits.
Every command writes ``manifest.json`` next to its outputs recording the
configuration digest, seed, worker count and library versions.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, checkpoint, config
from .config import ConfigError
from .controller import damping_gain, shaped_energy_grid, shaped_potential
from .ode import SolverConfig
from .optimize import (PARETO_FIELDS, TrainingAborted, build_controller, eval_batch, evaluate,
                       make_loop, oes_not_dominated, pareto_sweep, train)
from .ph import ContractError

log = logging.getLogger("shapectl")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _g(v) -> str:
    return "%.17g" % v


def _tolerance(text: str) -> SolverConfig:
    try:
        rtol, atol = (float(x) for x in text.split(":"))
        return SolverConfig(rtol=rtol, atol=atol)
    except ValueError:
        raise argparse.ArgumentTypeError("expected RTOL:ATOL with positive numbers") from None


def _range(text: str) -> tuple:
    try:
        lo, hi = (float(x) for x in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError("expected LO:HI") from None
    if not hi > lo:
        raise argparse.ArgumentTypeError("range needs LO < HI")
    return lo, hi


def _floats(text: str) -> list:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError("expected comma-separated numbers") from None


def _write_rows(path: Path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([_g(v) if isinstance(v, (float, np.floating)) else v for v in r])


def _manifest(out: Path, command: str, argv, extra: dict):
    doc = {
        "command": command,
        "argv": list(argv),
        "shapectl": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "platform": platform.platform(),
        "created_unix": time.time(),
        **extra,
    }
    (out / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True, default=str), encoding="utf-8")


def _load_config(args):
    cfg = config.load(args.config)
    tr = cfg.train
    if args.seed is not None:
        tr = replace(tr, seed=args.seed, sampler=replace(tr.sampler, seed=args.seed))
    if args.workers is not None:
        tr = replace(tr, workers=args.workers)
    if args.tolerance is not None:
        tr = replace(tr, solver=replace(tr.solver, rtol=args.tolerance.rtol, atol=args.tolerance.atol))
    out = Path(args.out or cfg.out)
    return replace(cfg, train=tr), out


# ---------------------------------------------------------------- commands

def cmd_train(args) -> int:
    cfg, out = _load_config(args)
    tr = cfg.train
    out.mkdir(parents=True, exist_ok=True)

    def save(it, theta):
        checkpoint.save(out / f"checkpoint_{it:05d}", tr, theta, it)

    result = train(tr, out_dir=out, on_checkpoint=save if tr.checkpoint_every else None)
    n_iter = len(result.history)
    checkpoint.save(out / "checkpoint", tr, result.theta, n_iter)
    extra = {
        "config_path": str(cfg.source),
        "config_sha256": cfg.digest,
        "config": cfg.to_dict(),
        "seed": tr.seed,
        "workers": tr.workers,
        "iterations_run": n_iter,
        "stopped_early": result.stopped_early,
    }
    if result.history:
        extra["final_metrics"] = result.history[-1]
    if tr.method == "pdplus":
        extra["gains"] = {"k_p": float(result.theta[0]), "k_d": float(result.theta[1])}
    _manifest(out, "train", sys.argv, extra)
    print(f"trained {tr.method} for {n_iter} iterations -> {out / 'checkpoint.bin'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ck = checkpoint.load(args.checkpoint)
    tr = ck.config
    tr = replace(tr, sampler=replace(tr.sampler, n_targets=1))
    out = Path(args.out or Path(args.checkpoint).parent / "eval")
    out.mkdir(parents=True, exist_ok=True)
    solver = args.tolerance or SolverConfig(rtol=1e-8, atol=1e-8)
    batch = eval_batch(tr, args.n, args.seed)
    ev = evaluate(tr, ck.theta, batch, solver)
    ro = ev.rollout
    loop = make_loop(tr, ck.theta, batch.targets)
    times = ro.trajectory.times
    n_x = ro.n_x
    m = ro.n_samples * n_x
    U = np.stack([loop.control(t, z[:m], ck.theta) for t, z in zip(times, ro.trajectory.states)])
    traj_dir = out / "trajectories"
    traj_dir.mkdir(exist_ok=True)
    for k in range(ro.n_samples):
        X = ro.states(k)
        _write_rows(traj_dir / f"traj_{k:04d}.csv", ["t"] + [f"x{i}" for i in range(n_x)] + ["u"],
                    [[t, *X[j], *U[j, k]] for j, t in enumerate(times)])
    rows = []
    for k in range(ro.n_samples):
        tgt = batch.targets[k] if batch.targets is not None else [tr.cost.q_star, 0.0]
        rows.append([k, *batch.x0[k], *tgt, *ev.final[k], float(ev.terminal[k]), float(ev.integral[k])])
    _write_rows(out / "summary.csv",
                ["trajectory", "q0", "p0", "q_target", "p_target", "qT", "pT", "terminal", "integral"], rows)
    _write_rows(out / "aggregate.csv", ["n", "terminal", "integral"],
                [[ro.n_samples, ev.mean_terminal, ev.mean_integral]])
    _manifest(out, "eval", sys.argv, {"checkpoint": str(args.checkpoint), "seed": args.seed, "n": args.n,
                                     "rtol": solver.rtol, "atol": solver.atol,
                                     "mean_terminal": ev.mean_terminal, "mean_integral": ev.mean_integral})
    print(f"terminal {_g(ev.mean_terminal)} integral {_g(ev.mean_integral)} over {ro.n_samples} trajectories")
    return EXIT_OK


PLOT_SCRIPT = '''"""Render the landscape CSVs next to this file (needs matplotlib)."""
import csv
import sys
from pathlib import Path

import matplotlib.pyplot as plt
import numpy as np

here = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(__file__).parent


def read(name):
    with open(here / name, encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array(rows[1:], dtype=float)


_, pot = read("potential.csv")
plt.figure()
plt.plot(pot[:, 0], pot[:, 1], label="plant V")
plt.plot(pot[:, 0], pot[:, 3], label="shaped V + V*")
plt.xlabel("q")
plt.legend()
plt.savefig(here / "potential.png", dpi=150)

for f in sorted(here.glob("gain_t*.csv")):
    _, g = read(f.name)
    qs, ps = np.unique(g[:, 1]), np.unique(g[:, 2])
    K = g[:, 3].reshape(len(qs), len(ps)).T
    plt.figure()
    plt.contourf(qs, ps, K, 30)
    plt.colorbar(label="K")
    plt.xlabel("q")
    plt.ylabel("p")
    plt.savefig(here / (f.stem + ".png"), dpi=150)

if (here / "potential_setpoint.csv").exists():
    _, s = read("potential_setpoint.csv")
    qs, q_star = np.unique(s[:, 1]), np.unique(s[:, 0])
    Z = s[:, 2].reshape(len(q_star), len(qs))
    plt.figure()
    plt.contourf(qs, q_star, Z, 30)
    plt.xlabel("q")
    plt.ylabel("q*")
    plt.savefig(here / "potential_setpoint.png", dpi=150)
'''


def cmd_landscape(args) -> int:
    ck = checkpoint.load(args.checkpoint)
    tr = ck.config
    out = Path(args.out or Path(args.checkpoint).parent / "landscape")
    out.mkdir(parents=True, exist_ok=True)
    if tr.method != "oes":
        raise ContractError("landscapes are defined for learned controllers only")
    c = build_controller(tr, ck.theta)
    q = np.linspace(*args.q_range, args.nq)
    if c.setpoint_input:
        rows = []
        for qs in args.q_star:
            tot = shaped_energy_grid(c, q[:, None], np.full((len(q), 1), qs))
            rows += [[qs, qi, vi] for qi, vi in zip(q, tot)]
        _write_rows(out / "potential_setpoint.csv", ["q_star", "q", "potential"], rows)
        qs0 = np.full((len(q), 1), args.q_star[0] if args.q_star else 0.0)
    else:
        qs0 = None
    plant_v = np.asarray(c.plant.V(q), dtype=float)
    vstar = shaped_potential(c, q[:, None], qs0)
    _write_rows(out / "potential.csv", ["q", "V", "V_star", "potential"],
                [[a, b, d, b + d] for a, b, d in zip(q, plant_v, vstar)])
    p = np.linspace(*args.p_range, args.np)
    Qg, Pg = np.meshgrid(q, p, indexing="ij")
    qq, pp = Qg.ravel()[:, None], Pg.ravel()[:, None]
    slices = args.t_slices if c.time_input else [0.0]
    for ts in slices:
        t = ts * c.horizon
        if c.setpoint_input:
            k = damping_gain(c, t, qq, pp, np.full_like(qq, args.q_star[0] if args.q_star else 0.0))
        else:
            k = damping_gain(c, np.full(len(qq), t), qq, pp)
        _write_rows(out / f"gain_t{ts:.3f}.csv", ["t", "q", "p", "k"],
                    [[t, a, b, kk] for a, b, kk in zip(qq[:, 0], pp[:, 0], k[:, 0])])
    (out / "plot_landscape.py").write_text(PLOT_SCRIPT, encoding="utf-8")
    _manifest(out, "landscape", sys.argv, {"checkpoint": str(args.checkpoint)})
    print(f"landscape written to {out}")
    return EXIT_OK


def cmd_pareto(args) -> int:
    cfg, out = _load_config(args)
    out.mkdir(parents=True, exist_ok=True)
    gammas = cfg.pareto.gammas
    seeds = cfg.pareto.seeds if args.seed is None else (args.seed,)
    rows = pareto_sweep(cfg.train, gammas, seeds, n_eval=cfg.pareto.n_eval, eval_seed=cfg.eval.seed,
                        eval_solver=cfg.eval.solver)
    _write_rows(out / "pareto.csv", PARETO_FIELDS, [[r[k] for k in PARETO_FIELDS] for r in rows])
    flags = oes_not_dominated(rows)
    _write_rows(out / "dominance.csv", ["gamma", "oes_not_dominated"],
                [[g, str(flags[g]).lower()] for g in sorted(flags)])
    _manifest(out, "pareto", sys.argv, {"config_sha256": cfg.digest, "config": cfg.to_dict(),
                                       "dominance": {str(k): v for k, v in flags.items()}})
    for g in sorted(flags):
        print(f"gamma {_g(g)}: OES {'not dominated' if flags[g] else 'dominated'} by PD+")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="shapectl", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log every training iteration")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", required=True, help="TOML experiment file")
            p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--workers", type=int, help="worker processes for batch chunks (default 1)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--tolerance", type=_tolerance, metavar="RTOL:ATOL", help="solver tolerances")

    p = sub.add_parser("train", help="train a controller")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on fresh initial conditions")
    common(p, needs_config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int, default=50, help="number of trajectories")
    p.add_argument("--seed", type=int, default=12345)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("landscape", help="export learned potential and gain grids")
    common(p, needs_config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--q-range", type=_range, default=(-2 * np.pi, 2 * np.pi), metavar="LO:HI")
    p.add_argument("--p-range", type=_range, default=(-2 * np.pi, 2 * np.pi), metavar="LO:HI")
    p.add_argument("--nq", type=int, default=401)
    p.add_argument("--np", type=int, default=101)
    p.add_argument("--t-slices", type=_floats, default=[0.0, 0.5, 1.0], help="fractions of the horizon")
    p.add_argument("--q-star", type=_floats, default=[-1.0, 0.0, 1.0], help="set points for conditioned potentials")
    p.set_defaults(func=cmd_landscape)

    p = sub.add_parser("pareto", help="sweep the effort weight for both controllers")
    common(p)
    p.set_defaults(func=cmd_pareto)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "workers", None) is not None and args.workers < 1:
        print("error: --workers must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (checkpoint.CheckpointError, ContractError, TrainingAborted, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
