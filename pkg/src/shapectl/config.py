"""Experiment configuration files.

Configurations are TOML documents with the sections ``run``, ``plant``,
``controller``, ``cost``, ``sampler``, ``solver``, ``optimizer``, ``eval`` and
``pareto``; every key is optional and unknown keys are rejected with the line
they appear on. Any key can be overridden from the environment as
``SHAPECTL_<SECTION>__<KEY>=<toml value>``, e.g. ``SHAPECTL_COST__GAMMA=0.5``.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .closed_loop import CostSpec
from .ode import SolverConfig
from .optimize import SamplerConfig, TrainConfig
from .ph import ContractError, PendulumParams

ENV_PREFIX = "SHAPECTL_"


class ConfigError(ValueError):
    """Configuration file is unreadable or inconsistent."""


@dataclass(frozen=True)
class EvalSettings:
    n: int = 50
    seed: int = 12345
    rtol: float = 1e-8
    atol: float = 1e-8

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("eval.n must be at least 1")
        SolverConfig(self.rtol, self.atol)

    @property
    def solver(self) -> SolverConfig:
        return SolverConfig(rtol=self.rtol, atol=self.atol)


@dataclass(frozen=True)
class ParetoSettings:
    gammas: tuple = ()
    seeds: tuple = (0,)
    n_eval: int = 256

    def __post_init__(self):
        if any(g < 0 for g in self.gammas):
            raise ValueError("pareto gammas must be non-negative")
        if self.n_eval < 1:
            raise ValueError("pareto.n_eval must be at least 1")


@dataclass(frozen=True)
class ExperimentConfig:
    train: TrainConfig
    eval: EvalSettings = EvalSettings()
    pareto: ParetoSettings = ParetoSettings()
    out: str = "runs/default"
    source: Optional[str] = None
    digest: str = field(default="", compare=False)

    def to_dict(self) -> dict:
        return to_dict(self)


_RUN_KEYS = {"method": "method", "seed": "seed", "workers": "workers", "chunks": "chunks", "out": None}
_OPT_KEYS = {"iterations", "lr", "beta1", "beta2", "adam_eps", "adjoint_mode", "checkpoint_every",
             "stop_window", "stop_rtol", "max_failure_fraction"}
_CTRL_KEYS = {"width", "pd_init"}
_SOLVER_KEYS = {f.name for f in dataclasses.fields(SolverConfig)}
_SECTIONS = {
    "run": set(_RUN_KEYS),
    "plant": {f.name for f in dataclasses.fields(PendulumParams)},
    "controller": _CTRL_KEYS,
    "cost": {f.name for f in dataclasses.fields(CostSpec)},
    "sampler": {f.name for f in dataclasses.fields(SamplerConfig) if f.name != "seed"},
    "solver": _SOLVER_KEYS,
    "optimizer": _OPT_KEYS,
    "eval": {f.name for f in dataclasses.fields(EvalSettings)},
    "pareto": {f.name for f in dataclasses.fields(ParetoSettings)},
}


def _line_of(text: str, section: Optional[str], key: Optional[str]) -> int:
    current = None
    for no, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        m = re.match(r"^\[\s*([A-Za-z0-9_.-]+)\s*\]", s)
        if m:
            current = m.group(1)
            if key is None and current == section:
                return no
            continue
        if key is not None and current == section and re.match(rf"^\"?{re.escape(key)}\"?\s*=", s):
            return no
    return 0


def _err(path, text, section, key, msg) -> ConfigError:
    line = _line_of(text, section, key)
    where = f"{path}:{line}" if line else str(path)
    return ConfigError(f"{where}: {msg}")


def _apply_env(doc: dict, env: Mapping[str, str]) -> dict:
    for name, raw in sorted(env.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        parts = name[len(ENV_PREFIX):].lower().split("__")
        if len(parts) != 2:
            raise ConfigError(f"environment override {name} must look like {ENV_PREFIX}SECTION__KEY")
        try:
            value = tomllib.loads(f"v = {raw}")["v"]
        except tomllib.TOMLDecodeError:
            value = raw  # bare strings such as method names
        doc.setdefault(parts[0], {})[parts[1]] = value
    return doc


def parse(text: str, path="<config>", env: Optional[Mapping[str, str]] = None) -> ExperimentConfig:
    """Build and validate an :class:`ExperimentConfig` from TOML text."""
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    doc = _apply_env(doc, os.environ if env is None else env)
    for section, body in doc.items():
        if section not in _SECTIONS:
            raise _err(path, text, section, None, f"unknown section [{section}]")
        if not isinstance(body, dict):
            raise _err(path, text, None, section, f"{section} must be a table")
        for key in body:
            if key not in _SECTIONS[section]:
                raise _err(path, text, section, key, f"unknown key {key!r} in [{section}]")

    def sect(name):
        return dict(doc.get(name, {}))

    def build(section, cls, values):
        for k, v in values.items():
            if isinstance(v, list):
                values[k] = tuple(v)
        try:
            return cls(**values)
        except (TypeError, ValueError, ContractError) as exc:
            key = next(iter(values), None)
            for k in values:
                if k in str(exc):
                    key = k
                    break
            raise _err(path, text, section, key, f"[{section}] {exc}") from None

    run = sect("run")
    out = run.pop("out", "runs/default")
    plant = build("plant", PendulumParams, sect("plant"))
    cost = build("cost", CostSpec, sect("cost"))
    seed = int(run.get("seed", 0))
    sampler = build("sampler", SamplerConfig, {**sect("sampler"), "seed": seed})
    solver = build("solver", SolverConfig, {"rtol": 1e-5, "atol": 1e-5, **sect("solver")})
    train = build("run", TrainConfig, {**run, **sect("optimizer"), **sect("controller"),
                                       "plant": plant, "cost": cost, "sampler": sampler, "solver": solver})
    ev = build("eval", EvalSettings, sect("eval"))
    pareto = build("pareto", ParetoSettings, sect("pareto"))
    digest = hashlib.sha256(text.encode("utf-8")).hexdigest()
    return ExperimentConfig(train, ev, pareto, str(out), str(path), digest)


def load(path, env: Optional[Mapping[str, str]] = None) -> ExperimentConfig:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise FileNotFoundError(f"cannot read config {path}: {exc.strerror}") from None
    return parse(text, p, env)


def _plain(v):
    if dataclasses.is_dataclass(v):
        return {f.name: _plain(getattr(v, f.name)) for f in dataclasses.fields(v)}
    if isinstance(v, (tuple, list)):
        return [_plain(x) for x in v]
    if isinstance(v, float) and not math.isfinite(v):
        return repr(v)
    return v


def to_dict(obj) -> dict:
    """JSON-ready nested dictionary of a configuration dataclass."""
    return _plain(obj)


def train_config_from_dict(d: dict) -> TrainConfig:
    """Inverse of ``to_dict`` for :class:`TrainConfig` (used by checkpoints)."""
    d = dict(d)
    tup = lambda x: {k: tuple(v) if isinstance(v, list) else v for k, v in x.items()}
    d["plant"] = PendulumParams(**d["plant"])
    d["cost"] = CostSpec(**tup(d["cost"]))
    d["sampler"] = SamplerConfig(**tup(d["sampler"]))
    d["solver"] = SolverConfig(**d["solver"])
    d = tup(d)
    return TrainConfig(**d)


def dumps_json(obj) -> str:
    return json.dumps(to_dict(obj) if dataclasses.is_dataclass(obj) else obj, indent=2, sort_keys=True)
