"""Controller checkpoints: a binary parameter vector plus a JSON metadata record.

``<stem>.bin`` uses the parameter-vector format of :mod:`shapectl.neural`
(its header digest is the SHA-256 of the architecture record) and
``<stem>.json`` holds the architecture, horizon and the full training
configuration, so a checkpoint can be evaluated without the original config.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import neural
from .config import to_dict, train_config_from_dict
from .optimize import TrainConfig, build_controller, initial_params

FORMAT = "shapectl-checkpoint/1"


class CheckpointError(ValueError):
    """Checkpoint files are missing, corrupt or inconsistent."""


def architecture(cfg: TrainConfig) -> dict:
    if cfg.method == "pdplus":
        return {"method": "pdplus", "params": ["k_p", "k_d"]}
    c = build_controller(cfg, initial_params(cfg))
    return {
        "method": "oes",
        "potential": c.potential.to_dict(),
        "gain": c.gain.to_dict(),
        "horizon": c.horizon,
        "time_input": c.time_input,
        "setpoint_input": c.setpoint_input,
    }


def _digest(arch: dict) -> bytes:
    return hashlib.sha256(json.dumps(arch, sort_keys=True).encode("utf-8")).digest()


@dataclass
class Checkpoint:
    config: TrainConfig
    theta: np.ndarray
    iteration: int
    extra: dict


def save(stem, cfg: TrainConfig, theta, iteration: int = 0, extra=None) -> tuple:
    """Write ``stem.bin`` and ``stem.json``; returns both paths."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    arch = architecture(cfg)
    theta = np.asarray(theta, dtype=float)
    expected = 2 if cfg.method == "pdplus" else neural.param_count(
        [neural.MlpSpec.from_dict(arch["potential"]), neural.MlpSpec.from_dict(arch["gain"])])
    if theta.shape != (expected,):
        raise CheckpointError(f"parameter vector has {theta.size} entries, architecture needs {expected}")
    bin_path = stem.with_suffix(".bin")
    neural.save_params(bin_path, None, theta, digest=_digest(arch))
    meta = {
        "format": FORMAT,
        "architecture": arch,
        "n_params": int(theta.size),
        "iteration": int(iteration),
        "config": to_dict(cfg),
        "extra": extra or {},
    }
    json_path = stem.with_suffix(".json")
    json_path.write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")
    return bin_path, json_path


def load(path) -> Checkpoint:
    """Read a checkpoint given either of its two files or their common stem."""
    stem = Path(path)
    if stem.suffix in (".bin", ".json"):
        stem = stem.with_suffix("")
    try:
        meta = json.loads(stem.with_suffix(".json").read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint metadata for {stem}: {exc}") from None
    if meta.get("format") != FORMAT:
        raise CheckpointError(f"{stem}.json is not a {FORMAT} record")
    cfg = train_config_from_dict(meta["config"])
    arch = architecture(cfg)
    if arch != meta["architecture"]:
        raise CheckpointError("stored architecture does not match the stored configuration")
    try:
        theta = neural.load_params(stem.with_suffix(".bin"), digest=_digest(arch))
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"{stem}.bin: {exc}") from None
    if theta.size != meta["n_params"]:
        raise CheckpointError("parameter count differs from the metadata")
    return Checkpoint(cfg, theta, int(meta.get("iteration", 0)), meta.get("extra", {}))
