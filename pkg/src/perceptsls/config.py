"""Single-JSON run configuration: embedded defaults, schema validation with field
paths, and deterministic hashing so every run is self-describing."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path


class ConfigError(ValueError):
    """Schema violation; the message carries the offending field path."""


def default_config() -> dict:
    """Desk-scale defaults; the world constants come from scripts/calibrate_world.py."""
    return {
        "seed": 20240801,
        "system": {"dt": 0.1, "axes": 2},
        "scene": {
            "width": 64,
            "height": 64,
            "world_window": [-20.0, 20.0, -20.0, 20.0],
            "radius": 6.0,
            "blur_sigma": 4.0,
        },
        "reference": {"center": [0.0, 0.0], "radius": 12.0, "period": 1200, "phase": 0.0},
        "training": {
            # training rollouts track radially offset copies of the orbit so the
            # data covers the safe radius; full-information LQR drives them, and
            # each trajectory spans a full period so there are no angular holes
            "trajectories": 6,
            "steps": 1200,
            "radial_offsets": [-2.0, -1.2, -0.4, 0.4, 1.2, 2.0],
            "v_bound": 0.1,
            "lqr_q": [1.0, 0.1],
            "lqr_r": [0.01],
        },
        "perception": {"ridge_scale": 1e-6},
        "safety": {
            # epsilon/tau/L calibrated for the default scene (see the calibration script)
            "r": 1.6,
            "epsilon": 0.08,
            "tau": 1.0,
            "L": 0.6,
            "slope_subsample": 400,
            "r_ref_margin": 0.0,
        },
        "synthesis": {
            "T": 200,
            "q_pos": 1.0,
            "q_vel": 4.0,
            "r_act": 8.0,
            "delta_ref": 0.08,
            "eps_w": None,
            "eps_e": None,
            "alpha": None,
            "h2_alpha_factor": 1.1,
        },
        "experiments": {
            "rollouts": 200,
            "horizon": 400,
            "v_bound": 0.1,
            "controllers": ["lqg", "nominal-l1", "robust-l1", "robust-h2"],
            "lqg_w_scale": 1.0,
            "lqg_v_scale": None,
        },
        "necessity": {
            "dt": 0.5,
            "T": 60,
            "alpha_factors": [0.5, 0.8, 0.9, 0.95, 1.05, 1.2, 1.5],
        },
        "profile": {"grid_step": 0.45, "pad": 2.0},
    }


FAST_OVERRIDES = {
    "training": {"trajectories": 3, "radial_offsets": [-1.6, 0.0, 1.6]},
    "safety": {"epsilon": 0.16, "slope_subsample": 50},
    "synthesis": {"T": 60},
    "experiments": {"rollouts": 50, "horizon": 200},
    "necessity": {"T": 40},
    "profile": {"grid_step": 0.9},
}

# (type, required) per field path; "num" accepts int or float, "?num" also None
_SCHEMA = {
    "seed": "int",
    "system.dt": "num",
    "system.axes": "int",
    "scene.width": "int",
    "scene.height": "int",
    "scene.world_window": "list4",
    "scene.radius": "num",
    "scene.blur_sigma": "num",
    "reference.center": "list2",
    "reference.radius": "num",
    "reference.period": "int",
    "reference.phase": "num",
    "training.trajectories": "int",
    "training.steps": "int",
    "training.radial_offsets": "listnum",
    "training.v_bound": "num",
    "training.lqr_q": "listnum",
    "training.lqr_r": "listnum",
    "perception.ridge_scale": "num",
    "safety.r": "num",
    "safety.epsilon": "num",
    "safety.tau": "num",
    "safety.L": "num",
    "safety.slope_subsample": "?int",
    "safety.r_ref_margin": "num",
    "synthesis.T": "int",
    "synthesis.q_pos": "num",
    "synthesis.q_vel": "num",
    "synthesis.r_act": "num",
    "synthesis.delta_ref": "num",
    "synthesis.eps_w": "?num",
    "synthesis.eps_e": "?num",
    "synthesis.alpha": "?num",
    "synthesis.h2_alpha_factor": "num",
    "experiments.rollouts": "int",
    "experiments.horizon": "int",
    "experiments.v_bound": "num",
    "experiments.controllers": "liststr",
    "experiments.lqg_w_scale": "num",
    "experiments.lqg_v_scale": "?num",
    "necessity.dt": "num",
    "necessity.T": "int",
    "necessity.alpha_factors": "listnum",
    "profile.grid_step": "num",
    "profile.pad": "num",
}

_CONTROLLERS = ("lqg", "nominal-l1", "robust-l1", "robust-h2")


def _check(kind: str, value, path: str):
    optional = kind.startswith("?")
    if optional:
        if value is None:
            return
        kind = kind[1:]
    if kind == "int":
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"{path}: expected integer, got {value!r}")
    elif kind == "num":
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ConfigError(f"{path}: expected number, got {value!r}")
    elif kind == "list4":
        if not (isinstance(value, list) and len(value) == 4 and all(isinstance(v, (int, float)) for v in value)):
            raise ConfigError(f"{path}: expected list of 4 numbers")
    elif kind == "list2":
        if not (isinstance(value, list) and len(value) == 2 and all(isinstance(v, (int, float)) for v in value)):
            raise ConfigError(f"{path}: expected list of 2 numbers")
    elif kind == "listnum":
        if not (isinstance(value, list) and all(isinstance(v, (int, float)) for v in value)):
            raise ConfigError(f"{path}: expected list of numbers")
    elif kind == "liststr":
        if not (isinstance(value, list) and all(isinstance(v, str) for v in value)):
            raise ConfigError(f"{path}: expected list of strings")
    else:  # pragma: no cover
        raise AssertionError(kind)


def validate_config(cfg: dict):
    for path, kind in _SCHEMA.items():
        parts = path.split(".")
        node = cfg
        for part in parts[:-1]:
            if not isinstance(node, dict) or part not in node:
                raise ConfigError(f"{'.'.join(parts[: parts.index(part) + 1])}: missing section")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"{path}: missing field")
        _check(kind, node[parts[-1]], path)
    for name in cfg["experiments"]["controllers"]:
        if name not in _CONTROLLERS:
            raise ConfigError(f"experiments.controllers: unknown controller {name!r}")
    if cfg["system"]["dt"] <= 0:
        raise ConfigError("system.dt: must be positive")
    if cfg["experiments"]["v_bound"] < 0:
        raise ConfigError("experiments.v_bound: must be nonnegative")
    if cfg["safety"]["epsilon"] > cfg["safety"]["r"]:
        raise ConfigError("safety.epsilon: must not exceed safety.r")
    if not (0 < cfg["safety"]["tau"] <= cfg["safety"]["r"]):
        raise ConfigError("safety.tau: must lie in (0, safety.r]")


def merge(base: dict, overrides: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in overrides.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def load_config(path: Path | None, fast: bool = False, seed: int | None = None) -> dict:
    cfg = default_config()
    if path is not None:
        with open(path) as f:
            user = json.load(f)
        cfg = merge(cfg, user)
    if fast:
        cfg = merge(cfg, FAST_OVERRIDES)
    if seed is not None:
        cfg["seed"] = int(seed)
    validate_config(cfg)
    return cfg


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()
