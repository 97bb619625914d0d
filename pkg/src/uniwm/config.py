"""Single JSON run configuration: schema validation, defaults, hashing.

Every run is driven by one config file with sections for the world, the
tokenizer, the model, training, rollout, and evaluation. Unknown keys are
rejected so an ablation sweep is exactly a config diff.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import jsonschema

DEFAULTS: dict = {
    "world": {
        "width": 16,
        "height": 16,
        "resolution": 32,
        "n_train": 2000,
        "n_eval": 200,
        "seed": 7,
        "path_min": 3,
        "path_max": 4,
        "wall_density": 0.14,
    },
    "tokenizer": {
        "codebook_size": 256,
        "patch": 4,
        "pose_bins": 64,
        "fit_patches": 120000,
        "fit_frames": 2500,
        "fit_iters": 25,
        "fit_seed": 0,
    },
    "model": {
        "n_layers": 8,
        "n_heads": 4,
        "d_model": 128,
        "context_len": 512,
        "l_save_count": 5,
        "rope_base": 10000.0,
    },
    "train": {
        "lr": 2e-4,
        "epochs": 2,
        "batch_size": 16,
        "grad_accum": 1,
        "seed": 0,
        "weight_decay": 0.01,
        "window_stride": 2,
        "samples_per_epoch": 4500,
        "plan_loss": "bin_token",
        "world_loss": "reconstruction",
        "label_smooth_eps": 0.1,
        "step_strategy": "interleave",
        "checkpoint_every": 1,
    },
    "rollout": {
        "max_steps": 20,
        "memory": "full",
        "top_k": 3,
        "gamma": 0.2,
        "cross_capacity": None,
        "temperature": 0.0,
    },
    "eval": {
        "at_n": [1, 5],
        "max_anchors": 4,
        "at_n_trajectories": 60,
        "workers": 0,
    },
}


def _section_schema(defaults: dict, enums: dict | None = None) -> dict:
    props = {}
    for key, value in defaults.items():
        if enums and key in enums:
            props[key] = {"enum": enums[key]}
        elif isinstance(value, bool):
            props[key] = {"type": "boolean"}
        elif isinstance(value, int):
            props[key] = {"type": "integer"}
        elif isinstance(value, float):
            props[key] = {"type": "number"}
        elif isinstance(value, list):
            props[key] = {"type": "array", "items": {"type": "integer", "minimum": 1}}
        elif value is None:
            props[key] = {"type": ["integer", "null"]}
        else:
            props[key] = {"type": "string"}
    return {"type": "object", "properties": props, "additionalProperties": False}


SCHEMA = {
    "type": "object",
    "properties": {
        "world": _section_schema(DEFAULTS["world"]),
        "tokenizer": _section_schema(DEFAULTS["tokenizer"]),
        "model": _section_schema(DEFAULTS["model"], enums={"l_save_count": [1, 2, 3, 4, 5, 6, 7, 8, 16, 32, "all"]}),
        "train": _section_schema(
            DEFAULTS["train"],
            enums={
                "plan_loss": ["bin_token", "label_smoothing"],
                "world_loss": ["reconstruction", "label_smoothing"],
                "step_strategy": ["interleave", "predict_both"],
            },
        ),
        "rollout": _section_schema(DEFAULTS["rollout"], enums={"memory": ["off", "intra", "full"]}),
        "eval": _section_schema(DEFAULTS["eval"]),
    },
    "additionalProperties": False,
}
# fields whose defaults are ints but that accept null/float
SCHEMA["properties"]["train"]["properties"]["samples_per_epoch"] = {"type": ["integer", "null"]}
SCHEMA["properties"]["eval"]["properties"]["at_n_trajectories"] = {"type": ["integer", "null"]}
SCHEMA["properties"]["model"]["properties"]["rope_base"] = {"type": "number"}
SCHEMA["properties"]["train"]["properties"]["lr"] = {"type": "number"}


class ConfigError(ValueError):
    pass


def merge_defaults(raw: dict) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    for section, values in raw.items():
        cfg[section].update(values)
    return cfg


def validate_config(raw: dict) -> dict:
    """Validate a raw config dict and return it with defaults merged in."""
    try:
        jsonschema.validate(raw, SCHEMA)
    except jsonschema.ValidationError as e:
        raise ConfigError(f"config invalid at {'/'.join(str(p) for p in e.absolute_path)}: {e.message}") from e
    return merge_defaults(raw)


def load_config(path: str | Path) -> dict:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from e
    return validate_config(raw)


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()).hexdigest()
