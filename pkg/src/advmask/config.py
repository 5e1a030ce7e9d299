"""Experiment configuration: YAML (or JSON) merged over documented defaults.

Schema version 1.  Every command reads the sections it needs; the resolved
configuration is written next to the outputs as ``config.snapshot.yaml`` and
can be fed back with ``--config`` to repeat the run.
"""

import copy
from pathlib import Path

import yaml

from .errors import InvalidConfig, InputError

SCHEMA_VERSION = 1

DEFAULTS = {
    "version": SCHEMA_VERSION,
    "seed": 0,
    "workers": 1,
    "output_dir": "advmask-out",
    "models": {"manifest": None, "names": ["toy"]},
    "renderer": {
        "landmark_backend": "synthetic",
        "reconstruction_backend": "ellipsoid",
        "augmentation": {"translation": [-4.0, 4.0], "rotation": [-8.0, 8.0], "contrast": [0.9, 1.1],
                         "brightness": [-0.05, 0.05], "noise_sigma": [0.0, 0.02]},
    },
    # root/<identity>/<images>; `synthetic` generates faces in memory instead
    "dataset": {"root": None, "split": None, "gallery_root": None, "gallery_split": None, "synthetic": None},
    "gallery": {"mode": "mask_augmented", "images_per_identity": 5},
    "optimizer": {"lambda_tv": 0.1, "learning_rate": 0.01, "batch_size": 32, "max_iterations": 1000,
                  "mode": "universal", "identity": None, "plateau_window": 0, "plateau_tol": 1e-4},
    "eval": {"checkpoint": None, "conditions": ["clean", "blue", "random", "adv"], "control_root": None,
             "augment": False},
    "transfer": {"masks": {}, "controls": ["clean", "blue", "random"]},
    "calibrate": {"far_target": 0.01, "masks": ["blue", "black", "white"], "scores": None},
    "simulate": {"streams": [], "threshold": None, "threshold_file": None, "detector": "passthrough",
                 "require_argmax": True, "persistence": {"window": 10, "hits_required": 7}},
    "defend": {"mode": "substitute", "input": None, "masks": {}, "replacement": "blue"},
    "report": {"input": None},
}


def deep_merge(base, override):
    out = copy.deepcopy(base)
    for key, value in (override or {}).items():
        if isinstance(value, dict) and isinstance(out.get(key), dict) and out[key]:
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path=None, **overrides):
    """Defaults <- file <- non-None keyword overrides (seed, workers, output_dir)."""
    data = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise InputError(f"config file not found: {path}", path=path)
        try:
            data = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise InvalidConfig(f"cannot parse {path}: {exc}", path=path) from exc
        if not isinstance(data, dict):
            raise InvalidConfig(f"{path} must hold a mapping", path=path)
        base = path.parent
        for section, key in (("dataset", "root"), ("dataset", "split"), ("dataset", "gallery_root"),
                             ("dataset", "gallery_split"), ("models", "manifest"), ("eval", "checkpoint"),
                             ("eval", "control_root"), ("calibrate", "scores"), ("simulate", "threshold_file"), ("defend", "input"),
                             ("report", "input")):
            value = data.get(section, {}).get(key) if isinstance(data.get(section), dict) else None
            if isinstance(value, str) and not Path(value).is_absolute():
                data[section][key] = str(base / value)
        _resolve_mask_paths(data, base)
    config = deep_merge(DEFAULTS, data)
    if config.get("version") != SCHEMA_VERSION:
        raise InvalidConfig(f"unsupported config version {config.get('version')!r}")
    for key, value in overrides.items():
        if value is not None:
            config[key] = value
    return config


def _resolve_mask_paths(data, base):
    def fix(value):
        return value if Path(value).is_absolute() else str(base / value)

    masks = (data.get("transfer") or {}).get("masks") or {}
    for name, spec in masks.items():
        if isinstance(spec, str):
            masks[name] = fix(spec)
        elif isinstance(spec, dict) and isinstance(spec.get("path"), str):
            spec["path"] = fix(spec["path"])
    masks = (data.get("defend") or {}).get("masks") or {}
    for name, value in masks.items():
        if isinstance(value, str):
            masks[name] = fix(value)


def save_config(path, config):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(config, sort_keys=True))
