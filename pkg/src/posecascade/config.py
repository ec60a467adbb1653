"""Run configuration: JSON config files as the source of truth, flags override.

A resolved config (after merging file + overrides) is serialized into every
run directory together with its seed, so any output can be regenerated.
"""

from __future__ import annotations

import copy
import json
from importlib import resources
from pathlib import Path
from typing import Optional

from .receptive import design_default_specs
from .synth import DataConfig, data_config_from_dict
from .training import TrainConfig

DEFAULT_CONFIG = {
    "seed": 7,
    "dataset": {
        "canvas": [64, 64],
        "train_count": 2000,
        "test_count": 500,
        "train_seed": 1001,
        "test_seed": 9001,
        "gen": {},
    },
    "arch": {
        "stages": 3,
        "parts": 5,
        "input_size": [64, 64],
        "heatmap_stride": 4,
        "target_stage1_rf": 24,
        "target_context_rf": 13,
        "base_width": 8,
        "context_width": 16,
        "use_center_map": True,
        "share_image_features": True,
    },
    "train": {
        "scheme": "i",
        "epochs": 20,
        "batch_size": 16,
        "learning_rate": 5e-6,
        "momentum": 0.9,
        "sigma": 5.0,
        "snapshot_every": 0,
        "rotation_range": 25.0,
        "scale_range": [0.9, 1.15],
        "flip": True,
        "finetune_fraction": 0.3333333333333333,
    },
    "eval": {
        "radii": [0.05, 0.1, 0.2],
    },
    "rf_sweep": {
        "context_rf_targets": [3, 7, 13],
        "epochs": 10,
        "learning_rate": 2e-6,
    },
}


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path: Optional[str] = None, overrides: Optional[dict] = None) -> dict:
    """Merge defaults <- config file <- overrides (later wins)."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            cfg = _deep_merge(cfg, json.load(fh))
    if overrides:
        cfg = _deep_merge(cfg, overrides)
    return cfg


def packaged_config(name: str) -> dict:
    """Load one of the configs shipped inside the package (e.g. 'toy64')."""
    text = resources.files("posecascade.configs").joinpath(f"{name}.json").read_text()
    return load_config_dict(json.loads(text))


def load_config_dict(data: dict) -> dict:
    return _deep_merge(DEFAULT_CONFIG, data)


def save_config(cfg: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")


def dataset_configs(cfg: dict):
    """(train, test) DataConfig pair from a resolved run config."""
    d = cfg["dataset"]
    base = {"canvas": d["canvas"], "gen": d.get("gen", {})}
    train = data_config_from_dict({**base, "count": d["train_count"], "seed": d["train_seed"]})
    test = data_config_from_dict({**base, "count": d["test_count"], "seed": d["test_seed"]})
    return train, test


def arch_spec(cfg: dict):
    """Build the ModelSpec described by a resolved run config."""
    a = cfg["arch"]
    return design_default_specs(
        parts=a["parts"],
        input_size=tuple(a["input_size"]),
        target_stage1_rf=a["target_stage1_rf"],
        target_context_rf=a["target_context_rf"],
        stages=a["stages"],
        heatmap_stride=a["heatmap_stride"],
        base_width=a["base_width"],
        context_width=a["context_width"],
        use_center_map=a["use_center_map"],
        share_image_features=a["share_image_features"],
    )


def train_config(cfg: dict, **overrides) -> TrainConfig:
    t = dict(cfg["train"])
    t.update(overrides)
    return TrainConfig(
        learning_rate=float(t["learning_rate"]),
        batch_size=int(t["batch_size"]),
        epochs=int(t["epochs"]),
        seed=int(t.get("seed", cfg["seed"])),
        sigma=float(t["sigma"]),
        scheme=str(t["scheme"]),
        snapshot_every=int(t.get("snapshot_every", 0)),
        momentum=float(t.get("momentum", 0.0)),
        rotation_range=float(t.get("rotation_range", 40.0)),
        scale_range=tuple(t.get("scale_range", (0.7, 1.3))),
        flip=bool(t.get("flip", True)),
        stagewise_cap=t.get("stagewise_cap"),
        finetune_fraction=float(t.get("finetune_fraction", 1.0 / 3.0)),
    )
