"""Layered run configuration: built-in defaults < config file (YAML or JSON) < command-line flags."""

from __future__ import annotations

import copy
import json
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigurationError

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "out": "runs",
    "model": {"dim": 64, "heads": 4, "fusion_depth": 2, "single_depth": 2, "resolution": 32, "mllm_dim": 32},
    "data": {"count": 256, "resolution": 32, "num_styles": 8, "max_glyphs": 2, "m": 2, "val_fraction": 0.1},
    "vae": {"warmup_steps": 800, "decoder_steps": 1500, "lr": 2e-3},
    "stage1": {"steps": 2000, "batch_size": 32, "lr": 1e-3, "lr_schedule": "cosine", "cond_dropout": 0.1},
    "stage2": {"steps": 500, "batch_size": 16, "lr": 3e-3, "lr_schedule": "cosine"},
    "stage3_sft": {"steps": 200, "batch_size": 16, "lr": 1e-3, "lr_schedule": "constant", "adapter_rank": 8},
    "stage3_dpo": {"steps": 200, "batch_size": 16, "lr": 1e-3, "lr_schedule": "constant", "k_candidates": 4,
                   "candidate_steps": 8, "dpo_beta": 500.0, "dpo_weighting": "constant", "scorer": "neg-mse"},
    "filter": {"k": 16, "threshold": 0.0, "mode": "keep_above", "halve": False},
    "sampler": {"steps": 16, "cfg_scale": 1.0},
    "clients": {"mllm": "stub", "planner": "stub", "ocr": "oracle", "t2i": "stub", "inpainter": "median",
                "timeout_s": 30.0, "retries": 2},
}


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def read_config_file(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    text = path.read_text()
    try:
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as e:
        raise ConfigurationError(f"cannot parse {path}: {e}") from e
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path} must hold a mapping at the top level")
    return data


def parse_assignment(text: str) -> dict:
    """``a.b.c=value`` -> {"a": {"b": {"c": value}}}; the value is parsed as YAML scalar."""
    if "=" not in text:
        raise ConfigurationError(f"override {text!r} must look like key.path=value")
    key, raw = text.split("=", 1)
    parts = [p for p in key.strip().split(".") if p]
    if not parts:
        raise ConfigurationError(f"override {text!r} has an empty key")
    value = yaml.safe_load(raw) if raw.strip() else ""
    out: dict = {}
    cur = out
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = value
    return out


def load_config(path: str | Path | None = None, overrides: list[str] | None = None,
                flags: dict | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        cfg = deep_merge(cfg, read_config_file(path))
    for item in overrides or []:
        cfg = deep_merge(cfg, parse_assignment(item))
    if flags:
        cfg = deep_merge(cfg, {k: v for k, v in flags.items() if v is not None})
    return cfg
