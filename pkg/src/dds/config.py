"""Run configuration: one JSON file drives every pipeline stage.

A config is a plain nested dict with sections "skill", "iql", "eval";
defaults fill anything missing.  Flag overrides use dotted paths
("iql.tau=0.9") and always win over the file.
"""

from __future__ import annotations

import json
import os

from .iql import IQLConfig
from .skills import SkillTrainConfig


class ConfigError(Exception):
    """Invalid configuration or checkpoint/config mismatch."""


DEFAULTS = {
    "env": "pointmaze-medium",
    "seed": 0,
    "dtype": "float32",   # training/inference dtype; tests use float64
    "num_episodes": 400,
    "gamma": 0.99,
    "skill": {},       # SkillTrainConfig field overrides
    "iql": {},         # IQLConfig field overrides (num_skills comes from skill)
    "eval": {
        "episodes": 20,
        "seeds": [0, 1, 2, 3, 4],
        "selection": "greedy",
    },
}


def _deep_merge(base, override):
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(config: dict, dotted: str):
    """Set one 'a.b.c=value' path in place; value parsed as JSON, else string."""
    if "=" not in dotted:
        raise ConfigError(f"override must look like key=value, got {dotted!r}")
    path, _, raw = dotted.partition("=")
    keys = path.strip().split(".")
    if not all(keys):
        raise ConfigError(f"bad override path {path!r}")
    node = config
    for k in keys[:-1]:
        nxt = node.get(k)
        if not isinstance(nxt, dict):
            nxt = {}
            node[k] = nxt
        node = nxt
    node[keys[-1]] = _parse_value(raw.strip())


def load_config(path=None, overrides=(), env_seed=None):
    """Merge defaults <- file <- overrides <- DDS_SEED; returns a plain dict."""
    config = json.loads(json.dumps(DEFAULTS))
    if path is not None:
        try:
            with open(path) as f:
                file_cfg = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file is not valid JSON: {e}") from e
        if not isinstance(file_cfg, dict):
            raise ConfigError("top-level config must be a JSON object")
        config = _deep_merge(config, file_cfg)
    for item in overrides:
        apply_override(config, item)
    if env_seed is None:
        env_seed = os.environ.get("DDS_SEED")
    if env_seed is not None:
        try:
            config["seed"] = int(env_seed)
        except ValueError:
            raise ConfigError(f"DDS_SEED must be an integer, got {env_seed!r}") from None
    if config.get("dtype") not in ("float32", "float64"):
        raise ConfigError(
            f"dtype must be 'float32' or 'float64', got {config.get('dtype')!r}"
        )
    return config


def skill_config(config: dict) -> SkillTrainConfig:
    try:
        return SkillTrainConfig(**config.get("skill", {}))
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad skill config: {e}") from e


def iql_config(config: dict, num_skills: int) -> IQLConfig:
    section = dict(config.get("iql", {}))
    section.setdefault("num_skills", num_skills)
    if section["num_skills"] != num_skills:
        raise ConfigError(
            f"iql.num_skills={section['num_skills']} does not match "
            f"skill codebook size {num_skills}"
        )
    try:
        return IQLConfig(**section)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad iql config: {e}") from e


def check_skill_compat(config: dict, sidecar: dict):
    """The skill checkpoint must match the config's K, D_z, and H."""
    sc = skill_config(config)
    mismatches = []
    for label, want, have in (
        ("num_skills", sc.num_skills, sidecar.get("num_skills")),
        ("skill_dim", sc.skill_dim, sidecar.get("skill_dim")),
        ("horizon", sc.horizon, sidecar.get("horizon")),
    ):
        if want != have:
            mismatches.append(f"{label}: config={want} checkpoint={have}")
    if mismatches:
        raise ConfigError("skill checkpoint mismatch: " + "; ".join(mismatches))
