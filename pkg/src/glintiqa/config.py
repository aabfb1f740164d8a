"""Run configuration files (TOML or YAML) and the config hash stamped into
every artifact."""
from __future__ import annotations

import hashlib
import json
from enum import Enum
from pathlib import Path

import yaml

from .errors import ConfigError

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib


def _jsonable(o):
    if isinstance(o, Enum):
        return o.value
    if isinstance(o, (set, frozenset)):
        return sorted(o)
    if isinstance(o, Path):
        return o.as_posix()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_jsonable)


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:16]


def load_config(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}", module="cli_app")
    text = path.read_text()
    try:
        if path.suffix.lower() == ".toml":
            data = tomllib.loads(text)
        elif path.suffix.lower() in (".yaml", ".yml"):
            data = yaml.safe_load(text) or {}
        else:
            raise ConfigError(f"config must be .toml or .yaml, got {path.name}", module="cli_app")
    except (tomllib.TOMLDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}", module="cli_app") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must contain a mapping at top level", module="cli_app")
    return data


# run-config keys -> BackboneConfig / ModelConfig fields
_BACKBONE_KEYS = {
    "vit_blocks": "vit_block_indices",
    "cnn_stages": "cnn_stage_count",
    "cnn_channels": "cnn_stage_channels",
    "patch_size": "patch_size",
    "embed_dim": "embed_dim",
    "frozen_prefix": "frozen_prefix",
    "img_size": "img_size",
    "cnn_arch": "cnn_arch",
    "vit_depth": "vit_depth",
    "vit_heads": "vit_heads",
    "vit_weights": "vit_weights",
    "cnn_weights": "cnn_weights",
}
_MODEL_KEYS = ("fusion_order", "dropout", "siem_padding")


def model_config_from_run(run: dict, base=None):
    """Translate the ``[model]`` table of a run config into a ModelConfig,
    starting from ``base`` (default: the full-size model)."""
    from .model import ModelConfig

    base = base or ModelConfig()
    d = base.to_dict()
    unknown = set(run) - set(_BACKBONE_KEYS) - set(_MODEL_KEYS)
    if unknown:
        raise ConfigError(f"unknown model config keys: {sorted(unknown)}", module="cli_app")
    for key, field_name in _BACKBONE_KEYS.items():
        if key in run:
            d["backbone"][field_name] = run[key]
    if "cnn_stages" in run and "cnn_channels" not in run:
        if d["backbone"]["cnn_arch"] == "resnet50":
            d["backbone"]["cnn_stage_channels"] = [256, 512, 1024, 2048][: run["cnn_stages"]]
    for key in _MODEL_KEYS:
        if key in run:
            d[key] = run[key]
    return ModelConfig.from_dict(d)
