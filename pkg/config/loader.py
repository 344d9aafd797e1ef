import json
import os
from dataclasses import fields, is_dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, Literal, Optional, Tuple, Union, get_args, get_origin, get_type_hints

import yaml

from config.schema import DiffusionConfig, RatebenchConfig, SweepConfig, TrainConfig
from utilities.error_handler import ConfigError

MAX_CONFIG_SIZE = 1 * 1024 * 1024  # 1MB
SUPPORTED_CONFIG_TYPES = [".yaml", ".yml", ".json"]
TOP_LEVEL_SECTIONS = ("train", "sweep", "diffusion", "output_root")


def _join(prefix: str, key: str) -> str:
    return f"{prefix}.{key}" if prefix else key


def _coerce(tp: Any, value: Any, key: str) -> Any:
    origin, args = get_origin(tp), get_args(tp)

    if origin is Union:
        if value is None:
            if type(None) in args:
                return None
            raise ConfigError(key, "must not be null")
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, key)

    if origin is Literal:
        if value not in args:
            raise ConfigError(key, f"must be one of {list(args)}, got {value!r}")
        return value

    if is_dataclass(tp):
        return _build(tp, value, key)

    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(key, f"must be a list, got {type(value).__name__}")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, f"{key}[{i}]") for i, v in enumerate(value))
        if len(value) != len(args):
            raise ConfigError(key, f"must have exactly {len(args)} entries")
        return tuple(_coerce(a, v, f"{key}[{i}]") for i, (a, v) in enumerate(zip(args, value)))

    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(key, f"must be a boolean, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"must be an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"must be a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(key, f"must be a string, got {value!r}")
        return value
    raise ConfigError(key, f"unsupported config type {tp}")


def _build(cls, data: Any, prefix: str, preset: Optional[Dict[str, Any]] = None):
    """Instantiate a config dataclass from a plain mapping, rejecting unknown keys"""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(prefix or "<root>", "must be a mapping")

    hints = get_type_hints(cls)
    preset = preset or {}
    allowed = {f.name for f in fields(cls) if f.init} - set(preset)
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(_join(prefix, unknown[0]), "unknown key")

    kwargs = {name: _coerce(hints[name], value, _join(prefix, name)) for name, value in data.items()}
    kwargs.update(preset)
    try:
        return cls(**kwargs)
    except ConfigError as e:
        raise ConfigError(_join(prefix, e.key), e.detail) from e


def _set_nested(tree: Dict[str, Any], dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    if parts[0] not in TOP_LEVEL_SECTIONS:
        parts = ["train"] + parts  # `bottleneck.passthrough_prob` means the train section
    node = tree
    for part in parts[:-1]:
        child = node.get(part)
        if child is None:
            child = node[part] = {}
        if not isinstance(child, dict):
            raise ConfigError(dotted, f"cannot set below non-mapping '{part}'")
        node = child
    node[parts[-1]] = value


def apply_overrides(raw: Dict[str, Any], overrides: Iterable[str]) -> Dict[str, Any]:
    """Apply `key=value` overrides; values use YAML scalar syntax (0.5, true, [1, 2])"""
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(item, "override must look like key=value")
        key, text = item.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(item, "override key is empty")
        try:
            value = yaml.safe_load(text)
        except yaml.YAMLError as e:
            raise ConfigError(key, f"unparseable override value: {e}") from e
        _set_nested(raw, key, value)
    return raw


def read_config_document(path: Union[str, Path]) -> Dict[str, Any]:
    """Read a YAML or JSON config document into a plain dict"""
    path = Path(path)
    if path.suffix.lower() not in SUPPORTED_CONFIG_TYPES:
        raise ConfigError(str(path), f"config must be one of {SUPPORTED_CONFIG_TYPES}")
    if not path.is_file():
        raise ConfigError(str(path), "config file not found")
    if os.path.getsize(path) > MAX_CONFIG_SIZE:
        raise ConfigError(str(path), f"config file exceeds {MAX_CONFIG_SIZE/1024/1024}MB limit")

    try:
        with open(path, "r", encoding="utf-8") as f:
            if path.suffix.lower() == ".json":
                config = json.load(f)
            else:
                config = yaml.safe_load(f)
    except (yaml.YAMLError, json.JSONDecodeError) as e:
        raise ConfigError(str(path), f"invalid config format: {e}") from e

    if config is None:
        config = {}
    if not isinstance(config, dict):
        raise ConfigError(str(path), "config must be a mapping at top level")
    return config


def config_from_dict(raw: Dict[str, Any]) -> RatebenchConfig:
    unknown = sorted(set(raw) - set(TOP_LEVEL_SECTIONS))
    if unknown:
        raise ConfigError(unknown[0], "unknown key")

    train = train_config_from_dict(raw.get("train"))
    sweep = None
    if raw.get("sweep") is not None:
        sweep = _build(SweepConfig, raw["sweep"], "sweep", preset={"base": train})
    diffusion = _build(DiffusionConfig, raw.get("diffusion"), "diffusion")
    output_root = _coerce(Optional[str], raw.get("output_root"), "output_root")
    return RatebenchConfig(train=train, sweep=sweep, diffusion=diffusion, output_root=output_root)


def train_config_from_dict(raw: Optional[Dict[str, Any]]) -> TrainConfig:
    """Also used to rebuild configs stored inside checkpoints"""
    return _build(TrainConfig, raw, "train")


def parse_config(path: Optional[Union[str, Path]] = None, overrides: Tuple[str, ...] = ()) -> RatebenchConfig:
    """Config document -> validated tree; overrides applied after the file parse"""
    raw = read_config_document(path) if path is not None else {}
    raw = apply_overrides(raw, overrides)
    return config_from_dict(raw)
