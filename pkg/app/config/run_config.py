import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Tuple, Union

from dotenv import dotenv_values
from pydantic import ValidationError

from app.errors import ConfigurationError
from app.models.arch import arch_preset
from app.models.run import RunConfig

logger = logging.getLogger(__name__)


def parse_value(text: Optional[str]) -> Any:
    """Literal of a ``key = value`` line: JSON scalars/lists, comma lists, or the raw string."""
    if text is None:
        return None
    text = text.strip()
    if text.lower() in ("none", "null", ""):
        return None
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        pass
    if "," in text:
        return [parse_value(part) for part in text.split(",") if part.strip()]
    return text


def _set_path(tree: Dict[str, Any], key: str, value: Any) -> None:
    parts = key.split(".")
    node = tree
    for part in parts[:-1]:
        child = node.get(part)
        if not isinstance(child, dict):
            raise ConfigurationError(f"'{key}': '{part}' is not a section")
        node = child
    if parts[-1] not in node:
        raise ConfigurationError(f"unknown configuration key '{key}'")
    node[parts[-1]] = value


def apply_overrides(cfg: RunConfig, overrides: Mapping[str, Any]) -> RunConfig:
    """New RunConfig with dotted-key overrides applied; ``preset`` swaps the architecture first."""
    tree = cfg.model_dump()
    overrides = dict(overrides)
    preset = overrides.pop("preset", None)
    if preset:
        arch = tree["arch"]
        tree["arch"] = arch_preset(preset, classes=arch["classes"]).model_dump()
    for key, value in overrides.items():
        _set_path(tree, key, value)
    try:
        return RunConfig.model_validate(tree)
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(p) for p in first["loc"])
        raise ConfigurationError(f"invalid configuration at '{where}': {first['msg']}")


def parse_assignments(pairs: Iterable[str]) -> Dict[str, Any]:
    """``key=value`` strings from ``--set`` flags."""
    out: Dict[str, Any] = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep or not key.strip():
            raise ConfigurationError(f"expected key=value, got '{pair}'")
        out[key.strip()] = parse_value(value)
    return out


def read_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file {path} not found")
    return {key: parse_value(value) for key, value in dotenv_values(path).items()}


def load_run_config(flags: Optional[Mapping[str, Any]] = None, config_file: Optional[Union[str, Path]] = None,
                    base: Optional[RunConfig] = None) -> RunConfig:
    """defaults < command-line flags < config file."""
    cfg = base or RunConfig()
    if flags:
        cfg = apply_overrides(cfg, flags)
    if config_file:
        cfg = apply_overrides(cfg, read_config_file(config_file))
        logger.info(f"Applied config file {config_file}")
    return cfg


def _flatten(tree: Mapping[str, Any], prefix: str = "") -> List[Tuple[str, Any]]:
    items: List[Tuple[str, Any]] = []
    for key, value in tree.items():
        if isinstance(value, Mapping):
            items.extend(_flatten(value, f"{prefix}{key}."))
        else:
            items.append((prefix + key, value))
    return items


def dump_run_config(cfg: RunConfig) -> str:
    """``key = value`` text that :func:`read_config_file` reads back to the same config."""
    lines = []
    for key, value in _flatten(cfg.model_dump()):
        lines.append(f"{key} = {'none' if value is None else json.dumps(value)}")
    return "\n".join(lines) + "\n"
