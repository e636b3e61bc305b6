"""
Configuration Module
Few-Shot Slide Classification Pipeline

Generator settings plus the YAML run-config loader. A config file is a flat
mapping whose keys mirror the command-line long flags (dashes or
underscores); explicit flags override file values, which override the
built-in defaults.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, fields
from pathlib import Path

import yaml

from .core import CLASS_PRIORS
from .errors import ConfigError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SynthTaskConfig:
    n_classes: int = 5
    dim: int = 32
    shots: int = 5
    queries: int = 5
    delta: float = 3.0
    cov_spec: str = "identity"
    scale: float = 1.0


@dataclass(frozen=True)
class SynthSlideConfig:
    rows: int = 20
    cols: int = 20
    block: int = 5
    priors: tuple = CLASS_PRIORS
    dim: int = 32
    delta: float = 3.0
    cov_spec: str = "spd"
    shots: int = 10
    scale: float = 1.0


# long flags whose argparse dest differs from the flag name
KEY_ALIASES = {"lambda": "lam", "classes": "n_classes", "cov": "cov_spec"}


def config_key(name):
    key = name.strip().lstrip("-").replace("-", "_")
    return KEY_ALIASES.get(key, key)


def load_config_file(path, allowed):
    """Read a YAML run config and check every key against ``allowed``.

    Args:
        path (str): YAML file holding a flat mapping
        allowed (iterable of str): Accepted keys (argparse dests)

    Returns:
        dict: normalized key -> value
    """
    try:
        document = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from exc
    if document is None:
        return {}
    if not isinstance(document, dict):
        raise ConfigError(f"{path}: config must be a mapping of flag names to values")

    values = {config_key(str(key)): value for key, value in document.items()}
    unknown = sorted(set(values) - set(allowed))
    if unknown:
        raise ConfigError(f"{path}: unknown config key(s) {', '.join(unknown)}")
    logger.debug("config %s: %s", path, values)
    return values


def coerce(name, value, kind=None, many=False):
    """Convert a config-file value with the flag's argparse ``type``."""
    if kind is None or value is None:
        return value
    try:
        if many:
            items = value if isinstance(value, (list, tuple)) else str(value).split()
            return [kind(item) for item in items]
        return kind(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config key {name}: cannot use {value!r} ({exc})") from exc


def merge_settings(explicit, file_values, defaults):
    """Explicit flag > config file > built-in default."""
    settings = dict(defaults)
    settings.update(file_values)
    settings.update(explicit)
    return settings


def build(cls, settings):
    """Instantiate a config dataclass from the fields present in ``settings``."""
    kwargs = {}
    for item in fields(cls):
        if settings.get(item.name) is not None:
            value = settings[item.name]
            kwargs[item.name] = tuple(value) if isinstance(value, list) else value
    return cls(**kwargs)
