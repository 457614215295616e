"""Run configuration files: per-subcommand sections, strict keys, flags override file values."""
from __future__ import annotations

import os
from pathlib import Path
from typing import Any, Optional

import yaml

from .errors import ConfigurationError

GLOBAL_KEYS = ("seed", "out", "plugins")
SECTIONS = ("curate", "train", "eval", "sweep", "ate", "report", "bench")


def load_config(path) -> dict:
    """Read a YAML run config.

    A file without any section key is taken to be a flat ``train`` section,
    so a bare training config (learning_rate, steps, ...) works directly.
    """
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{path}: top level must be a mapping")
    if not any(k in raw for k in SECTIONS):
        glob = {k: raw.pop(k) for k in GLOBAL_KEYS if k in raw and k != "seed"}
        raw = {**glob, "train": raw}
    unknown = set(raw) - set(GLOBAL_KEYS) - set(SECTIONS)
    if unknown:
        raise ConfigurationError(f"{path}: unknown top-level keys {sorted(unknown)}")
    return raw


def resolve(section: str, defaults: dict, file_cfg: Optional[dict], flags: dict) -> dict:
    """Merge defaults < config file section < explicitly given flags (``None`` means not given)."""
    merged = dict(defaults)
    if file_cfg:
        for key in GLOBAL_KEYS:
            if key in file_cfg and key in defaults:
                merged[key] = file_cfg[key]
        body = file_cfg.get(section) or {}
        if not isinstance(body, dict):
            raise ConfigurationError(f"section {section!r} must be a mapping")
        unknown = set(body) - set(defaults)
        if unknown:
            raise ConfigurationError(f"unknown keys in section {section!r}: {sorted(unknown)}")
        merged.update(body)
    merged.update({k: v for k, v in flags.items() if v is not None and k in defaults})
    return merged


def write_resolved(out_dir, section: str, values: dict) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config.resolved.yaml"
    with open(path, "w") as fh:
        yaml.safe_dump({section: _plain(values)}, fh, sort_keys=True)
    return path


def _plain(value: Any):
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, os.PathLike):
        return str(value)
    return value
