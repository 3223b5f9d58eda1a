"""Run configuration, hashing, and reproducibility manifests."""

from __future__ import annotations

import hashlib
import json
import os
import platform
import sys
from pathlib import Path

import numpy

from . import __version__

ENV_DATA_DIR = "PP_TAC_DATA_DIR"


class ConfigError(ValueError):
    """Bad or missing configuration key."""


def config_hash(payload: dict) -> str:
    """Stable short hash of a JSON-serializable configuration."""
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]


def load_config_file(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}")


def data_dir(explicit=None) -> Path:
    """Output base directory: --out flag, else PP_TAC_DATA_DIR, else cwd."""
    if explicit:
        base = Path(explicit)
    elif os.environ.get(ENV_DATA_DIR):
        base = Path(os.environ[ENV_DATA_DIR])
    else:
        base = Path.cwd() / "pptac_runs"
    base.mkdir(parents=True, exist_ok=True)
    return base


def write_manifest(out_dir, command: str, cfg_hash: str, seed: int,
                   extra: dict | None = None) -> Path:
    manifest = {
        "command": command,
        "config_hash": cfg_hash,
        "seed": seed,
        "versions": {
            "pptac": __version__,
            "python": sys.version.split()[0],
            "numpy": numpy.__version__,
            "platform": platform.platform(),
        },
    }
    if extra:
        manifest.update(extra)
    path = Path(out_dir) / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def apply_overrides(instance, block: dict, context: str):
    """Set dataclass fields from a config block; unknown keys are errors."""
    for key, value in block.items():
        if not hasattr(instance, key):
            raise ConfigError(f"unknown config key '{context}.{key}'")
        current = getattr(instance, key)
        if isinstance(current, tuple) and isinstance(value, list):
            value = tuple(value)
        setattr(instance, key, value)
    return instance
