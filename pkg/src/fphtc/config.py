"""Config-file loading with schema validation."""

from __future__ import annotations

import json
from pathlib import Path

import jsonschema
import yaml


class ConfigError(ValueError):
    pass


def validate(doc, schema: dict, where: str = "config") -> None:
    """Raise ConfigError naming the offending location, e.g. ``config.apps.VOIP.iat_rate``."""
    validator = jsonschema.Draft202012Validator(schema)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        loc = ".".join([where] + [str(p) for p in e.absolute_path])
        raise ConfigError(f"{loc}: {e.message}")


def load_document(path) -> dict:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        doc = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return doc
