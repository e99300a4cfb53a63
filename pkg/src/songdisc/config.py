"""Strict JSON run configuration.

A config file is a flat JSON object whose keys mirror the long CLI flags of
one subcommand (dashes become underscores). Unknown keys are rejected by
name rather than ignored: a typo in a gamma or capacity value must fail
loudly, not silently run the wrong experiment. Flags given on the command
line override file values.
"""

import json

from .errors import FormatError, InputError, ValidationError

CONFIG_VERSION = 1


def load_config(path, allowed_keys):
    """Read a config file and check every key against the given set."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = fh.read()
    except FileNotFoundError:
        raise InputError(f"no such config file: {path}") from None
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise FormatError(f"{path}: config must be a JSON object")
    version = data.pop("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ValidationError(
            f"{path}: unsupported config version {version!r} "
            f"(expected {CONFIG_VERSION})")
    allowed = set(allowed_keys)
    for key in data:
        if key not in allowed:
            raise ValidationError(
                f"{path}: unknown config key {key!r}; known keys: "
                + ", ".join(sorted(allowed)))
    return data
