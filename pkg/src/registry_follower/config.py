"""Runtime configuration.

One JSON file, flat keys matching the Config fields, overridable per-field
through FOLLOWER_<UPPER_NAME> environment variables (env wins). Unknown keys
and missing mandatory fields abort with ConfigError naming the offender.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Optional, Union

from .errors import ConfigError

ENV_PREFIX = "FOLLOWER_"

# FOLLOWER_CONFIG names the file itself, not a field inside it.
_ENV_NOT_FIELDS = {"CONFIG"}

# Fields with no usable default; load() refuses to proceed without them.
MANDATORY = ("feed_url", "store_path", "blob_root")


@dataclass
class Config:
    feed_url: str = ""
    store_path: str = ""
    blob_root: str = ""
    start_cursor: str = "0"
    feed_limit: int = 100
    poll_interval: float = 5.0
    manager_host: str = "127.0.0.1"
    manager_port: int = 7788
    segment_size: int = 1 << 30
    worker_count: int = 4
    sla_seconds: float = 86400.0
    metrics_url: str = ""
    metrics_requests_per_interval: int = 1
    metrics_interval_seconds: float = 60.0
    metrics_batch_size: int = 128
    advisory_source: str = ""
    log_level: str = "INFO"

    @property
    def manager_address(self) -> tuple[str, int]:
        return (self.manager_host, self.manager_port)


_FIELDS = {f.name: f for f in dataclasses.fields(Config)}


def _coerce(name: str, raw: Any) -> Any:
    """Coerce a JSON or env value to the field's declared type."""
    target = _FIELDS[name].type
    if isinstance(target, str):  # postponed annotations
        target = {"str": str, "int": int, "float": float}[target]
    try:
        if target is str:
            if not isinstance(raw, str):
                raise TypeError
            return raw
        if target is int:
            if isinstance(raw, bool) or (not isinstance(raw, (int, str))):
                raise TypeError
            return int(raw)
        if target is float:
            if isinstance(raw, bool) or (not isinstance(raw, (int, float, str))):
                raise TypeError
            return float(raw)
    except (TypeError, ValueError):
        raise ConfigError(
            f"config field {name!r}: cannot interpret {raw!r} as {target.__name__}"
        ) from None
    raise ConfigError(f"config field {name!r} has unsupported type")


def load(path: Optional[Union[str, Path]] = None,
         env: Optional[Mapping[str, str]] = None) -> Config:
    """Build a Config from an optional JSON file plus environment overrides.

    Raises ConfigError for unreadable/invalid files, unknown keys, values of
    the wrong type, and — once everything is merged — for any mandatory
    field still left blank.
    """
    merged: dict[str, Any] = {}

    if path is not None:
        p = Path(path)
        try:
            doc = json.loads(p.read_text("utf-8"))
        except OSError as e:
            raise ConfigError(f"cannot read config file {p}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {p} is not valid JSON: {e}") from e
        if not isinstance(doc, dict):
            raise ConfigError(f"config file {p} must hold a JSON object")
        for key, raw in doc.items():
            if key not in _FIELDS:
                raise ConfigError(f"unknown config key {key!r} in {p}")
            merged[key] = _coerce(key, raw)

    environ = os.environ if env is None else env
    for var, raw in environ.items():
        if not var.startswith(ENV_PREFIX):
            continue
        suffix = var[len(ENV_PREFIX):]
        if suffix in _ENV_NOT_FIELDS:
            continue
        key = suffix.lower()
        if key not in _FIELDS:
            raise ConfigError(f"unknown config variable {var}")
        merged[key] = _coerce(key, raw)

    cfg = Config(**merged)
    missing = [name for name in MANDATORY if not getattr(cfg, name)]
    if missing:
        raise ConfigError(
            "missing mandatory config field(s): " + ", ".join(sorted(missing))
        )
    return cfg
