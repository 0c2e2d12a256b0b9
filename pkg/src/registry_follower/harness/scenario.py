"""Scenario files: one JSON document scripting everything a run needs —
publishes (with manifests and tarball bytes), deletions, advisories,
weekly metric values, and fault directives. Replaying the same scenario
under the same simulated clock is fully deterministic.

Event shapes (each carries an integer-ish "at" time and an "action"):

    {"at": 10, "action": "publish", "package": "a", "version": "1.0.0",
     "manifest": {...},                # merged into the version manifest
     "tarball": {"seed": 7, "size": 100} | {"b64": "..."} | null,
     "delay": 30,                      # tarball 503s (Retry-After) until at+delay
     "tarball_faults": [503, 503],     # scripted statuses before the first 200
     "tarball_gone_at": 500}           # URL 404s from this time on
    {"at": 20, "action": "delete_version", "package": "a", "version": "1.0.0"}
    {"at": 30, "action": "delete_package", "package": "a"}
    {"at": 40, "action": "advisory", "doc": {...OSV-style...}}
    {"at": 50, "action": "advisory_withdraw", "id": "XYZ-1"}
    {"at": 0,  "action": "metrics_week", "week_start": "2026-01-05",
     "downloads": {"a": 1000}}

Top level: {"name", "start_time", "sla_seconds", "events", "metrics_budget":
{"requests_per_interval", "interval_seconds", "batch_size"},
"metrics_faults": [429, ...], "feed_faults": [503, ...]}.
"""

from __future__ import annotations

import base64
import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

from ..errors import ScenarioInvalid

FEED_ACTIONS = ("publish", "delete_version", "delete_package")
ACTIONS = FEED_ACTIONS + ("advisory", "advisory_withdraw", "metrics_week")


def tarball_bytes(spec: Optional[dict]) -> Optional[bytes]:
    """Materialize a tarball spec: {"seed", "size"} for deterministic
    pseudo-random bytes, {"b64"} for literal content, None for no tarball."""
    if spec is None:
        return None
    if "b64" in spec:
        return base64.b64decode(spec["b64"])
    return random.Random(spec["seed"]).randbytes(spec["size"])


def _fail(name: str, i: int, message: str) -> None:
    raise ScenarioInvalid(f"{name}: event {i}: {message}")


@dataclass
class Scenario:
    name: str
    start_time: float = 0.0
    sla_seconds: float = 86400.0
    events: list[dict] = field(default_factory=list)
    metrics_budget: dict = field(default_factory=lambda: {
        "requests_per_interval": 1, "interval_seconds": 60, "batch_size": 128,
    })
    metrics_faults: list[int] = field(default_factory=list)
    feed_faults: list[int] = field(default_factory=list)

    @classmethod
    def from_dict(cls, raw: dict) -> "Scenario":
        if not isinstance(raw, dict):
            raise ScenarioInvalid("scenario must be a JSON object")
        name = raw.get("name", "unnamed")
        events = raw.get("events", [])
        if not isinstance(events, list):
            raise ScenarioInvalid(f"{name}: events must be a list")
        for i, e in enumerate(events):
            if not isinstance(e, dict):
                _fail(name, i, "not an object")
            if not isinstance(e.get("at"), (int, float)) or e["at"] < 0:
                _fail(name, i, "missing or negative 'at'")
            action = e.get("action")
            if action not in ACTIONS:
                _fail(name, i, f"unknown action {action!r}")
            if action in ("publish", "delete_version"):
                if not isinstance(e.get("package"), str) or not e["package"]:
                    _fail(name, i, "missing package")
                if not isinstance(e.get("version"), str) or not e["version"]:
                    _fail(name, i, "missing version")
            if action == "delete_package" and not isinstance(e.get("package"), str):
                _fail(name, i, "missing package")
            if action == "publish":
                tb = e.get("tarball")
                if tb is not None:
                    if not isinstance(tb, dict):
                        _fail(name, i, "tarball must be an object or null")
                    if "b64" not in tb and not (
                        isinstance(tb.get("seed"), int)
                        and isinstance(tb.get("size"), int) and tb["size"] > 0
                    ):
                        _fail(name, i, "tarball needs b64 or positive seed/size")
                if e.get("manifest") is not None and not isinstance(e["manifest"], dict):
                    _fail(name, i, "manifest must be an object")
            if action == "advisory" and not isinstance(e.get("doc"), dict):
                _fail(name, i, "advisory needs a doc object")
            if action == "advisory_withdraw" and not isinstance(e.get("id"), str):
                _fail(name, i, "advisory_withdraw needs an id")
            if action == "metrics_week":
                if not isinstance(e.get("week_start"), str):
                    _fail(name, i, "metrics_week needs week_start")
                if not isinstance(e.get("downloads"), dict):
                    _fail(name, i, "metrics_week needs a downloads map")
        events = sorted(events, key=lambda e: e["at"])
        return cls(
            name=name,
            start_time=float(raw.get("start_time", 0.0)),
            sla_seconds=float(raw.get("sla_seconds", 86400.0)),
            events=events,
            metrics_budget=raw.get("metrics_budget", {
                "requests_per_interval": 1, "interval_seconds": 60,
                "batch_size": 128,
            }),
            metrics_faults=list(raw.get("metrics_faults", [])),
            feed_faults=list(raw.get("feed_faults", [])),
        )

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Scenario":
        try:
            with open(path, encoding="utf-8") as f:
                raw = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ScenarioInvalid(f"cannot load scenario {path}: {e}") from e
        return cls.from_dict(raw)

    # -- accessors ------------------------------------------------------------

    def feed_events(self) -> list[dict]:
        return [e for e in self.events if e["action"] in FEED_ACTIONS]

    def feed_times(self) -> list[float]:
        return sorted({e["at"] for e in self.feed_events()})

    def end_time(self) -> float:
        return max((e["at"] for e in self.events), default=self.start_time)
