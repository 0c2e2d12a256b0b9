"""Feedless scrapers: batched, rate-limited weekly download metrics and
OSV-style security advisories.

The metrics API is severely rate limited, so a sweep over all packages is
planned up front as ordered batches and executed on an evenly-spaced
schedule that keeps every sliding window of length `interval` at or under
the budget. Scoped names (containing "/") cannot share a bulk request and
get singleton batches.
"""

from __future__ import annotations

import glob
import json
import os
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Optional

import requests

from . import semver
from .clock import Clock
from .errors import ConfigError, MalformedRange, MalformedVersion
from .store import MetadataStore


@dataclass(frozen=True)
class RateBudget:
    requests_per_interval: int
    interval: float  # seconds
    batch_size: int = 128

    def __post_init__(self):
        if self.requests_per_interval <= 0:
            raise ConfigError("requests_per_interval must be positive")
        if self.interval <= 0:
            raise ConfigError("interval must be positive")
        if self.batch_size <= 0:
            raise ConfigError("batch_size must be positive")

    @property
    def spacing(self) -> float:
        return self.interval / self.requests_per_interval


@dataclass
class SweepPlan:
    batches: list[list[str]]
    sweep_started_at: float
    estimated_completion: float

    @property
    def request_count(self) -> int:
        return len(self.batches)


def plan_sweep(packages: Iterable[str], budget: RateBudget, now: float) -> SweepPlan:
    """Deterministic plan: sorted unscoped names in full batches, then each
    scoped name alone. ceil(P / batch_size) requests for the unscoped part."""
    names = sorted(set(packages))
    unscoped = [n for n in names if "/" not in n]
    scoped = [n for n in names if "/" in n]
    batches = [
        unscoped[i:i + budget.batch_size]
        for i in range(0, len(unscoped), budget.batch_size)
    ]
    batches.extend([n] for n in scoped)
    return SweepPlan(
        batches=batches,
        sweep_started_at=now,
        estimated_completion=now + len(batches) * budget.spacing,
    )


class SlotScheduler:
    """Releases one request slot every `spacing` seconds, the first at
    start + spacing. Guarantees: at most requests_per_interval slots fall in
    any half-open window [t, t + interval)."""

    def __init__(self, budget: RateBudget, clock: Clock, start: Optional[float] = None):
        self.budget = budget
        self.clock = clock
        base = clock.now() if start is None else start
        self._next_slot = base + budget.spacing

    def acquire(self) -> float:
        """Sleep until the next slot; returns the slot time."""
        now = self.clock.now()
        if now < self._next_slot:
            self.clock.sleep(self._next_slot - now)
        slot = self._next_slot
        self._next_slot += self.budget.spacing
        return slot


@dataclass
class SweepReport:
    planned_batches: int = 0
    requests: int = 0
    points_appended: int = 0
    failures: int = 0
    rate_limited: int = 0
    requeued: int = 0
    started_at: float = 0.0
    finished_at: float = 0.0
    errors: list[str] = field(default_factory=list)


def _metrics_url(base_url: str, batch: list[str]) -> str:
    return f"{base_url.rstrip('/')}/downloads/point/last-week/" + ",".join(batch)


def _parse_metrics_body(batch: list[str], body) -> dict[str, Optional[dict]]:
    """Normalize the two response shapes (bare object for a single scoped
    package, name-keyed map otherwise) to name -> point-or-None."""
    if len(batch) == 1 and isinstance(body, dict) and "downloads" in body:
        return {batch[0]: body}
    out: dict[str, Optional[dict]] = {}
    for name in batch:
        point = body.get(name) if isinstance(body, dict) else None
        out[name] = point if isinstance(point, dict) else None
    return out


def run_sweep(
    store: MetadataStore,
    base_url: str,
    budget: RateBudget,
    packages: Optional[Iterable[str]] = None,
    session: Optional[requests.Session] = None,
    clock: Optional[Clock] = None,
    max_batch_retries: int = 3,
) -> SweepReport:
    """One full metrics pass. 429 responses retry the same batch at the next
    slot; other upstream errors requeue the batch at the end, up to
    max_batch_retries, after which every member gets a recorded failure."""
    clock = clock or store.clock
    session = session or requests.Session()
    if packages is None:
        packages = [
            r["name"] for r in store.query(
                "SELECT name FROM packages WHERE deleted = 0 ORDER BY name"
            )
        ]
    report = SweepReport(started_at=clock.now())
    plan = plan_sweep(packages, budget, report.started_at)
    report.planned_batches = len(plan.batches)
    scheduler = SlotScheduler(budget, clock, start=plan.sweep_started_at)
    queue: deque[tuple[list[str], int]] = deque((b, 0) for b in plan.batches)

    while queue:
        batch, retries = queue.popleft()
        scheduler.acquire()
        report.requests += 1
        try:
            resp = session.get(_metrics_url(base_url, batch), timeout=30)
        except requests.RequestException as e:
            resp = None
            error = f"request-error: {e}"
        if resp is not None:
            if resp.status_code == 200:
                try:
                    points = _parse_metrics_body(batch, resp.json())
                except ValueError as e:
                    points = None
                    error = f"bad-body: {e}"
                if points is not None:
                    _record_points(store, points, report)
                    continue
            elif resp.status_code == 429:
                # No mutation; the same batch gets the very next slot.
                report.rate_limited += 1
                queue.appendleft((batch, retries))
                continue
            else:
                error = f"http-{resp.status_code}"
        if retries + 1 < max_batch_retries:
            report.requeued += 1
            queue.append((batch, retries + 1))
        else:
            for name in batch:
                store.record_metric_failure(name, None, error)
                report.failures += 1
            report.errors.append(error)
    report.finished_at = clock.now()
    return report


def _record_points(store: MetadataStore, points: dict[str, Optional[dict]],
                   report: SweepReport) -> None:
    for name, point in points.items():
        if point is None or "downloads" not in point:
            store.record_metric_failure(name, None, "no-data")
            report.failures += 1
            continue
        week_start = str(point.get("start", ""))
        pid = store.scalar("SELECT id FROM packages WHERE name = ?", (name,))
        if pid is None:
            store.record_metric_failure(name, week_start, "unknown-package")
            report.failures += 1
            continue
        report.points_appended += store.append_metric_points(
            pid, [(week_start, int(point["downloads"]))]
        )


# -- advisories ---------------------------------------------------------------


@dataclass
class AdvisoryRecord:
    advisory_id: str
    package_name: str
    affected_ranges: list[dict]  # {"raw": str, "dnf": str | None}
    severity: str = ""
    cwes: list[str] = field(default_factory=list)
    withdrawn: bool = False


def _events_to_ranges(events: list[dict]) -> list[str]:
    """OSV range events -> constraint strings. Each `introduced` opens a
    segment closed by the following `fixed` (exclusive) or `last_affected`
    (inclusive); an unclosed segment is open-ended."""
    ranges: list[str] = []
    lower: Optional[str] = None
    have_open = False
    for event in events:
        if "introduced" in event:
            if have_open:
                ranges.append(_segment(lower, None, None))
            intro = str(event["introduced"])
            lower = None if intro == "0" else intro
            have_open = True
        elif "fixed" in event and have_open:
            ranges.append(_segment(lower, str(event["fixed"]), "fixed"))
            lower, have_open = None, False
        elif "last_affected" in event and have_open:
            ranges.append(_segment(lower, str(event["last_affected"]), "last"))
            lower, have_open = None, False
    if have_open:
        ranges.append(_segment(lower, None, None))
    return [r for r in ranges if r]


def _segment(lower: Optional[str], upper: Optional[str], kind: Optional[str]) -> str:
    parts = []
    if lower is not None:
        parts.append(f">={lower}")
    if upper is not None:
        parts.append(f"<{upper}" if kind == "fixed" else f"<={upper}")
    if not parts:
        return "*"
    return " ".join(parts)


def parse_advisory(doc: dict) -> list[AdvisoryRecord]:
    """One OSV document -> one record per affected package (a multi-package
    advisory becomes multiple rows sharing the advisory_id)."""
    advisory_id = doc.get("id")
    if not isinstance(advisory_id, str) or not advisory_id:
        raise ValueError("advisory missing id")
    db = doc.get("database_specific") or {}
    severity = str(db.get("severity", ""))
    cwes = [str(c) for c in db.get("cwe_ids", [])]
    withdrawn = bool(doc.get("withdrawn"))

    per_package: dict[str, list[dict]] = {}
    for affected in doc.get("affected", []):
        name = (affected.get("package") or {}).get("name")
        if not name:
            continue
        raws: list[str] = []
        for rng in affected.get("ranges", []):
            raws.extend(_events_to_ranges(rng.get("events", [])))
        versions = [str(v) for v in affected.get("versions", [])]
        if versions:
            raws.append(" || ".join(f"={v}" for v in versions))
        entries = per_package.setdefault(name, [])
        for raw in raws:
            try:
                dnf = semver.parse_constraint(raw).to_text()
            except (MalformedRange, MalformedVersion):
                dnf = None
            entries.append({"raw": raw, "dnf": dnf})
    return [
        AdvisoryRecord(advisory_id, name, ranges, severity, cwes, withdrawn)
        for name, ranges in sorted(per_package.items())
        if ranges
    ]


def _load_advisory_docs(source: str, session: Optional[requests.Session]) -> list[dict]:
    if source.startswith(("http://", "https://")):
        resp = (session or requests.Session()).get(source, timeout=30)
        resp.raise_for_status()
        body = resp.json()
        return body if isinstance(body, list) else [body]
    if os.path.isdir(source):
        docs = []
        for path in sorted(glob.glob(os.path.join(source, "*.json"))):
            with open(path, encoding="utf-8") as f:
                loaded = json.load(f)
            docs.extend(loaded if isinstance(loaded, list) else [loaded])
        return docs
    with open(source, encoding="utf-8") as f:
        loaded = json.load(f)
    if isinstance(loaded, list):
        return loaded
    if isinstance(loaded, dict) and not loaded:
        return []  # an empty {} placeholder file means "no advisories yet"
    return [loaded]


def sync_advisories(store: MetadataStore, source: str,
                    session: Optional[requests.Session] = None) -> dict:
    """Fetch and upsert advisories from a directory, file, or HTTP endpoint.
    Returns counts, including ranges stored without a parsed DNF."""
    docs = _load_advisory_docs(source, session)
    counts = {"documents": 0, "rows": 0, "unparsed_ranges": 0, "invalid": 0}
    for doc in docs:
        if not isinstance(doc, dict):
            counts["invalid"] += 1
            continue
        try:
            records = parse_advisory(doc)
        except ValueError:
            counts["invalid"] += 1
            continue
        counts["documents"] += 1
        for rec in records:
            store.upsert_advisory(
                rec.advisory_id, rec.package_name, rec.affected_ranges,
                severity=rec.severity, cwes=rec.cwes, withdrawn=rec.withdrawn,
            )
            counts["rows"] += 1
            counts["unparsed_ranges"] += sum(
                1 for r in rec.affected_ranges if r["dnf"] is None
            )
    store.set_scraper_state("advisories", str(store.clock.now()))
    return counts
