"""Discrete-event driver: run the real pipeline against the mock registry
under a simulated clock, advancing time only to the next moment anything
can happen (a scripted feed event or a download becoming retryable). All
waiting is simulated, so day-scale scenarios replay in milliseconds, and
integer script times make every latency arithmetic exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

from ..blobstore import BlobIndex
from ..clock import SimulatedClock
from ..downloads import Downloader, claim, latency_report, next_ready_time, pending_count
from ..ingest import FeedClient, run_ingest
from ..scrapers import RateBudget, run_sweep, sync_advisories
from ..store import MetadataStore
from .mockserver import MockRegistry
from .scenario import Scenario


@dataclass
class RunResult:
    store: MetadataStore
    blob: BlobIndex
    clock: SimulatedClock
    base_url: str
    ingest_totals: dict = field(default_factory=dict)
    download_counts: dict = field(default_factory=dict)
    latency: dict = field(default_factory=dict)
    sweep_report: object = None
    advisory_counts: Optional[dict] = None
    budget_violations: list = field(default_factory=list)
    bad_requests: list = field(default_factory=list)

    def close(self) -> None:
        self.store.close()
        self.blob.close()


def _merge(into: dict, part: dict) -> None:
    for k, v in part.items():
        into[k] = into.get(k, 0) + v


def run_scenario(
    scenario: Scenario,
    workdir: Union[str, Path],
    *,
    sweep: bool = False,
    advisories: bool = False,
    feed_limit: int = 100,
    claim_batch: int = 64,
) -> RunResult:
    """Replay one scenario end to end: ingest + downloads interleaved in
    event-time order, then (optionally) an advisory sync and a metrics
    sweep once the feed has drained."""
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    clock = SimulatedClock(scenario.start_time)
    store = MetadataStore(str(workdir / "meta.db"), clock=clock)
    blob = BlobIndex(workdir / "blobs", clock=clock)
    mock = MockRegistry(scenario, clock)
    result = RunResult(store=store, blob=blob, clock=clock, base_url="")
    with mock:
        result.base_url = mock.base_url
        feed = FeedClient(mock.base_url)
        downloader = Downloader(store, blob, "driver-w0")
        feed_times = scenario.feed_times()
        while True:
            _merge(
                result.ingest_totals,
                run_ingest(store, feed, once=True, limit=feed_limit),
            )
            while True:
                jobs = claim(store, downloader.worker_id, claim_batch)
                if not jobs:
                    break
                for job in jobs:
                    state = downloader.execute(job)
                    result.download_counts[state] = (
                        result.download_counts.get(state, 0) + 1
                    )
            now = clock.now()
            next_feed = next((t for t in feed_times if t > now), None)
            ready = next_ready_time(store)
            next_dl = ready if ready is not None and ready > now else None
            if next_feed is None and pending_count(store) == 0:
                break
            targets = [t for t in (next_feed, next_dl) if t is not None]
            if not targets:
                raise RuntimeError(
                    "pending downloads but no wake-up time; driver stuck"
                )
            clock.advance_to(min(targets))

        if advisories:
            result.advisory_counts = sync_advisories(
                store, f"{mock.base_url}/advisories"
            )
        if sweep:
            budget = scenario.metrics_budget
            result.sweep_report = run_sweep(
                store,
                mock.base_url,
                RateBudget(
                    requests_per_interval=int(budget["requests_per_interval"]),
                    interval=float(budget["interval_seconds"]),
                    batch_size=int(budget.get("batch_size", 128)),
                ),
                clock=clock,
            )
        result.latency = latency_report(store, scenario.sla_seconds)
        result.budget_violations = list(mock.budget_violations)
        result.bad_requests = list(mock.bad_requests)
    return result
