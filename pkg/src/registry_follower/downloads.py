"""Tarball download queue: lease-based workers, retries with backoff,
terminal 404 handling, and latency accounting.

Jobs live in the download_jobs table so enqueueing shares a transaction
with ingest. State machine: queued -> leased -> {done | missing | queued
(retry) | failed}. Terminal states never revert; the blob layer's
already-stored signal makes storage exactly-once even when a lease expires
after the blob was committed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import requests

from .errors import AlreadyStored, BlobError
from .store import MetadataStore

LEASE_SECONDS = 300.0
MAX_ATTEMPTS = 8
BACKOFF_BASE = 2.0
BACKOFF_CAP = 3600.0


@dataclass
class DownloadJob:
    job_id: int
    blob_key: str
    version_id: Optional[int]
    url: str
    enqueued_at: float
    attempts: int
    state: str
    lease_worker: Optional[str] = None
    lease_expiry: Optional[float] = None
    not_before: float = 0.0
    completed_at: Optional[float] = None

    @classmethod
    def from_row(cls, row) -> "DownloadJob":
        return cls(
            job_id=row["job_id"],
            blob_key=row["blob_key"],
            version_id=row["version_id"],
            url=row["url"],
            enqueued_at=row["enqueued_at"],
            attempts=row["attempts"],
            state=row["state"],
            lease_worker=row["lease_worker"],
            lease_expiry=row["lease_expiry"],
            not_before=row["not_before"],
            completed_at=row["completed_at"],
        )


def enqueue(store: MetadataStore, blob_key: str, url: str,
            version_id: Optional[int] = None) -> tuple[int, bool]:
    """Queue one download; idempotent per blob key. Returns (job_id, created)."""
    with store.transaction():
        row = store.execute(
            "SELECT job_id FROM download_jobs WHERE blob_key = ?", (blob_key,)
        ).fetchone()
        if row is not None:
            return row["job_id"], False
        cur = store.execute(
            "INSERT INTO download_jobs (blob_key, version_id, url, enqueued_at, "
            "attempts, state, not_before) VALUES (?, ?, ?, ?, 0, 'queued', 0)",
            (blob_key, version_id, url, store.clock.now()),
        )
        return cur.lastrowid, True


def claim(store: MetadataStore, worker_id: str, n: int) -> list[DownloadJob]:
    """Lease up to n ready jobs (oldest first). Ready means queued with
    not_before due, or leased with an expired lease. Atomic: no job is ever
    live-leased to two workers."""
    now = store.clock.now()
    claimed: list[DownloadJob] = []
    with store.transaction():
        rows = store.execute(
            "SELECT * FROM download_jobs WHERE "
            "(state = 'queued' AND not_before <= ?) "
            "OR (state = 'leased' AND lease_expiry <= ?) "
            "ORDER BY enqueued_at, job_id LIMIT ?",
            (now, now, n),
        ).fetchall()
        for row in rows:
            store.execute(
                "UPDATE download_jobs SET state = 'leased', lease_worker = ?, "
                "lease_expiry = ? WHERE job_id = ?",
                (worker_id, now + LEASE_SECONDS, row["job_id"]),
            )
        for row in rows:
            refreshed = store.execute(
                "SELECT * FROM download_jobs WHERE job_id = ?", (row["job_id"],)
            ).fetchone()
            claimed.append(DownloadJob.from_row(refreshed))
    return claimed


def next_ready_time(store: MetadataStore) -> Optional[float]:
    """Earliest future time at which a non-terminal job becomes claimable;
    None when nothing is pending. Lets a simulated-clock driver jump."""
    return store.scalar(
        "SELECT MIN(t) FROM ("
        "  SELECT not_before AS t FROM download_jobs WHERE state = 'queued'"
        "  UNION ALL"
        "  SELECT lease_expiry FROM download_jobs WHERE state = 'leased'"
        ")"
    )


def pending_count(store: MetadataStore) -> int:
    return store.scalar(
        "SELECT COUNT(*) FROM download_jobs WHERE state IN ('queued', 'leased')"
    )


class Downloader:
    """Executes leased jobs: fetch the tarball, stream it into the blob
    store, and record the terminal state."""

    def __init__(
        self,
        store: MetadataStore,
        blob,
        worker_id: str,
        session: Optional[requests.Session] = None,
        timeout: float = 30.0,
        max_attempts: int = MAX_ATTEMPTS,
    ):
        self.store = store
        self.blob = blob  # anything with .store(key, data) -> BlobLocation
        self.worker_id = worker_id
        self.session = session or requests.Session()
        self.timeout = timeout
        self.max_attempts = max_attempts

    def execute(self, job: DownloadJob) -> str:
        """Run one attempt for a job this worker holds; returns the new state."""
        clock = self.store.clock
        attempts = job.attempts + 1
        try:
            resp = self.session.get(job.url, timeout=self.timeout)
            status = resp.status_code
        except requests.RequestException as e:
            return self._retry(job, attempts, f"request-error: {e}")
        if status == 200:
            try:
                self.blob.store(job.blob_key, resp.content)
            except AlreadyStored:
                pass
            except BlobError as e:
                return self._retry(job, attempts, f"blob-error: {e}")
            return self._finish(
                job, attempts, "done", completed_at=clock.now()
            )
        if status == 404:
            # Terminal: evidence of an unpublish, preserved with a timestamp.
            return self._finish(job, attempts, "missing", missing_at=clock.now())
        retry_after = None
        if status in (429, 503):
            header = resp.headers.get("Retry-After")
            if header is not None:
                try:
                    retry_after = float(header)
                except ValueError:
                    retry_after = None
        return self._retry(job, attempts, f"http-{status}", retry_after)

    def _retry(self, job: DownloadJob, attempts: int, error: str,
               retry_after: Optional[float] = None) -> str:
        clock = self.store.clock
        if attempts >= self.max_attempts:
            return self._finish(job, attempts, "failed", error=error)
        if retry_after is None:
            # exponential: 2s, 4s, 8s, ... capped at an hour
            delay = min(BACKOFF_CAP, BACKOFF_BASE * (2 ** (attempts - 1)))
        else:
            # the upstream said exactly when; honor it to the second
            delay = retry_after
        with self.store.transaction():
            cur = self.store.execute(
                "UPDATE download_jobs SET state = 'queued', attempts = ?, "
                "not_before = ?, lease_worker = NULL, lease_expiry = NULL, "
                "last_error = ? WHERE job_id = ? AND state = 'leased' AND lease_worker = ?",
                (attempts, clock.now() + delay, error, job.job_id, self.worker_id),
            )
        return "queued" if cur.rowcount else "lost-lease"

    def _finish(self, job: DownloadJob, attempts: int, state: str,
                completed_at: Optional[float] = None,
                missing_at: Optional[float] = None,
                error: Optional[str] = None) -> str:
        with self.store.transaction():
            cur = self.store.execute(
                "UPDATE download_jobs SET state = ?, attempts = ?, completed_at = ?, "
                "missing_at = ?, last_error = ?, lease_worker = NULL, lease_expiry = NULL "
                "WHERE job_id = ? AND state = 'leased' AND lease_worker = ?",
                (state, attempts, completed_at, missing_at, error,
                 job.job_id, self.worker_id),
            )
        return state if cur.rowcount else "lost-lease"

    def run(self, batch: int = 16, drain: bool = True,
            idle_sleep: float = 1.0) -> dict[str, int]:
        """Claim-and-execute loop. With drain=True, exits once no job is
        immediately claimable; otherwise sleeps and polls forever."""
        counts: dict[str, int] = {}
        while True:
            jobs = claim(self.store, self.worker_id, batch)
            if not jobs:
                if drain:
                    return counts
                self.store.clock.sleep(idle_sleep)
                continue
            for job in jobs:
                state = self.execute(job)
                counts[state] = counts.get(state, 0) + 1


def percentile(sorted_values: list[float], q: float) -> float:
    """Nearest-rank percentile over a non-empty ascending list."""
    rank = max(1, math.ceil(q / 100.0 * len(sorted_values)))
    return sorted_values[rank - 1]


def latency_report(store: MetadataStore, sla_seconds: float) -> dict:
    """Latency = completed_at - enqueued_at per done job; exact over the
    recorded jobs, nothing estimated."""
    rows = store.query(
        "SELECT completed_at - enqueued_at AS latency FROM download_jobs "
        "WHERE state = 'done' ORDER BY latency"
    )
    latencies = [r["latency"] for r in rows]
    if not latencies:
        return {
            "count": 0, "sla_seconds": sla_seconds,
            "p50": None, "p99": None, "fraction_within": None,
        }
    within = sum(1 for l in latencies if l <= sla_seconds)
    return {
        "count": len(latencies),
        "sla_seconds": sla_seconds,
        "p50": percentile(latencies, 50),
        "p99": percentile(latencies, 99),
        "fraction_within": within / len(latencies),
    }
