"""Changes-feed consumption: poll the registry's `_changes` endpoint,
diff each full package document against stored state (every doc re-lists
every version, so the diff is what keeps growth linear), and apply the
normalized result atomically together with the feed cursor.

Unparseable documents are quarantined as dead letters, never dropped; the
cursor still advances so one poison doc cannot wedge the feed.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Optional

import requests

from . import downloads, semver
from .blobstore import blob_key
from .errors import CursorExpired, FeedUnavailable, InvalidDoc, MalformedVersion
from .store import MetadataStore, PackageState

START_CURSOR = "0"


@dataclass
class ChangeEvent:
    seq: str
    package_name: str
    deleted: bool
    doc: Optional[dict]


@dataclass
class ParsedVersion:
    """One version manifest out of a change doc, ready for insertion."""

    version: semver.Version
    manifest: dict
    content_hash: str
    published_at: Optional[float]
    generation: int = 0
    supersedes_version_id: Optional[int] = None


@dataclass
class NormalizedUpdate:
    """Diff of a change doc against stored state.

    new_versions and removed_versions are disjoint by construction; a
    version string that reappears with different content goes to
    `republished` (old row superseded, new generation inserted) and one
    that reappears identical after deletion goes to `undeleted_versions`.
    """

    package_name: str
    seq: str
    new_versions: list[ParsedVersion] = field(default_factory=list)
    removed_versions: list[str] = field(default_factory=list)
    republished: list[ParsedVersion] = field(default_factory=list)
    undeleted_versions: list[str] = field(default_factory=list)
    skipped_versions: list[tuple[str, str]] = field(default_factory=list)
    package_deleted: bool = False
    package_undeleted: bool = False
    unchanged: bool = False


@dataclass
class AppliedSummary:
    package_name: str
    seq: str
    versions_inserted: int = 0
    versions_superseded: int = 0
    versions_deleted: int = 0
    versions_undeleted: int = 0
    jobs_enqueued: int = 0
    dead_letters: int = 0
    unchanged: bool = False


def content_hash(manifest: dict) -> str:
    """Digest of the canonical JSON encoding; the dedup identity."""
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def parse_timestamp(value) -> Optional[float]:
    """Manifest time-map entry -> epoch seconds; None when unusable."""
    if isinstance(value, (int, float)):
        return float(value)
    if not isinstance(value, str):
        return None
    text = value.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    try:
        dt = datetime.fromisoformat(text)
    except ValueError:
        return None
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()


def tarball_url(manifest: dict) -> Optional[str]:
    dist = manifest.get("dist")
    if isinstance(dist, dict) and isinstance(dist.get("tarball"), str):
        return dist["tarball"]
    return None


def normalize(event: ChangeEvent, known: Optional[PackageState]) -> NormalizedUpdate:
    """Diff one change event against the store's view of the package."""
    u = NormalizedUpdate(package_name=event.package_name, seq=event.seq)
    if event.deleted:
        u.package_deleted = True
        return u
    doc = event.doc
    if not isinstance(doc, dict):
        raise InvalidDoc(f"{event.package_name}@{event.seq}: doc is not an object")
    versions = doc.get("versions")
    if not isinstance(versions, dict):
        raise InvalidDoc(f"{event.package_name}@{event.seq}: no versions object")
    time_map = doc.get("time")
    if not isinstance(time_map, dict):
        time_map = {}

    known_versions = known.versions if known is not None else {}
    for vstr in sorted(versions):
        manifest = versions[vstr]
        if not isinstance(manifest, dict):
            u.skipped_versions.append((vstr, "version manifest is not an object"))
            continue
        try:
            version = semver.parse_version(vstr)
        except MalformedVersion as e:
            u.skipped_versions.append((vstr, str(e)))
            continue
        digest = content_hash(manifest)
        published_at = parse_timestamp(time_map.get(vstr))
        state = known_versions.get(vstr)
        if state is None:
            u.new_versions.append(
                ParsedVersion(version, manifest, digest, published_at)
            )
        elif state.content_hash == digest:
            if state.deleted:
                u.undeleted_versions.append(vstr)
        else:
            # Same version string, different content: keep both rows, old one
            # superseded.
            u.republished.append(
                ParsedVersion(
                    version, manifest, digest, published_at,
                    generation=state.generation + 1,
                    supersedes_version_id=state.version_id,
                )
            )
    for vstr, state in known_versions.items():
        if vstr not in versions and not state.deleted:
            u.removed_versions.append(vstr)
    u.removed_versions.sort()

    if known is not None and known.deleted:
        u.package_undeleted = True
    u.unchanged = (
        known is not None
        and not u.new_versions
        and not u.removed_versions
        and not u.republished
        and not u.undeleted_versions
        and not u.skipped_versions
        and not u.package_deleted
        and not u.package_undeleted
    )
    return u


def apply(store: MetadataStore, u: NormalizedUpdate, *,
          enqueue_jobs: bool = True, set_cursor: bool = True) -> AppliedSummary:
    """Write one normalized update and its cursor in a single transaction.

    Idempotent: re-applying the same update reports zeros everywhere.
    """
    s = AppliedSummary(package_name=u.package_name, seq=u.seq)
    s.unchanged = u.unchanged
    with store.transaction():
        pid = store.upsert_package(u.package_name, u.seq)
        if u.package_deleted:
            s.versions_deleted += store.set_package_deleted(pid, True)
        elif u.package_undeleted:
            store.set_package_deleted(pid, False)

        state = store.get_package_state(u.package_name)
        for pv in u.new_versions + u.republished:
            if pv.supersedes_version_id is not None:
                s.versions_superseded += store.supersede_version(pv.supersedes_version_id)
            vid, created = store.insert_version(
                pid, pv.manifest, pv.version, pv.content_hash,
                pv.published_at, generation=pv.generation,
            )
            s.versions_inserted += int(created)
            url = tarball_url(pv.manifest)
            if enqueue_jobs and url:
                _, enqueued = downloads.enqueue(
                    store, blob_key(u.package_name, str(pv.version), url), url, vid
                )
                s.jobs_enqueued += int(enqueued)
        for vstr in u.removed_versions:
            vs = state.versions.get(vstr) if state else None
            if vs is not None:
                s.versions_deleted += store.set_version_deleted(vs.version_id, True)
        for vstr in u.undeleted_versions:
            vs = state.versions.get(vstr) if state else None
            if vs is not None:
                s.versions_undeleted += store.set_version_deleted(vs.version_id, False)
        for vstr, error in u.skipped_versions:
            message = f"version {vstr!r}: {error}"
            already = store.scalar(
                "SELECT COUNT(*) FROM dead_letters WHERE seq = ? AND package_name = ? AND error = ?",
                (u.seq, u.package_name, message),
            )
            if not already:
                store.record_dead_letter(u.seq, u.package_name, {vstr: "skipped"}, message)
                s.dead_letters += 1
        if set_cursor:
            store.set_cursor(u.seq)
    return s


class FeedClient:
    """HTTP client for a CouchDB-style `_changes` feed."""

    def __init__(self, base_url: str, session: Optional[requests.Session] = None,
                 timeout: float = 30.0):
        self.base_url = base_url.rstrip("/")
        self.session = session or requests.Session()
        self.timeout = timeout

    def poll(self, cursor: Optional[str], limit: int) -> tuple[list[ChangeEvent], str]:
        params = {"since": cursor or START_CURSOR, "limit": limit, "include_docs": "true"}
        try:
            resp = self.session.get(
                f"{self.base_url}/_changes", params=params, timeout=self.timeout
            )
        except requests.RequestException as e:
            raise FeedUnavailable(str(e)) from e
        if resp.status_code in (400, 410):
            raise CursorExpired(f"feed rejected cursor {cursor!r} ({resp.status_code})")
        if resp.status_code != 200:
            raise FeedUnavailable(f"http-{resp.status_code}")
        try:
            body = resp.json()
        except ValueError as e:
            raise FeedUnavailable(f"unparseable feed body: {e}") from e
        events = [
            ChangeEvent(
                seq=str(r["seq"]),
                package_name=r["id"],
                deleted=bool(r.get("deleted")),
                doc=r.get("doc"),
            )
            for r in body.get("results", [])
        ]
        return events, str(body.get("last_seq", cursor or START_CURSOR))


def process_event(store: MetadataStore, event: ChangeEvent, *,
                  enqueue_jobs: bool = True) -> Optional[AppliedSummary]:
    """Normalize + apply one event; dead-letters invalid docs (cursor still
    advances so the feed cannot wedge)."""
    known = store.get_package_state(event.package_name)
    try:
        u = normalize(event, known)
    except InvalidDoc as e:
        with store.transaction():
            store.record_dead_letter(event.seq, event.package_name, event.doc, str(e))
            store.set_cursor(event.seq)
        return None
    return apply(store, u, enqueue_jobs=enqueue_jobs)


def run_ingest(store: MetadataStore, feed: FeedClient, *, once: bool = True,
               limit: int = 100, poll_interval: float = 5.0,
               feed_retries: int = 5, enqueue_jobs: bool = True) -> dict:
    """Poll/apply loop. With once=True, returns after the feed drains."""
    totals = {
        "events": 0, "versions_inserted": 0, "versions_deleted": 0,
        "versions_superseded": 0, "versions_undeleted": 0,
        "jobs_enqueued": 0, "dead_letters": 0, "unchanged": 0,
    }
    cursor = store.get_cursor() or START_CURSOR
    failures = 0
    while True:
        try:
            events, last_seq = feed.poll(cursor, limit)
        except FeedUnavailable:
            failures += 1
            if failures > feed_retries:
                raise
            store.clock.sleep(poll_interval)
            continue
        failures = 0
        if not events:
            if once:
                return totals
            store.clock.sleep(poll_interval)
            continue
        for event in events:
            totals["events"] += 1
            summary = process_event(store, event, enqueue_jobs=enqueue_jobs)
            if summary is None:
                totals["dead_letters"] += 1
            else:
                totals["versions_inserted"] += summary.versions_inserted
                totals["versions_deleted"] += summary.versions_deleted
                totals["versions_superseded"] += summary.versions_superseded
                totals["versions_undeleted"] += summary.versions_undeleted
                totals["jobs_enqueued"] += summary.jobs_enqueued
                totals["dead_letters"] += summary.dead_letters
                totals["unchanged"] += int(summary.unchanged)
            cursor = event.seq
        cursor = last_seq
