"""Relational persistence for packages, versions, dependencies, metrics and
advisories, plus the download-job queue and ingest cursors.

Backed by SQLite. A second database file is attached as ``metadata_analysis``
so materialized analysis tables use two-level names. Rows are soft-deleted
only; `extra_metadata` holds every manifest field the ingest path does not
specifically parse.
"""

from __future__ import annotations

import json
import sqlite3
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from importlib import resources
from typing import Any, Iterable, Optional

from . import semver
from .clock import Clock, SystemClock
from .errors import StoreUnavailable

SCHEMA_VERSION = 1

# Manifest fields parsed into columns or relation rows; the rest overflow
# into extra_metadata.
_DEP_KINDS = (
    ("dependencies", "runtime"),
    ("devDependencies", "dev"),
    ("peerDependencies", "peer"),
    ("optionalDependencies", "optional"),
)
_PARSED_FIELDS = frozenset(k for k, _ in _DEP_KINDS) | {"version"}


@dataclass
class VersionState:
    """Current (highest-generation) row for one version string."""

    version_id: int
    content_hash: str
    deleted: bool
    generation: int


@dataclass
class PackageState:
    """The store's view of one package, as consumed by normalize()."""

    package_id: int
    deleted: bool
    versions: dict[str, VersionState] = field(default_factory=dict)


def _analysis_path(db_path: str) -> str:
    if db_path == ":memory:":
        return ":memory:"
    return db_path + ".analysis"


class MetadataStore:
    """Thread-safe wrapper around the follower's SQLite database.

    Single writer per package (the ingest path); any number of readers.
    All statements run under one connection guarded by an RLock, so
    cross-thread use is serialized.
    """

    def __init__(self, path: str = ":memory:", clock: Optional[Clock] = None):
        self.path = path
        self.clock = clock or SystemClock()
        self._lock = threading.RLock()
        self._txn_depth = 0
        try:
            self._conn = sqlite3.connect(path, check_same_thread=False)
        except sqlite3.Error as e:
            raise StoreUnavailable(f"cannot open store at {path}: {e}") from e
        self._conn.row_factory = sqlite3.Row
        self._conn.execute("PRAGMA foreign_keys = ON")
        if path != ":memory:":
            self._conn.execute("PRAGMA journal_mode = WAL")
            self._conn.execute("PRAGMA synchronous = NORMAL")
        self._conn.execute("ATTACH DATABASE ? AS metadata_analysis", (_analysis_path(path),))
        self._apply_schema()

    def _apply_schema(self) -> None:
        pkg = resources.files("registry_follower")
        with self._lock, self._conn:
            self._conn.executescript((pkg / "schema.sql").read_text())
            self._conn.executescript((pkg / "analysis_schema.sql").read_text())
            row = self._conn.execute("SELECT version FROM schema_meta").fetchone()
            if row is None:
                self._conn.execute("INSERT INTO schema_meta (version) VALUES (?)", (SCHEMA_VERSION,))
            elif row["version"] != SCHEMA_VERSION:
                raise StoreUnavailable(
                    f"schema version {row['version']} != expected {SCHEMA_VERSION}"
                )

    def close(self) -> None:
        with self._lock:
            self._conn.close()

    def __enter__(self) -> "MetadataStore":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    @contextmanager
    def transaction(self):
        """Serialized transaction; commits on success, rolls back on error.

        Nests: inner transaction() blocks join the outermost one, which alone
        commits or rolls back. This lets apply() bundle helper calls (each of
        which opens its own transaction when used standalone) into one atomic
        unit.
        """
        with self._lock:
            self._txn_depth += 1
            try:
                yield self._conn
            except Exception:
                self._txn_depth -= 1
                if self._txn_depth == 0:
                    self._conn.rollback()
                raise
            else:
                self._txn_depth -= 1
                if self._txn_depth == 0:
                    self._conn.commit()

    def execute(self, sql: str, params: Iterable[Any] = ()) -> sqlite3.Cursor:
        with self._lock:
            return self._conn.execute(sql, tuple(params))

    def query(self, sql: str, params: Iterable[Any] = ()) -> list[sqlite3.Row]:
        """Read-only analysis access to the documented schema."""
        with self._lock:
            return self._conn.execute(sql, tuple(params)).fetchall()

    def scalar(self, sql: str, params: Iterable[Any] = ()) -> Any:
        row = self.execute(sql, params).fetchone()
        return None if row is None else row[0]

    # -- cursors -------------------------------------------------------------

    def get_cursor(self, feed: str = "default") -> Optional[str]:
        return self.scalar("SELECT cursor FROM ingest_state WHERE feed = ?", (feed,))

    def set_cursor(self, cursor: str, feed: str = "default") -> None:
        with self.transaction():
            self._conn.execute(
                "INSERT INTO ingest_state (feed, cursor) VALUES (?, ?) "
                "ON CONFLICT (feed) DO UPDATE SET cursor = excluded.cursor",
                (feed, cursor),
            )

    def get_scraper_state(self, scraper: str) -> Optional[str]:
        return self.scalar(
            "SELECT cursor FROM scraper_state WHERE scraper = ?", (scraper,)
        )

    def set_scraper_state(self, scraper: str, cursor: str) -> None:
        with self.transaction():
            self._conn.execute(
                "INSERT INTO scraper_state (scraper, cursor) VALUES (?, ?) "
                "ON CONFLICT (scraper) DO UPDATE SET cursor = excluded.cursor",
                (scraper, cursor),
            )

    # -- packages / versions / dependencies ----------------------------------

    def get_package_state(self, name: str) -> Optional[PackageState]:
        with self._lock:
            pkg = self._conn.execute(
                "SELECT id, deleted FROM packages WHERE name = ?", (name,)
            ).fetchone()
            if pkg is None:
                return None
            state = PackageState(package_id=pkg["id"], deleted=bool(pkg["deleted"]))
            rows = self._conn.execute(
                "SELECT id, version, content_hash, deleted, generation FROM versions "
                "WHERE package_id = ? AND superseded = 0",
                (pkg["id"],),
            ).fetchall()
            for r in rows:
                state.versions[r["version"]] = VersionState(
                    version_id=r["id"],
                    content_hash=r["content_hash"],
                    deleted=bool(r["deleted"]),
                    generation=r["generation"],
                )
            return state

    def upsert_package(self, name: str, seq: Optional[str] = None) -> int:
        with self.transaction():
            self._conn.execute(
                "INSERT INTO packages (name, latest_known_seq) VALUES (?, ?) "
                "ON CONFLICT (name) DO UPDATE SET latest_known_seq = excluded.latest_known_seq",
                (name, seq),
            )
            return self._conn.execute(
                "SELECT id FROM packages WHERE name = ?", (name,)
            ).fetchone()[0]

    def set_package_deleted(self, package_id: int, deleted: bool) -> int:
        """Flag a package (and, on delete, its live versions). Returns the
        number of version rows whose flag actually changed."""
        now = self.clock.now()
        with self.transaction():
            if deleted:
                self._conn.execute(
                    "UPDATE packages SET deleted = 1, deleted_at = ? WHERE id = ? AND deleted = 0",
                    (now, package_id),
                )
                cur = self._conn.execute(
                    "UPDATE versions SET deleted = 1, deleted_at = ? "
                    "WHERE package_id = ? AND deleted = 0",
                    (now, package_id),
                )
                return cur.rowcount
            self._conn.execute(
                "UPDATE packages SET deleted = 0, deleted_at = NULL WHERE id = ?",
                (package_id,),
            )
            return 0

    def insert_version(
        self,
        package_id: int,
        manifest: dict,
        version: semver.Version,
        content_hash: str,
        published_at: Optional[float],
        generation: int = 0,
    ) -> tuple[int, bool]:
        """Insert one version row; idempotent on (package, version, generation).

        Returns (version_id, created)."""
        extra = {k: v for k, v in manifest.items() if k not in _PARSED_FIELDS}
        tarball_url = None
        dist = manifest.get("dist")
        if isinstance(dist, dict):
            tarball_url = dist.get("tarball")
        source = "manifest" if published_at is not None else "ingest"
        if published_at is None:
            published_at = self.clock.now()
        with self.transaction():
            existing = self._conn.execute(
                "SELECT id FROM versions WHERE package_id = ? AND version = ? AND generation = ?",
                (package_id, str(version), generation),
            ).fetchone()
            if existing is not None:
                return existing["id"], False
            cur = self._conn.execute(
                "INSERT INTO versions (package_id, version, major, minor, patch, prerelease, "
                "generation, content_hash, published_at, published_at_source, tarball_url, "
                "extra_metadata) VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?)",
                (
                    package_id,
                    str(version),
                    version.major,
                    version.minor,
                    version.patch,
                    ".".join(version.prerelease),
                    generation,
                    content_hash,
                    published_at,
                    source,
                    tarball_url,
                    json.dumps(extra, sort_keys=True, separators=(",", ":")),
                ),
            )
            version_id = cur.lastrowid
            self._insert_dependencies(version_id, manifest)
            return version_id, True

    def _insert_dependencies(self, version_id: int, manifest: dict) -> None:
        for manifest_key, kind in _DEP_KINDS:
            deps = manifest.get(manifest_key)
            if not isinstance(deps, dict):
                continue
            for dep_name, raw in sorted(deps.items()):
                raw = raw if isinstance(raw, str) else json.dumps(raw)
                try:
                    canonical = semver.parse_constraint(raw).to_text()
                except semver.MalformedRange:
                    canonical = None
                self._conn.execute(
                    "INSERT OR IGNORE INTO dependencies "
                    '(version_id, depends_on_name, constraint_raw, "constraint", kind) '
                    "VALUES (?, ?, ?, ?, ?)",
                    (version_id, dep_name, raw, canonical, kind),
                )

    def set_version_deleted(self, version_id: int, deleted: bool) -> int:
        """Returns 1 if the flag changed, else 0."""
        with self.transaction():
            if deleted:
                cur = self._conn.execute(
                    "UPDATE versions SET deleted = 1, deleted_at = ? WHERE id = ? AND deleted = 0",
                    (self.clock.now(), version_id),
                )
            else:
                cur = self._conn.execute(
                    "UPDATE versions SET deleted = 0, deleted_at = NULL "
                    "WHERE id = ? AND deleted = 1",
                    (version_id,),
                )
            return cur.rowcount

    def supersede_version(self, version_id: int) -> int:
        """Returns 1 if the flag changed, else 0."""
        with self.transaction():
            cur = self._conn.execute(
                "UPDATE versions SET superseded = 1 WHERE id = ? AND superseded = 0",
                (version_id,),
            )
            return cur.rowcount

    # -- dead letters ---------------------------------------------------------

    def record_dead_letter(self, seq: Optional[str], package: Optional[str], raw: Any, error: str) -> None:
        payload = raw if isinstance(raw, str) else json.dumps(raw, sort_keys=True)
        with self.transaction():
            self._conn.execute(
                "INSERT INTO dead_letters (seq, package_name, raw, error, recorded_at) "
                "VALUES (?, ?, ?, ?, ?)",
                (seq, package, payload, error, self.clock.now()),
            )

    # -- metrics --------------------------------------------------------------

    def append_metric_points(self, package_id: int, points: Iterable[tuple[str, int]]) -> int:
        """Append (week_start, counter) points; weeks already present are
        ignored so reruns never rewrite history. Returns points appended."""
        appended = 0
        with self.transaction():
            row = self._conn.execute(
                "SELECT download_counts FROM download_metrics WHERE package_id = ?",
                (package_id,),
            ).fetchone()
            series = json.loads(row["download_counts"]) if row else []
            known_weeks = {p["week_start"] for p in series}
            for week_start, counter in sorted(points):
                if week_start in known_weeks:
                    continue
                series.append({"week_start": week_start, "counter": int(counter)})
                known_weeks.add(week_start)
                appended += 1
            series.sort(key=lambda p: p["week_start"])
            self._conn.execute(
                "INSERT INTO download_metrics (package_id, download_counts) VALUES (?, ?) "
                "ON CONFLICT (package_id) DO UPDATE SET download_counts = excluded.download_counts",
                (package_id, json.dumps(series, separators=(",", ":"))),
            )
        return appended

    def record_metric_failure(self, package_name: str, week_start: Optional[str], error: str) -> None:
        with self.transaction():
            self._conn.execute(
                "INSERT INTO metric_fetch_failures (package_name, week_start, error, recorded_at) "
                "VALUES (?, ?, ?, ?)",
                (package_name, week_start, error, self.clock.now()),
            )

    # -- advisories ------------------------------------------------------------

    def upsert_advisory(
        self,
        advisory_id: str,
        package_name: str,
        affected_ranges: list[dict],
        severity: str = "",
        cwes: Optional[list[str]] = None,
        withdrawn: bool = False,
    ) -> None:
        with self.transaction():
            self._conn.execute(
                "INSERT INTO vulnerabilities "
                "(advisory_id, package_name, severity, cwes, withdrawn, affected_ranges) "
                "VALUES (?, ?, ?, ?, ?, ?) "
                "ON CONFLICT (advisory_id, package_name) DO UPDATE SET "
                "severity = excluded.severity, cwes = excluded.cwes, "
                "withdrawn = excluded.withdrawn, affected_ranges = excluded.affected_ranges",
                (
                    advisory_id,
                    package_name,
                    severity,
                    json.dumps(cwes or [], separators=(",", ":")),
                    int(withdrawn),
                    json.dumps(affected_ranges, separators=(",", ":")),
                ),
            )
