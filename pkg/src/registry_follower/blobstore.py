"""Append-only blob storage for tarballs.

One manager (BlobIndex) owns the mapping key -> (file, offset, length) and
hands out write tickets; workers write segment byte ranges themselves. The
index is durable via an append-only JSONL log: reservations are logged and
fsynced *before* the ticket is returned, so a byte range is never issued
twice even if the manager dies mid-write; commits are logged after the
manager has read the range back and verified its digest. Recovery replays
the log, keeps all committed locations, and drops open tickets — their
ranges become permanent holes.
"""

from __future__ import annotations

import hashlib
import json
import os
import statistics
import threading
import uuid
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

from .clock import Clock, SystemClock
from .errors import (
    AlreadyStored,
    BlobCorruption,
    BlobError,
    BlobNotFound,
    ChecksumMismatch,
    StoreFull,
    TicketExpired,
)

DEFAULT_SEGMENT_SIZE = 1 << 30  # 1 GiB
DEFAULT_TICKET_TTL = 600.0  # 10 minutes


def blob_key(package_name: str, version: str, tarball_url: str) -> str:
    """Stable key for one stored tarball: name@version plus a short hash of
    the URL so a republished version with a new tarball gets a new key."""
    url_hash = hashlib.sha256(tarball_url.encode("utf-8")).hexdigest()[:12]
    return f"{package_name}@{version}#{url_hash}"


def digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


@dataclass(frozen=True)
class BlobLocation:
    file_name: str
    byte_offset: int
    num_bytes: int
    checksum: str

    def to_json(self) -> dict:
        return {
            "file_name": self.file_name,
            "byte_offset": self.byte_offset,
            "num_bytes": self.num_bytes,
            "checksum": self.checksum,
        }

    @classmethod
    def from_json(cls, d: dict) -> "BlobLocation":
        return cls(d["file_name"], d["byte_offset"], d["num_bytes"], d["checksum"])


@dataclass(frozen=True)
class WriteTicket:
    ticket_id: str
    key: str
    file_name: str
    byte_offset: int
    num_bytes: int
    expiry: float

    def to_json(self) -> dict:
        return {
            "ticket_id": self.ticket_id,
            "key": self.key,
            "file_name": self.file_name,
            "byte_offset": self.byte_offset,
            "num_bytes": self.num_bytes,
            "expiry": self.expiry,
        }

    @classmethod
    def from_json(cls, d: dict) -> "WriteTicket":
        return cls(
            d["ticket_id"], d["key"], d["file_name"],
            d["byte_offset"], d["num_bytes"], d["expiry"],
        )


@dataclass(frozen=True)
class SizeStats:
    count: int
    total_bytes: int
    mean: float
    median: float
    threshold: Optional[int] = None
    retained_count_fraction: Optional[float] = None
    retained_byte_fraction: Optional[float] = None

    def to_json(self) -> dict:
        d = {
            "count": self.count,
            "total_bytes": self.total_bytes,
            "mean": self.mean,
            "median": self.median,
        }
        if self.threshold is not None:
            d["threshold"] = self.threshold
            d["retained_count_fraction"] = self.retained_count_fraction
            d["retained_byte_fraction"] = self.retained_byte_fraction
        return d


class BlobIndex:
    """The manager's authoritative, linearizable index over one blob root.

    All index mutations happen under one lock and are logged before they
    take effect for callers.
    """

    def __init__(
        self,
        root: Union[str, Path],
        clock: Optional[Clock] = None,
        segment_size: int = DEFAULT_SEGMENT_SIZE,
        ticket_ttl: float = DEFAULT_TICKET_TTL,
        max_total_bytes: Optional[int] = None,
    ):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.clock = clock or SystemClock()
        self.segment_size = segment_size
        self.ticket_ttl = ticket_ttl
        self.max_total_bytes = max_total_bytes
        self._lock = threading.Lock()
        self._committed: dict[str, BlobLocation] = {}
        self._tickets: dict[str, WriteTicket] = {}
        self._segment = 0
        self._offset = 0
        self._reserved_total = 0
        self._log_path = self.root / "index.log"
        self._recover()
        self._log = open(self._log_path, "a", encoding="utf-8")

    def _recover(self) -> None:
        """Replay the log. Commits rebuild the key map; reserve entries only
        advance the high-water mark so crashed writers' ranges stay holes."""
        if not self._log_path.exists():
            return
        watermarks: dict[int, int] = {}
        with open(self._log_path, encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                entry = json.loads(line)
                seg = int(entry["file_name"].split("-", 1)[1])
                end = entry["byte_offset"] + entry["num_bytes"]
                watermarks[seg] = max(watermarks.get(seg, 0), end)
                self._reserved_total += entry["num_bytes"] if entry["op"] == "reserve" else 0
                if entry["op"] == "commit":
                    self._committed[entry["key"]] = BlobLocation(
                        entry["file_name"], entry["byte_offset"],
                        entry["num_bytes"], entry["checksum"],
                    )
        if watermarks:
            self._segment = max(watermarks)
            self._offset = watermarks[self._segment]

    def _append_log(self, entry: dict) -> None:
        self._log.write(json.dumps(entry, separators=(",", ":")) + "\n")
        self._log.flush()
        os.fsync(self._log.fileno())

    def segment_path(self, file_name: str) -> Path:
        return self.root / file_name

    # -- manager operations ---------------------------------------------------

    def reserve(self, key: str, size: int) -> WriteTicket:
        if size <= 0:
            raise BlobError(f"blob size must be positive, got {size}")
        with self._lock:
            loc = self._committed.get(key)
            if loc is not None:
                raise AlreadyStored(key, loc)
            if self.max_total_bytes is not None and self._reserved_total + size > self.max_total_bytes:
                raise StoreFull(f"reserving {size} bytes would exceed {self.max_total_bytes}")
            if self._offset > 0 and self._offset + size > self.segment_size:
                self._segment += 1
                self._offset = 0
            ticket = WriteTicket(
                ticket_id=uuid.uuid4().hex,
                key=key,
                file_name=f"seg-{self._segment}",
                byte_offset=self._offset,
                num_bytes=size,
                expiry=self.clock.now() + self.ticket_ttl,
            )
            # Durable before the ticket escapes: after any crash this range
            # is accounted for and never issued again.
            self._append_log({"op": "reserve", **ticket.to_json()})
            self._offset += size
            self._reserved_total += size
            self._tickets[ticket.ticket_id] = ticket
            self.segment_path(ticket.file_name).touch()
            return ticket

    def commit(self, ticket_id: str, checksum: str) -> BlobLocation:
        with self._lock:
            ticket = self._tickets.get(ticket_id)
            if ticket is None:
                raise TicketExpired(f"unknown or expired ticket {ticket_id}")
            if self.clock.now() > ticket.expiry:
                del self._tickets[ticket_id]
                raise TicketExpired(f"ticket {ticket_id} expired; range abandoned")
            existing = self._committed.get(ticket.key)
            if existing is not None:
                # Another ticket won the race; this range becomes a hole.
                del self._tickets[ticket_id]
                return existing
            actual = self._digest_range(ticket)
            if actual != checksum:
                del self._tickets[ticket_id]
                raise ChecksumMismatch(
                    f"{ticket.key}: wrote {actual or 'short range'}, claimed {checksum}"
                )
            location = BlobLocation(
                ticket.file_name, ticket.byte_offset, ticket.num_bytes, checksum
            )
            self._append_log({"op": "commit", "key": ticket.key, **location.to_json()})
            self._committed[ticket.key] = location
            del self._tickets[ticket_id]
            return location

    def _digest_range(self, ticket: WriteTicket) -> Optional[str]:
        """Digest of the reserved range as actually on disk; None on short read."""
        try:
            with open(self.segment_path(ticket.file_name), "rb") as f:
                f.seek(ticket.byte_offset)
                data = f.read(ticket.num_bytes)
        except OSError:
            return None
        if len(data) != ticket.num_bytes:
            return None
        return digest(data)

    def lookup(self, key: str) -> BlobLocation:
        with self._lock:
            loc = self._committed.get(key)
        if loc is None:
            raise BlobNotFound(key)
        return loc

    def stats(self, threshold: Optional[int] = None) -> SizeStats:
        with self._lock:
            sizes = [loc.num_bytes for loc in self._committed.values()]
        if not sizes:
            return SizeStats(0, 0, 0.0, 0.0, threshold,
                             None if threshold is None else 0.0,
                             None if threshold is None else 0.0)
        total = sum(sizes)
        stats = SizeStats(
            count=len(sizes),
            total_bytes=total,
            mean=total / len(sizes),
            median=float(statistics.median(sizes)),
        )
        if threshold is None:
            return stats
        kept = [s for s in sizes if s <= threshold]
        return SizeStats(
            count=stats.count,
            total_bytes=stats.total_bytes,
            mean=stats.mean,
            median=stats.median,
            threshold=threshold,
            retained_count_fraction=len(kept) / len(sizes),
            retained_byte_fraction=sum(kept) / total,
        )

    def keys(self) -> list[str]:
        with self._lock:
            return sorted(self._committed)

    def expire_tickets(self) -> int:
        """Drop expired tickets; their ranges stay holes. Returns count."""
        now = self.clock.now()
        with self._lock:
            dead = [t for t, tk in self._tickets.items() if now > tk.expiry]
            for t in dead:
                del self._tickets[t]
        return len(dead)

    def close(self) -> None:
        with self._lock:
            self._log.close()

    # -- worker-side I/O (direct file access; also used by the RPC client) ----

    def write_range(self, ticket: WriteTicket, data: bytes) -> str:
        return write_range(self.root, ticket, data)

    def read(self, location: BlobLocation) -> bytes:
        return read_range(self.root, location)

    # -- convenience round-trips ----------------------------------------------

    def store(self, key: str, data: bytes) -> BlobLocation:
        """reserve -> write -> commit; idempotent for already-stored keys."""
        try:
            ticket = self.reserve(key, len(data))
        except AlreadyStored as e:
            return e.location
        checksum = self.write_range(ticket, data)
        return self.commit(ticket.ticket_id, checksum)

    def fetch(self, key: str) -> bytes:
        return self.read(self.lookup(key))


def write_range(root: Path, ticket: WriteTicket, data: bytes) -> str:
    """Write a reserved segment range and return the digest for commit.

    Workers call this directly against the shared filesystem; only the
    reserve/commit bookkeeping goes through the manager.
    """
    if len(data) != ticket.num_bytes:
        raise BlobError(f"ticket is for {ticket.num_bytes} bytes, got {len(data)}")
    path = Path(root) / ticket.file_name
    with open(path, "r+b" if path.exists() else "wb") as f:
        f.seek(ticket.byte_offset)
        f.write(data)
        f.flush()
        os.fsync(f.fileno())
    return digest(data)


def read_range(root: Path, location: BlobLocation) -> bytes:
    """Read a committed range and verify its digest."""
    try:
        with open(Path(root) / location.file_name, "rb") as f:
            f.seek(location.byte_offset)
            data = f.read(location.num_bytes)
    except OSError as e:
        raise BlobError(f"cannot read {location}: {e}") from e
    if len(data) != location.num_bytes:
        raise BlobCorruption(
            f"{location.file_name}@{location.byte_offset}: "
            f"read {len(data)} of {location.num_bytes} bytes"
        )
    if digest(data) != location.checksum:
        raise BlobCorruption(
            f"{location.file_name}@{location.byte_offset}: digest mismatch"
        )
    return data
