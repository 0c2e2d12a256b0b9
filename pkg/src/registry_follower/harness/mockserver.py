"""Mock registry: serves a scripted Scenario over real HTTP with the exact
wire shapes the follower consumes — a `_changes` feed, tarball URLs,
the batched metrics endpoint (which records every request and checks the
rate budget itself), and an advisory list.

Time is the injected clock, never the wall: an event exists only once the
simulated clock has reached its `at`. Each feed event gets its own row
whose doc re-lists every version the package has at that point, like the
upstream feed does.
"""

from __future__ import annotations

import hashlib
import json
import threading
from collections import deque
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, unquote, urlparse

from ..clock import Clock
from .scenario import Scenario, tarball_bytes


def _seq_token(index: int) -> str:
    return f"{index}-{hashlib.sha1(str(index).encode()).hexdigest()[:6]}"


def _iso(t: float) -> str:
    from datetime import datetime, timezone

    return (
        datetime.fromtimestamp(t, tz=timezone.utc)
        .isoformat()
        .replace("+00:00", "Z")
    )


class MockRegistry:
    """One scenario, one simulated clock, four endpoint families."""

    def __init__(self, scenario: Scenario, clock: Clock,
                 host: str = "127.0.0.1", port: int = 0):
        self.scenario = scenario
        self.clock = clock
        self._feed = [
            (i + 1, e) for i, e in enumerate(scenario.feed_events())
        ]
        # (package, version) -> tarball record; republishes merge below
        self._tarballs: dict[tuple[str, str], dict] = {}
        self._tarball_locks: dict[tuple[str, str], threading.Lock] = {}
        for _, e in self._feed:
            if e["action"] != "publish":
                continue
            key = (e["package"], e["version"])
            record = {
                "data": tarball_bytes(e.get("tarball")),
                "available_at": e["at"] + float(e.get("delay", 0)),
                "gone_at": e.get("tarball_gone_at"),
                "faults": deque(e.get("tarball_faults", [])),
            }
            old = self._tarballs.get(key)
            if old is not None and old["data"] is not None and record["data"] is not None:
                # A republish must not retro-delay a URL that went live at
                # the first publish; scripted faults accumulate in order.
                record["available_at"] = min(old["available_at"], record["available_at"])
                record["faults"] = deque(list(old["faults"]) + list(record["faults"]))
            self._tarballs[key] = record
            self._tarball_locks[key] = threading.Lock()
        self._metric_weeks = [
            e for e in scenario.events if e["action"] == "metrics_week"
        ]
        self._advisories = [
            e for e in scenario.events if e["action"] == "advisory"
        ]
        self._withdrawals = [
            e for e in scenario.events if e["action"] == "advisory_withdraw"
        ]
        self._feed_faults = deque(scenario.feed_faults)
        self._metrics_faults = deque(scenario.metrics_faults)
        self._state_lock = threading.Lock()

        self.metrics_request_times: list[float] = []
        self.budget_violations: list[str] = []
        self.bad_requests: list[str] = []

        self._server = ThreadingHTTPServer((host, port), _Handler)
        self._server.daemon_threads = True
        self._server.registry = self  # type: ignore[attr-defined]
        self._thread: threading.Thread | None = None

    @property
    def base_url(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "MockRegistry":
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def __enter__(self) -> "MockRegistry":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

    # -- feed -----------------------------------------------------------------

    def tarball_url(self, package: str, version: str) -> str:
        return f"{self.base_url}/tarballs/{package}/-/{package}-{version}.tgz"

    def _doc_at(self, feed_index: int, package: str) -> dict:
        """The package document as of one feed event: every version published
        up to that event and not deleted by then, with its publish time."""
        versions: dict[str, dict] = {}
        times: dict[str, str] = {}
        for idx, e in self._feed:
            if idx > feed_index or e.get("package") != package:
                continue
            if e["action"] == "publish":
                manifest = dict(e.get("manifest") or {})
                manifest["version"] = e["version"]
                if e.get("tarball") is not None:
                    manifest["dist"] = {
                        "tarball": self.tarball_url(package, e["version"])
                    }
                versions[e["version"]] = manifest
                times[e["version"]] = _iso(e["at"])
            elif e["action"] == "delete_version":
                versions.pop(e["version"], None)
                times.pop(e["version"], None)
            elif e["action"] == "delete_package":
                versions.clear()
                times.clear()
        return {"name": package, "versions": versions, "time": times}

    def handle_changes(self, query: dict) -> tuple[int, dict | None]:
        if self._feed_faults:
            return int(self._feed_faults.popleft()), None
        since = query.get("since", ["0"])[0]
        try:
            since_index = int(since.split("-", 1)[0])
        except ValueError:
            return 400, {"error": "bad_request", "reason": f"invalid since {since!r}"}
        try:
            limit = int(query.get("limit", ["100"])[0])
        except ValueError:
            return 400, {"error": "bad_request", "reason": "invalid limit"}
        now = self.clock.now()
        results = []
        for idx, e in self._feed:
            if idx <= since_index or e["at"] > now:
                continue
            row = {"seq": _seq_token(idx), "id": e["package"]}
            if e["action"] == "delete_package":
                row["deleted"] = True
            else:
                row["doc"] = self._doc_at(idx, e["package"])
            results.append(row)
            if len(results) >= limit:
                break
        last_seq = results[-1]["seq"] if results else since
        return 200, {"results": results, "last_seq": last_seq}

    # -- tarballs -------------------------------------------------------------

    def handle_tarball(self, package: str, version: str):
        record = self._tarballs.get((package, version))
        if record is None or record["data"] is None:
            return 404, None, {}
        now = self.clock.now()
        if record["gone_at"] is not None and now >= record["gone_at"]:
            return 404, None, {}
        if now < record["available_at"]:
            # Not ready yet; say exactly when to come back.
            return 503, None, {"Retry-After": str(int(record["available_at"] - now))}
        with self._tarball_locks[(package, version)]:
            if record["faults"]:
                status = int(record["faults"].popleft())
                return status, None, {}
        return 200, record["data"], {}

    # -- metrics --------------------------------------------------------------

    def _current_week(self) -> dict | None:
        now = self.clock.now()
        current = None
        for e in self._metric_weeks:
            if e["at"] <= now:
                current = e
        return current

    def handle_metrics(self, names_path: str) -> tuple[int, dict | None]:
        now = self.clock.now()
        budget = self.scenario.metrics_budget
        interval = float(budget["interval_seconds"])
        limit = int(budget["requests_per_interval"])
        with self._state_lock:
            recent = [
                t for t in self.metrics_request_times if now - interval < t <= now
            ]
            self.metrics_request_times.append(now)
            if len(recent) + 1 > limit:
                self.budget_violations.append(
                    f"{len(recent) + 1} requests in ({now - interval}, {now}]"
                )
            if self._metrics_faults:
                return int(self._metrics_faults.popleft()), None
        names = [unquote(n) for n in names_path.split(",") if n]
        if not names:
            return 400, {"error": "no packages"}
        if len(names) > 1 and any("/" in n for n in names):
            self.bad_requests.append(f"scoped name in bulk request: {names_path}")
            return 400, {"error": "scoped packages cannot be bulk-queried"}
        week = self._current_week()
        points: dict[str, dict | None] = {}
        for name in names:
            if week is not None and name in week["downloads"]:
                points[name] = {
                    "downloads": int(week["downloads"][name]),
                    "start": week["week_start"],
                    "end": week["week_start"],
                    "package": name,
                }
            else:
                points[name] = None
        if len(names) == 1 and "/" in names[0]:
            single = points[names[0]]
            return (200, single) if single is not None else (404, {"error": "no data"})
        return 200, points

    # -- advisories -----------------------------------------------------------

    def handle_advisories(self) -> tuple[int, list]:
        now = self.clock.now()
        withdrawn_ids = {
            e["id"]: e["at"] for e in self._withdrawals if e["at"] <= now
        }
        docs = []
        for e in self._advisories:
            if e["at"] > now:
                continue
            doc = json.loads(json.dumps(e["doc"]))  # deep copy
            if doc.get("id") in withdrawn_ids:
                doc["withdrawn"] = _iso(withdrawn_ids[doc["id"]])
            docs.append(doc)
        return 200, docs


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    # Headers and body go out as separate writes; without TCP_NODELAY that
    # costs a delayed-ACK stall (~40ms) on every poll of a busy feed.
    disable_nagle_algorithm = True

    def log_message(self, *args) -> None:  # keep test output clean
        pass

    def do_GET(self) -> None:
        registry: MockRegistry = self.server.registry  # type: ignore[attr-defined]
        parsed = urlparse(self.path)
        path = parsed.path
        if path == "/_changes":
            status, body = registry.handle_changes(parse_qs(parsed.query))
            self._send_json(status, body)
        elif path.startswith("/tarballs/"):
            parts = unquote(path[len("/tarballs/"):]).split("/-/")
            if len(parts) != 2 or not parts[1].endswith(".tgz"):
                self._send_json(404, {"error": "not found"})
                return
            package = parts[0]
            version = parts[1][len(package) + 1:-len(".tgz")]
            status, data, headers = registry.handle_tarball(package, version)
            if status == 200:
                self._send_bytes(200, data, "application/octet-stream")
            else:
                self._send_json(status, {"error": f"http-{status}"}, headers)
        elif path.startswith("/downloads/point/last-week/"):
            names_path = path[len("/downloads/point/last-week/"):]
            status, body = registry.handle_metrics(names_path)
            self._send_json(status, body)
        elif path == "/advisories":
            status, body = registry.handle_advisories()
            self._send_json(status, body)
        else:
            self._send_json(404, {"error": "not found"})

    def _send_json(self, status: int, body, headers: dict | None = None) -> None:
        data = b"" if body is None else json.dumps(body).encode("utf-8")
        self._send_bytes(status, data, "application/json", headers)

    def _send_bytes(self, status: int, data: bytes, content_type: str,
                    headers: dict | None = None) -> None:
        self.send_response(status)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(data)))
        for k, v in (headers or {}).items():
            self.send_header(k, v)
        self.end_headers()
        self.wfile.write(data)
