"""The `follower` command suite.

Daemons (`ingest`, `manager`, `workers`, `sweep-metrics`, `sync-advisories`)
coordinate only through the metadata store, the job queue, and the blob
manager protocol, so each runs as its own process and survives restarts.
Query commands (`analyze`, `blob`, `latency-report`) read the same state and
can export CSV plus rendered figures.

Exit codes: 0 success, 1 usage/config error, 2 runtime failure. Failures
print one JSON object on stderr: {"error": <code>, "message": ...}.
"""

from __future__ import annotations

import json
import logging
import os
import re
import signal
import socket
import sys
import threading
from pathlib import Path
from typing import Optional

import click

from . import analyses, config, downloads, ingest, jsonlog, reporting, scrapers
from .blobrpc import BlobClient, BlobManagerServer
from .blobstore import BlobIndex
from .errors import ConfigError, FollowerError
from .scrapers import RateBudget
from .store import MetadataStore

log = logging.getLogger("registry_follower.cli")

_DURATION = re.compile(r"^\s*(\d+(?:\.\d+)?)\s*(d|h|m|s)?\s*$")
_DURATION_UNITS = {"d": 86400.0, "h": 3600.0, "m": 60.0, "s": 1.0, None: 1.0}


def parse_duration(text: str) -> float:
    """'24h' -> 86400.0; bare numbers are seconds; d/h/m/s suffixes."""
    m = _DURATION.match(text)
    if not m:
        raise click.BadParameter(f"cannot parse duration {text!r} (try 30s, 90m, 24h)")
    return float(m.group(1)) * _DURATION_UNITS[m.group(2)]


class Duration(click.ParamType):
    name = "duration"

    def convert(self, value, param, ctx):
        if isinstance(value, (int, float)):
            return float(value)
        try:
            return parse_duration(value)
        except click.BadParameter as e:
            self.fail(e.message, param, ctx)


def _emit(obj: dict) -> None:
    click.echo(json.dumps(obj, sort_keys=True))


class _LazyConfig:
    """Defers config loading until a command actually needs a field, so
    `--help` and argument validation work without a config file."""

    def __init__(self, path: Optional[str], log_override: Optional[str]):
        self._path = path
        self._log_override = log_override
        self._cfg: Optional[config.Config] = None

    def _load(self) -> config.Config:
        if self._cfg is None:
            self._cfg = config.load(self._path)
            jsonlog.setup(self._log_override or self._cfg.log_level)
        return self._cfg

    def __getattr__(self, name: str):
        return getattr(self._load(), name)


@click.group()
@click.option("--config", "-c", "config_path", envvar="FOLLOWER_CONFIG",
              type=click.Path(dir_okay=False), default=None,
              help="JSON config file; FOLLOWER_* env vars override its fields.")
@click.option("--log-level", default=None,
              help="Override the configured log level for this invocation.")
@click.pass_context
def cli(ctx: click.Context, config_path: Optional[str], log_level: Optional[str]):
    """Continual registry follower: feed ingestion, tarball archiving,
    scrapers, and analyses over the accumulated state."""
    ctx.obj = _LazyConfig(config_path, log_level)


def _store(cfg: config.Config) -> MetadataStore:
    return MetadataStore(cfg.store_path)


def _index(cfg: config.Config) -> BlobIndex:
    return BlobIndex(cfg.blob_root, segment_size=cfg.segment_size)


@cli.command("ingest")
@click.option("--once", is_flag=True, help="Drain the feed and exit.")
@click.option("--limit", default=None, type=int, help="Events per poll.")
@click.pass_obj
def ingest_cmd(cfg: config.Config, once: bool, limit: Optional[int]):
    """Follow the changes feed and apply updates to the store."""
    store = _store(cfg)
    feed = ingest.FeedClient(cfg.feed_url)
    if store.get_cursor() is None:
        store.set_cursor(cfg.start_cursor)
    totals = ingest.run_ingest(
        store, feed, once=once,
        limit=limit if limit is not None else cfg.feed_limit,
        poll_interval=cfg.poll_interval,
    )
    _emit({"cursor": store.get_cursor(), **totals})


@cli.command()
@click.pass_obj
def manager(cfg: config.Config):
    """Serve the blob index over the manager wire protocol until SIGTERM."""
    index = _index(cfg)
    server = BlobManagerServer(index, cfg.manager_host, cfg.manager_port)
    stop = threading.Event()
    for sig in (signal.SIGTERM, signal.SIGINT):
        signal.signal(sig, lambda *_: stop.set())
    with server:
        host, port = server.address
        log.info("manager listening", extra={"host": host, "port": port,
                                             "root": str(index.root)})
        _emit({"listening": f"{host}:{port}", "blobs": len(index.keys())})
        stop.wait()
    index.close()


@cli.command()
@click.option("--count", default=None, type=int, help="Worker threads.")
@click.option("--drain", is_flag=True,
              help="Exit once the queue is empty instead of idling.")
@click.option("--batch", default=16, type=int, help="Jobs leased per claim.")
@click.pass_obj
def workers(cfg: config.Config, count: Optional[int], drain: bool, batch: int):
    """Run download workers against the queue and the blob manager."""
    store = _store(cfg)
    n = count if count is not None else cfg.worker_count
    if n < 1:
        raise click.BadParameter("--count must be >= 1")
    prefix = f"{socket.gethostname()}:{os.getpid()}"
    results = []

    def one_worker(i: int) -> None:
        with BlobClient(cfg.manager_address, cfg.blob_root) as blob:
            worker = downloads.Downloader(store, blob, f"{prefix}:{i}")
            results.append(worker.run(batch=batch, drain=drain))

    threads = [
        threading.Thread(target=one_worker, args=(i,), name=f"worker-{i}")
        for i in range(n)
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    merged: dict[str, int] = {}
    for r in results:
        for k, v in r.items():
            merged[k] = merged.get(k, 0) + v
    _emit({"workers": n, **merged})


@cli.command("sweep-metrics")
@click.option("--url", default=None, help="Metrics API base URL override.")
@click.pass_obj
def sweep_metrics(cfg: config.Config, url: Optional[str]):
    """One full download-metrics pass under the configured rate budget."""
    base = url or cfg.metrics_url
    if not base:
        raise click.UsageError("no metrics URL configured (metrics_url or --url)")
    store = _store(cfg)
    budget = RateBudget(cfg.metrics_requests_per_interval,
                        cfg.metrics_interval_seconds, cfg.metrics_batch_size)
    report = scrapers.run_sweep(store, base, budget)
    _emit({
        "planned_batches": report.planned_batches,
        "requests": report.requests,
        "points_appended": report.points_appended,
        "failures": report.failures,
        "rate_limited": report.rate_limited,
        "requeued": report.requeued,
        "duration": report.finished_at - report.started_at,
        "errors": report.errors,
    })


@cli.command("sync-advisories")
@click.option("--source", default=None,
              help="Advisory URL, file, or directory override.")
@click.pass_obj
def sync_advisories(cfg: config.Config, source: Optional[str]):
    """Fetch advisory documents and upsert per-package vulnerability rows."""
    src = source or cfg.advisory_source
    if not src:
        raise click.UsageError(
            "no advisory source configured (advisory_source or --source)")
    store = _store(cfg)
    _emit(scrapers.sync_advisories(store, src))


@cli.group()
def analyze():
    """Built-in analyses over the accumulated store."""


def _maybe_outdir(out: Optional[str]) -> Optional[Path]:
    return Path(out) if out else None


@analyze.command("deps")
@click.option("--out", default=None, type=click.Path(file_okay=False),
              help="Directory for CSV export.")
@click.pass_obj
def analyze_deps(cfg: config.Config, out: Optional[str]):
    """Materialize direct runtime dependency edges."""
    store = _store(cfg)
    result = analyses.materialize_direct_runtime_deps(store)
    outdir = _maybe_outdir(out)
    if outdir:
        rows = store.query(
            "SELECT cp.name AS client, cv.version AS client_version, dp.name AS depends_on "
            "FROM metadata_analysis.version_direct_runtime_deps e "
            "JOIN versions cv ON cv.id = e.v "
            "JOIN packages cp ON cp.id = cv.package_id "
            "JOIN packages dp ON dp.id = e.depends_on_pkg "
            "ORDER BY cp.name, cv.version, dp.name"
        )
        reporting.write_csv(outdir / "deps.csv",
                            ["client", "client_version", "depends_on"],
                            [[r["client"], r["client_version"], r["depends_on"]]
                             for r in rows])
    _emit(result)


@analyze.command("resolve")
@click.option("--as-of", "as_of_policy", default="client_publish",
              type=click.Choice(["client_publish", "latest"]),
              help="Candidate filter: versions live at client publish time, "
                   "or currently-live versions.")
@click.option("--out", default=None, type=click.Path(file_okay=False))
@click.pass_obj
def analyze_resolve(cfg: config.Config, as_of_policy: str, out: Optional[str]):
    """Resolve each dependency edge to a concrete version."""
    store = _store(cfg)
    analyses.materialize_direct_runtime_deps(store)
    result = analyses.resolve_edges(store, as_of_policy=as_of_policy)
    outdir = _maybe_outdir(out)
    if outdir:
        rows = store.query(
            "SELECT cp.name AS client, cv.version AS client_version, "
            '       dp.name AS depends_on, e."constraint" AS spec, '
            "       rv.version AS resolved "
            "FROM metadata_analysis.resolved_edges e "
            "JOIN versions cv ON cv.id = e.v "
            "JOIN packages cp ON cp.id = cv.package_id "
            "JOIN packages dp ON dp.id = e.depends_on_pkg "
            "LEFT JOIN versions rv ON rv.id = e.resolved_version_id "
            "ORDER BY cp.name, cv.version, dp.name"
        )
        reporting.write_csv(
            outdir / "resolved_edges.csv",
            ["client", "client_version", "depends_on", "constraint", "resolved"],
            [[r["client"], r["client_version"], r["depends_on"], r["spec"],
              r["resolved"] or ""] for r in rows])
    _emit(result)


@analyze.command("updates")
@click.option("--out", default=None, type=click.Path(file_okay=False))
@click.pass_obj
def analyze_updates(cfg: config.Config, out: Optional[str]):
    """Classify each release as a major/minor/patch/prerelease update and
    flag out-of-order (backport) publishes."""
    store = _store(cfg)
    result = analyses.compute_updates(store)
    outdir = _maybe_outdir(out)
    if outdir:
        rows = [
            {
                "package": r["package"], "from_version": r["from_version"],
                "to_version": r["to_version"], "kind": r["kind"],
                "out_of_order": bool(r["out_of_order"]),
            }
            for r in store.query(
                "SELECT p.name AS package, fv.version AS from_version, "
                "       tv.version AS to_version, u.kind, u.out_of_order "
                "FROM metadata_analysis.updates u "
                "JOIN packages p ON p.id = u.package_id "
                "JOIN versions fv ON fv.id = u.from_version_id "
                "JOIN versions tv ON tv.id = u.to_version_id "
                "ORDER BY p.name, tv.version"
            )
        ]
        reporting.updates_report(outdir, rows)
    _emit(result)


@analyze.command("vulnerable")
@click.option("--out", default=None, type=click.Path(file_okay=False))
@click.pass_obj
def analyze_vulnerable(cfg: config.Config, out: Optional[str]):
    """Version-precise advisory matches over the affected ranges."""
    store = _store(cfg)
    result = analyses.vulnerable_versions(store)
    outdir = _maybe_outdir(out)
    if outdir:
        rows = store.query(
            "SELECT p.name AS package, v.version, vv.advisory_id "
            "FROM metadata_analysis.vulnerable_versions vv "
            "JOIN versions v ON v.id = vv.version_id "
            "JOIN packages p ON p.id = v.package_id "
            "ORDER BY p.name, v.version, vv.advisory_id"
        )
        reporting.write_csv(outdir / "vulnerable_versions.csv",
                            ["package", "version", "advisory"],
                            [[r["package"], r["version"], r["advisory_id"]]
                             for r in rows])
    _emit(result)


@analyze.command("impact")
@click.option("--min-downloads", default=0, type=int,
              help="Only vulnerable packages whose latest weekly count "
                   "exceeds this qualify.")
@click.option("--require-tests", is_flag=True,
              help="Only client versions declaring a test script qualify.")
@click.option("--out", default=None, type=click.Path(file_okay=False))
@click.pass_obj
def analyze_impact(cfg: config.Config, min_downloads: int, require_tests: bool,
                   out: Optional[str]):
    """Candidate (client version, vulnerable package) pairs with the client
    blob keys needed to pull their tarballs from the archive."""
    store = _store(cfg)
    analyses.materialize_direct_runtime_deps(store)
    candidates = analyses.impact_candidates(
        store, min_weekly_downloads=min_downloads,
        require_test_script=require_tests)
    advisory_ids: dict[str, list] = {}
    for r in store.query(
            "SELECT DISTINCT package_name, advisory_id FROM vulnerabilities "
            "WHERE withdrawn = 0 ORDER BY advisory_id"):
        advisory_ids.setdefault(r["package_name"], []).append(r["advisory_id"])
    rows = [
        {
            "client_package": c.client_name,
            "client_version": c.client_version,
            "vulnerable_package": c.vulnerable_name,
            "advisories": advisory_ids.get(c.vulnerable_name, []),
            "client_blob_key": c.blob_key,
        }
        for c in candidates
    ]
    outdir = _maybe_outdir(out)
    if outdir:
        reporting.impact_report(outdir, rows)
    _emit({"candidates": rows, "count": len(rows)})


@cli.group()
def blob():
    """Read-side access to the append-only tarball archive."""


@blob.command("cp")
@click.argument("key")
@click.argument("dest", type=click.Path(dir_okay=False, writable=True))
@click.option("--via-manager", is_flag=True,
              help="Fetch through the manager protocol instead of opening "
                   "the index directly.")
@click.pass_obj
def blob_cp(cfg: config.Config, key: str, dest: str, via_manager: bool):
    """Copy one stored blob to DEST, verifying its digest on the way out."""
    if via_manager:
        with BlobClient(cfg.manager_address, cfg.blob_root) as client:
            data = client.fetch(key)
    else:
        index = _index(cfg)
        try:
            data = index.fetch(key)
        finally:
            index.close()
    Path(dest).write_bytes(data)
    _emit({"key": key, "dest": dest, "bytes": len(data)})


@blob.command("stats")
@click.option("--threshold", default=None, type=int,
              help="Also report count/byte fractions a keep-below-threshold "
                   "policy would retain.")
@click.option("--out", default=None, type=click.Path(file_okay=False),
              help="Directory for CSV + figures.")
@click.pass_obj
def blob_stats(cfg: config.Config, threshold: Optional[int], out: Optional[str]):
    """Size statistics over every committed blob."""
    index = _index(cfg)
    try:
        st = index.stats(threshold)
        outdir = _maybe_outdir(out)
        if outdir:
            sizes = [index.lookup(k).num_bytes for k in index.keys()]
            reporting.blob_report(outdir, sizes, st)
    finally:
        index.close()
    _emit(st.to_json())


@cli.command("latency-report")
@click.option("--sla", type=Duration(), required=True,
              help="Target latency, e.g. 24h, 90m, or seconds.")
@click.option("--out", default=None, type=click.Path(file_okay=False),
              help="Directory for CSV + figures.")
@click.pass_obj
def latency_report(cfg: config.Config, sla: float, out: Optional[str]):
    """Publish-to-archive latency percentiles and SLA attainment."""
    store = _store(cfg)
    report = downloads.latency_report(store, sla)
    outdir = _maybe_outdir(out)
    if outdir:
        latencies = [
            r["latency"] for r in store.query(
                "SELECT completed_at - enqueued_at AS latency FROM download_jobs "
                "WHERE state = 'done' ORDER BY latency"
            )
        ]
        reporting.latency_report(outdir, latencies, report)
    _emit(report)


@cli.command()
@click.argument("scenario", type=click.Path(exists=True, dir_okay=False))
@click.option("--workdir", type=click.Path(file_okay=False), required=True,
              help="Fresh directory for the replayed store and blobs.")
@click.option("--sweep", is_flag=True, help="Run a metrics sweep at the end.")
@click.option("--advisories", is_flag=True,
              help="Sync scripted advisories at the end.")
@click.pass_obj
def replay(cfg: config.Config, scenario: str, workdir: str, sweep: bool,
           advisories: bool):
    """Replay a scripted scenario against the in-process mock registry."""
    from .harness import Scenario, run_scenario

    sc = Scenario.load(scenario)
    result = run_scenario(sc, Path(workdir), sweep=sweep, advisories=advisories)
    try:
        _emit({
            "scenario": sc.name,
            "ingest": result.ingest_totals,
            "downloads": result.download_counts,
            "latency": result.latency,
            "budget_violations": result.budget_violations,
        })
    finally:
        result.close()


def main(argv: Optional[list] = None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.exceptions.Exit as e:
        return e.exit_code
    except click.ClickException as e:
        print(json.dumps({"error": "usage", "message": e.format_message()}),
              file=sys.stderr)
        return 1
    except ConfigError as e:
        print(json.dumps({"error": e.code, "message": str(e)}), file=sys.stderr)
        return 1
    except FollowerError as e:
        print(json.dumps({"error": e.code, "message": str(e)}), file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 130
    except Exception as e:  # pragma: no cover - last-ditch diagnostics
        print(json.dumps({"error": "internal",
                          "message": f"{type(e).__name__}: {e}"}),
              file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
