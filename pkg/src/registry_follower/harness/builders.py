"""Programmatic builders for the synthetic stress scenarios: feeds that
re-list every prior version, bulk deletion, scripted download delays, rate
-limited sweeps, and skewed blob-size populations. Everything integer-timed
so simulated-clock arithmetic is exact."""

from __future__ import annotations

from .scenario import Scenario


def relist_feed(n: int, package: str = "hot") -> Scenario:
    """n publishes of one package; the mock re-lists all prior versions in
    every event's doc, so stored bytes stay linear only if ingest diffs."""
    events = [
        {
            "at": k + 1,
            "action": "publish",
            "package": package,
            "version": f"1.0.{k}",
            "manifest": {"description": f"release {k}"},
            "tarball": None,
        }
        for k in range(n)
    ]
    return Scenario.from_dict({"name": f"relist-{n}", "events": events})


def retention(publishes: int = 100, deletes: int = 40,
              versions_per_package: int = 5) -> Scenario:
    """publishes versions with real tarball bytes, then deletes `deletes`
    of them (soft deletion upstream: later docs omit the version)."""
    assert publishes % versions_per_package == 0
    events = []
    t = 0
    names = []
    for p in range(publishes // versions_per_package):
        name = f"pkg-{p:03d}"
        for j in range(versions_per_package):
            t += 1
            events.append({
                "at": t,
                "action": "publish",
                "package": name,
                "version": f"1.0.{j}",
                "tarball": {"seed": 1000 + t, "size": 50 + t},
            })
            names.append((name, f"1.0.{j}"))
    for i in range(deletes):
        name, version = names[i]
        t += 1
        events.append({
            "at": t,
            "action": "delete_version",
            "package": name,
            "version": version,
        })
    return Scenario.from_dict({"name": "retention", "events": events})


def scripted_latencies(n: int = 1000, sla_seconds: int = 86400,
                       within: int = 988) -> Scenario:
    """One tarball per package with a scripted availability delay; exactly
    `within` of the n delays fall inside the SLA (strictly, no boundary
    cases), the rest exceed it."""
    events = []
    for i in range(n):
        if i < within:
            delay = (i * 37) % (sla_seconds - 1)  # 0 .. sla-2
        else:
            delay = sla_seconds + 60 + i
        events.append({
            "at": i + 1,
            "action": "publish",
            "package": f"dl-{i:04d}",
            "version": "1.0.0",
            "tarball": {"seed": i, "size": 32},
            "delay": delay,
        })
    return Scenario.from_dict({
        "name": f"latency-{n}",
        "sla_seconds": sla_seconds,
        "events": events,
    })


def metrics_sweep(packages: int = 1000, requests_per_interval: int = 1,
                  interval_seconds: int = 60, batch_size: int = 128,
                  week_start: str = "2026-08-17") -> Scenario:
    """All packages published up front, one scripted metrics week covering
    every one of them."""
    events = [
        {
            "at": 1,
            "action": "publish",
            "package": f"m-{i:04d}",
            "version": "1.0.0",
            "tarball": None,
        }
        for i in range(packages)
    ]
    events.append({
        "at": 1,
        "action": "metrics_week",
        "week_start": week_start,
        "downloads": {f"m-{i:04d}": (i * 13) % 100000 for i in range(packages)},
    })
    return Scenario.from_dict({
        "name": f"sweep-{packages}",
        "events": events,
        "metrics_budget": {
            "requests_per_interval": requests_per_interval,
            "interval_seconds": interval_seconds,
            "batch_size": batch_size,
        },
    })


def skewed_sizes(small_count: int = 199, small_size: int = 5000,
                 big_size: int = 995000) -> Scenario:
    """Many small tarballs plus one huge one: a threshold of small_size
    halves total bytes while keeping >=99% of blobs."""
    events = []
    for i in range(small_count):
        events.append({
            "at": i + 1,
            "action": "publish",
            "package": f"sz-{i:04d}",
            "version": "1.0.0",
            "tarball": {"seed": i, "size": small_size},
        })
    events.append({
        "at": small_count + 1,
        "action": "publish",
        "package": "sz-huge",
        "version": "1.0.0",
        "tarball": {"seed": 999999, "size": big_size},
    })
    return Scenario.from_dict({"name": "size-skew", "events": events})
