from __future__ import annotations

import hashlib
import json
from pathlib import Path

import pytest
import requests

from registry_follower import analyses
from registry_follower.clock import SimulatedClock
from registry_follower.errors import ScenarioInvalid
from registry_follower.harness import MockRegistry, Scenario, builders, run_scenario, tarball_bytes
from registry_follower.harness.oracle import expected_impact_pairs, expected_state

SCENARIOS = Path(__file__).parent / "fixtures" / "scenarios"


def _load(name: str) -> Scenario:
    return Scenario.load(SCENARIOS / f"{name}.json")


# --- scenario validation ----------------------------------------------------


@pytest.mark.parametrize(
    "raw",
    [
        [],
        {"events": {}},
        {"events": [{"action": "publish"}]},                      # no at
        {"events": [{"at": -1, "action": "publish",
                     "package": "a", "version": "1.0.0"}]},
        {"events": [{"at": 0, "action": "explode"}]},
        {"events": [{"at": 0, "action": "publish", "version": "1.0.0"}]},
        {"events": [{"at": 0, "action": "publish", "package": "a"}]},
        {"events": [{"at": 0, "action": "publish", "package": "a",
                     "version": "1.0.0", "tarball": {"seed": 1}}]},
        {"events": [{"at": 0, "action": "publish", "package": "a",
                     "version": "1.0.0", "tarball": {"seed": 1, "size": 0}}]},
        {"events": [{"at": 0, "action": "publish", "package": "a",
                     "version": "1.0.0", "manifest": 7}]},
        {"events": [{"at": 0, "action": "delete_package"}]},
        {"events": [{"at": 0, "action": "advisory"}]},
        {"events": [{"at": 0, "action": "advisory_withdraw"}]},
        {"events": [{"at": 0, "action": "metrics_week", "downloads": {}}]},
        {"events": [{"at": 0, "action": "metrics_week", "week_start": "w"}]},
    ],
)
def test_invalid_scenarios_are_rejected(raw):
    with pytest.raises(ScenarioInvalid):
        Scenario.from_dict(raw)


def test_events_are_sorted_by_time():
    sc = Scenario.from_dict({"events": [
        {"at": 9, "action": "delete_package", "package": "a"},
        {"at": 1, "action": "publish", "package": "a", "version": "1.0.0"},
    ]})
    assert [e["at"] for e in sc.events] == [1, 9]
    assert sc.feed_times() == [1, 9]
    assert sc.end_time() == 9


def test_load_missing_file_raises(tmp_path):
    with pytest.raises(ScenarioInvalid):
        Scenario.load(tmp_path / "nope.json")


def test_tarball_bytes_deterministic():
    assert tarball_bytes(None) is None
    assert tarball_bytes({"b64": "aGk="}) == b"hi"
    a = tarball_bytes({"seed": 5, "size": 64})
    assert a == tarball_bytes({"seed": 5, "size": 64})
    assert len(a) == 64
    assert a != tarball_bytes({"seed": 6, "size": 64})


def test_checked_in_scenarios_parse():
    for path in sorted(SCENARIOS.glob("*.json")):
        sc = Scenario.load(path)
        assert sc.events, path.name


# --- builders ---------------------------------------------------------------


def test_relist_feed_shape():
    sc = builders.relist_feed(10)
    assert len(sc.feed_events()) == 10
    assert {e["package"] for e in sc.events} == {"hot"}
    assert sc.events[-1]["version"] == "1.0.9"


def test_retention_shape():
    sc = builders.retention(publishes=20, deletes=8, versions_per_package=5)
    pubs = [e for e in sc.events if e["action"] == "publish"]
    dels = [e for e in sc.events if e["action"] == "delete_version"]
    assert len(pubs) == 20 and len(dels) == 8
    assert len({e["package"] for e in pubs}) == 4  # 20 / 5


def test_scripted_latencies_split():
    sla = 1000.0
    sc = builders.scripted_latencies(n=50, sla_seconds=sla, within=44)
    delays = [float(e.get("delay", 0)) for e in sc.feed_events()]
    assert len(delays) == 50
    assert sum(1 for d in delays if d <= sla) == 44
    assert all(d > sla for d in delays[44:])


def test_metrics_sweep_builder_shape():
    sc = builders.metrics_sweep(packages=12)
    weeks = [e for e in sc.events if e["action"] == "metrics_week"]
    assert len(weeks) == 1
    assert len(weeks[0]["downloads"]) == 12
    assert len(sc.feed_events()) == 12


def test_skewed_sizes_builder_shape():
    sc = builders.skewed_sizes(small_count=3, small_size=10, big_size=90)
    sizes = sorted(e["tarball"]["size"] for e in sc.feed_events())
    assert sizes == [10, 10, 10, 90]


# --- mock registry ----------------------------------------------------------


@pytest.fixture
def clock():
    return SimulatedClock(0.0)


def _changes(base, **params):
    r = requests.get(f"{base}/_changes", params={"include_docs": "true", **params})
    assert r.status_code == 200
    return r.json()


def test_mock_docs_accumulate_versions(clock):
    sc = Scenario.from_dict({"events": [
        {"at": 1, "action": "publish", "package": "p", "version": "1.0.0"},
        {"at": 2, "action": "publish", "package": "p", "version": "1.1.0"},
        {"at": 3, "action": "publish", "package": "p", "version": "2.0.0"},
    ]})
    with MockRegistry(sc, clock) as mock:
        clock.advance_to(3.0)
        body = _changes(mock.base_url, since="0", limit=100)
        docs = [row["doc"] for row in body["results"]]
        assert [sorted(d["versions"]) for d in docs] == [
            ["1.0.0"], ["1.0.0", "1.1.0"], ["1.0.0", "1.1.0", "2.0.0"],
        ]
        assert docs[2]["time"]["2.0.0"] == "1970-01-01T00:00:03Z"


def test_mock_hides_future_events_and_paginates(clock):
    sc = Scenario.from_dict({"events": [
        {"at": 1, "action": "publish", "package": "p", "version": "1.0.0"},
        {"at": 2, "action": "publish", "package": "q", "version": "1.0.0"},
        {"at": 9, "action": "publish", "package": "r", "version": "1.0.0"},
    ]})
    with MockRegistry(sc, clock) as mock:
        clock.advance_to(2.0)
        body = _changes(mock.base_url, since="0", limit=1)
        assert [r["id"] for r in body["results"]] == ["p"]
        body = _changes(mock.base_url, since=body["last_seq"], limit=10)
        assert [r["id"] for r in body["results"]] == ["q"]  # r is in the future
        again = _changes(mock.base_url, since=body["last_seq"], limit=10)
        assert again["results"] == []
        assert again["last_seq"] == body["last_seq"]


def test_mock_deletion_rows(clock):
    sc = Scenario.from_dict({"events": [
        {"at": 1, "action": "publish", "package": "p", "version": "1.0.0"},
        {"at": 2, "action": "publish", "package": "p", "version": "1.1.0"},
        {"at": 3, "action": "delete_version", "package": "p", "version": "1.0.0"},
        {"at": 4, "action": "delete_package", "package": "p"},
    ]})
    with MockRegistry(sc, clock) as mock:
        clock.advance_to(4.0)
        rows = _changes(mock.base_url, since="0")["results"]
        assert sorted(rows[2]["doc"]["versions"]) == ["1.1.0"]
        assert rows[3].get("deleted") is True and "doc" not in rows[3]


def test_mock_tarball_lifecycle(clock):
    sc = Scenario.from_dict({"events": [
        {"at": 1, "action": "publish", "package": "p", "version": "1.0.0",
         "tarball": {"seed": 3, "size": 32}, "delay": 10, "tarball_gone_at": 50},
    ]})
    with MockRegistry(sc, clock) as mock:
        url = mock.tarball_url("p", "1.0.0")
        clock.advance_to(4.0)
        r = requests.get(url)
        assert r.status_code == 503
        assert r.headers["Retry-After"] == "7"  # available at 11, now 4
        clock.advance_to(11.0)
        r = requests.get(url)
        assert r.status_code == 200
        assert r.content == tarball_bytes({"seed": 3, "size": 32})
        clock.advance_to(50.0)
        assert requests.get(url).status_code == 404
        assert requests.get(f"{mock.base_url}/tarballs/x/-/x-9.9.9.tgz").status_code == 404


def test_mock_metrics_shapes_and_budget(clock):
    sc = Scenario.from_dict({
        "metrics_budget": {"requests_per_interval": 1, "interval_seconds": 60,
                           "batch_size": 128},
        "metrics_faults": [429],
        "events": [
            {"at": 0, "action": "metrics_week", "week_start": "2026-08-10",
             "downloads": {"p": 41, "@scope/q": 42}},
        ],
    })
    with MockRegistry(sc, clock) as mock:
        base = f"{mock.base_url}/downloads/point/last-week"
        assert requests.get(f"{base}/p").status_code == 429  # scripted fault
        clock.advance_to(60.0)
        r = requests.get(f"{base}/p,unknown")
        assert r.status_code == 200
        body = r.json()
        assert body["p"]["downloads"] == 41 and body["unknown"] is None
        clock.advance_to(120.0)
        r = requests.get(f"{base}/%40scope%2Fq")
        assert r.status_code == 200 and r.json()["downloads"] == 42
        clock.advance_to(180.0)
        assert requests.get(f"{base}/%40scope%2Fq,p").status_code == 400
        assert mock.bad_requests  # scoped name in a bulk request
        clock.advance_to(240.0)
        assert requests.get(f"{base}/p").status_code == 200
        assert mock.budget_violations == []
        # same instant as the previous request: over budget, and recorded
        assert requests.get(f"{base}/p").status_code == 200
        assert len(mock.budget_violations) == 1


def test_mock_advisories_follow_the_clock(clock):
    sc = Scenario.from_dict({"events": [
        {"at": 10, "action": "advisory", "doc": {"id": "A-1", "affected": []}},
        {"at": 20, "action": "advisory_withdraw", "id": "A-1"},
    ]})
    with MockRegistry(sc, clock) as mock:
        url = f"{mock.base_url}/advisories"
        assert requests.get(url).json() == []
        clock.advance_to(10.0)
        (doc,) = requests.get(url).json()
        assert doc["id"] == "A-1" and "withdrawn" not in doc
        clock.advance_to(20.0)
        (doc,) = requests.get(url).json()
        assert doc["withdrawn"] == "1970-01-01T00:00:20Z"


# --- oracle vs. pipeline ----------------------------------------------------


def _store_series(store):
    out = {}
    for r in store.query(
        "SELECT p.name, m.download_counts FROM download_metrics m "
        "JOIN packages p ON p.id = m.package_id"
    ):
        out[r["name"]] = [
            (pt["week_start"], pt["counter"])
            for pt in json.loads(r["download_counts"])
        ]
    return out


def _diff_against_oracle(result, expected, *, check_latencies, sla_seconds,
                         check_metrics):
    """Every way the run's end state can disagree with the script's
    interpretation, as human-readable strings; empty means equivalent."""
    diffs = []
    store = result.store

    n_pkgs = store.scalar("SELECT COUNT(*) FROM packages")
    if n_pkgs != len(expected.packages):
        diffs.append(f"package count {n_pkgs} != {len(expected.packages)}")
    for name, pkg in expected.packages.items():
        state = store.get_package_state(name)
        if state is None:
            diffs.append(f"{name}: missing from store")
            continue
        if state.deleted != pkg.deleted:
            diffs.append(f"{name}: deleted {state.deleted} != {pkg.deleted}")
        if set(state.versions) != set(pkg.versions):
            diffs.append(f"{name}: versions {sorted(state.versions)} "
                         f"!= {sorted(pkg.versions)}")
            continue
        for vstr, ev in pkg.versions.items():
            vs = state.versions[vstr]
            if vs.deleted != ev.deleted:
                diffs.append(f"{name}@{vstr}: deleted {vs.deleted} != {ev.deleted}")
            if vs.generation != ev.generations - 1:
                diffs.append(f"{name}@{vstr}: generation {vs.generation} "
                             f"!= {ev.generations - 1}")

    rows = store.scalar("SELECT COUNT(*) FROM versions")
    if rows != expected.version_rows:
        diffs.append(f"version rows {rows} != {expected.version_rows}")
    deleted_rows = store.scalar(
        "SELECT COUNT(*) FROM versions WHERE deleted = 1 AND superseded = 0"
    )
    if deleted_rows != expected.deleted_version_rows:
        diffs.append(f"deleted rows {deleted_rows} != {expected.deleted_version_rows}")

    stored_keys = set(result.blob.keys())
    if stored_keys != set(expected.blobs):
        diffs.append(f"blob keys {sorted(stored_keys)} != {sorted(expected.blobs)}")
    else:
        for key, data in expected.blobs.items():
            if result.blob.fetch(key) != data:
                diffs.append(f"{key}: bytes differ")
    missing = {
        r["blob_key"] for r in store.query(
            "SELECT blob_key FROM download_jobs WHERE state = 'missing'"
        )
    }
    if missing != expected.missing:
        diffs.append(f"missing {sorted(missing)} != {sorted(expected.missing)}")

    if check_latencies:
        got = {
            r["blob_key"]: r["completed_at"] - r["enqueued_at"]
            for r in store.query(
                "SELECT blob_key, enqueued_at, completed_at FROM download_jobs "
                "WHERE state = 'done'"
            )
        }
        if got != expected.latencies:
            diffs.append(f"latencies {got} != {expected.latencies}")
        if result.latency["fraction_within"] != expected.fraction_within(sla_seconds):
            diffs.append(
                f"fraction_within {result.latency['fraction_within']} "
                f"!= {expected.fraction_within(sla_seconds)}"
            )

    got_adv = {
        (r["advisory_id"], r["package_name"]): bool(r["withdrawn"])
        for r in store.query(
            "SELECT advisory_id, package_name, withdrawn FROM vulnerabilities"
        )
    }
    if got_adv != expected.advisories:
        diffs.append(f"advisories {got_adv} != {expected.advisories}")

    if check_metrics:
        series = _store_series(store)
        if series != expected.metric_series:
            diffs.append(f"metrics {series} != {expected.metric_series}")
    return diffs


def test_e2e_basic_matches_oracle(tmp_path):
    sc = _load("e2e_basic")
    result = run_scenario(sc, tmp_path / "run", sweep=True, advisories=True)
    try:
        expected = expected_state(sc, base_url=result.base_url,
                                  sweep_time=result.clock.now())
        diffs = _diff_against_oracle(
            result, expected,
            check_latencies=True, sla_seconds=sc.sla_seconds, check_metrics=True,
        )
        assert diffs == []
        assert result.budget_violations == []
        assert result.bad_requests == []
        assert result.latency["count"] == 3
        assert result.latency["fraction_within"] == 1.0
    finally:
        result.close()


def test_e2e_basic_is_deterministic(tmp_path):
    sc = _load("e2e_basic")

    def fingerprint(workdir):
        result = run_scenario(sc, workdir, sweep=True, advisories=True)
        try:
            # blob keys and content hashes cover tarball URLs, which embed
            # the mock's ephemeral port; compare port-independent facts
            versions = [
                tuple(r) for r in result.store.query(
                    "SELECT p.name, v.version, v.generation, v.deleted, "
                    "v.superseded FROM versions v "
                    "JOIN packages p ON p.id = v.package_id "
                    "ORDER BY p.name, v.version, v.generation"
                )
            ]
            blobs = {
                k.split("#")[0]: hashlib.sha256(result.blob.fetch(k)).hexdigest()
                for k in result.blob.keys()
            }
            return {
                "versions": versions,
                "blobs": blobs,
                "latency": result.latency,
                "downloads": result.download_counts,
                "ingest": result.ingest_totals,
                "metrics": _store_series(result.store),
            }
        finally:
            result.close()

    assert fingerprint(tmp_path / "a") == fingerprint(tmp_path / "b")


def test_impact_scenario_matches_oracle_and_pipeline(tmp_path):
    sc = _load("impact")
    result = run_scenario(sc, tmp_path / "run", sweep=True, advisories=True)
    try:
        expected = expected_state(sc, base_url=result.base_url,
                                  sweep_time=result.clock.now())
        diffs = _diff_against_oracle(
            result, expected,
            check_latencies=True, sla_seconds=sc.sla_seconds, check_metrics=True,
        )
        assert diffs == []

        analyses.materialize_direct_runtime_deps(result.store)
        gated = analyses.impact_candidates(
            result.store, min_weekly_downloads=1_000_000, require_test_script=True
        )
        got = {(c.client_name, c.client_version, c.vulnerable_name) for c in gated}
        assert got == expected_impact_pairs(sc, 1_000_000, True)
        assert got == {
            ("app-tested", "1.0.0", "vuln-lib"),
            ("app-both", "2.0.0", "vuln-lib"),
        }
        ungated = analyses.impact_candidates(result.store)
        assert {(c.client_name, c.client_version, c.vulnerable_name)
                for c in ungated} == expected_impact_pairs(sc)

        # the candidate tarballs are servable from the archive even though
        # the upstream URL is scripted to die at t=100
        for c in gated:
            assert c.blob_key in set(result.blob.keys())
            assert len(result.blob.fetch(c.blob_key)) == 400
    finally:
        result.close()


def test_faults_scenario_survives_and_matches_oracle(tmp_path):
    sc = _load("faults")
    result = run_scenario(sc, tmp_path / "run", sweep=True, advisories=True)
    try:
        expected = expected_state(sc, base_url=result.base_url,
                                  sweep_time=result.clock.now())
        # scripted fault lists make retry timing a pipeline policy, so
        # latencies are asserted directly instead of via the oracle
        diffs = _diff_against_oracle(
            result, expected,
            check_latencies=False, sla_seconds=sc.sla_seconds, check_metrics=True,
        )
        assert diffs == []

        (row,) = result.store.query(
            "SELECT attempts, completed_at - enqueued_at AS latency "
            "FROM download_jobs WHERE state = 'done'"
        )
        assert row["attempts"] == 3  # two 503s, then success
        assert row["latency"] == 6.0  # backoff 2 + 4

        assert result.sweep_report.rate_limited == 1
        assert result.sweep_report.points_appended == 1
        assert result.budget_violations == []

        (adv,) = result.store.query(
            "SELECT affected_ranges FROM vulnerabilities WHERE advisory_id = 'OSV-BAD-RANGE'"
        )
        ranges = json.loads(adv["affected_ranges"])
        assert all(r["dnf"] is None for r in ranges)
    finally:
        result.close()
