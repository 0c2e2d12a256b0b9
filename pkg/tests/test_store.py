from __future__ import annotations

import json

import pytest

from registry_follower.clock import SimulatedClock
from registry_follower.semver import parse_version
from registry_follower.store import MetadataStore


@pytest.fixture
def store():
    with MetadataStore(":memory:", clock=SimulatedClock(1000.0)) as s:
        yield s


def _manifest(**kw):
    m = {"version": "1.0.0", "dist": {"tarball": "http://r/t-1.0.0.tgz"}}
    m.update(kw)
    return m


# --- schema / attachment ---------------------------------------------------


def test_analysis_schema_attached(store):
    names = {
        r["name"]
        for r in store.query(
            "SELECT name FROM metadata_analysis.sqlite_master WHERE type = 'table'"
        )
    }
    assert "version_direct_runtime_deps" in names
    assert "resolved_edges" in names
    assert "impact_candidates" in names


def test_analysis_tables_usable_with_two_level_names(store):
    store.execute(
        "INSERT INTO metadata_analysis.version_direct_runtime_deps (v, depends_on_pkg) "
        "VALUES (1, 2)"
    )
    row = store.query(
        "SELECT v, depends_on_pkg FROM metadata_analysis.version_direct_runtime_deps"
    )[0]
    assert (row["v"], row["depends_on_pkg"]) == (1, 2)


def test_file_store_persists(tmp_path):
    path = str(tmp_path / "meta.db")
    with MetadataStore(path) as s:
        s.set_cursor("42-abc")
    with MetadataStore(path) as s:
        assert s.get_cursor() == "42-abc"
    assert (tmp_path / "meta.db.analysis").exists()


# --- cursors ----------------------------------------------------------------


def test_cursor_roundtrip(store):
    assert store.get_cursor() is None
    store.set_cursor("7-x")
    assert store.get_cursor() == "7-x"
    store.set_cursor("9-y")
    assert store.get_cursor() == "9-y"


def test_cursor_per_feed(store):
    store.set_cursor("1", feed="a")
    store.set_cursor("2", feed="b")
    assert store.get_cursor("a") == "1"
    assert store.get_cursor("b") == "2"
    assert store.get_cursor() is None


def test_scraper_state(store):
    assert store.get_scraper_state("metrics") is None
    store.set_scraper_state("metrics", "2026-08-17")
    assert store.get_scraper_state("metrics") == "2026-08-17"


# --- packages & versions ----------------------------------------------------


def test_upsert_package_idempotent(store):
    a = store.upsert_package("left-pad", "1-a")
    b = store.upsert_package("left-pad", "2-b")
    assert a == b
    assert store.scalar("SELECT COUNT(*) FROM packages") == 1
    assert store.scalar("SELECT latest_known_seq FROM packages WHERE id = ?", (a,)) == "2-b"


def test_insert_version_and_state(store):
    pid = store.upsert_package("p")
    vid, created = store.insert_version(
        pid, _manifest(), parse_version("1.0.0"), "h1", 100.0
    )
    assert created
    state = store.get_package_state("p")
    assert not state.deleted
    assert state.versions["1.0.0"].content_hash == "h1"
    assert state.versions["1.0.0"].generation == 0
    vid2, created2 = store.insert_version(
        pid, _manifest(), parse_version("1.0.0"), "h1", 100.0
    )
    assert (vid2, created2) == (vid, False)


def test_insert_version_defaults_publish_time_to_clock(store):
    pid = store.upsert_package("p")
    store.insert_version(pid, _manifest(), parse_version("1.0.0"), "h", None)
    row = store.query("SELECT published_at, published_at_source FROM versions")[0]
    assert row["published_at"] == 1000.0
    assert row["published_at_source"] == "ingest"


def test_extra_metadata_excludes_parsed_fields(store):
    pid = store.upsert_package("p")
    manifest = _manifest(
        dependencies={"a": "^1.0.0"},
        devDependencies={"b": "*"},
        scripts={"test": "node t.js"},
        description="d",
    )
    store.insert_version(pid, manifest, parse_version("1.0.0"), "h", 1.0)
    extra = json.loads(store.scalar("SELECT extra_metadata FROM versions"))
    assert "dependencies" not in extra and "devDependencies" not in extra
    assert "version" not in extra
    assert extra["scripts"] == {"test": "node t.js"}
    # scripts.test must be reachable with json_extract for the impact query
    assert store.scalar(
        "SELECT json_extract(extra_metadata, '$.scripts.test') FROM versions"
    ) == "node t.js"
    assert store.scalar("SELECT tarball_url FROM versions") == "http://r/t-1.0.0.tgz"


def test_dependencies_canonicalized(store):
    pid = store.upsert_package("p")
    manifest = _manifest(
        dependencies={"ok": "^1.2.3", "weird": "not a range ###"},
        peerDependencies={"peer": "1.x"},
    )
    store.insert_version(pid, manifest, parse_version("1.0.0"), "h", 1.0)
    rows = {
        r["depends_on_name"]: r
        for r in store.query(
            'SELECT depends_on_name, constraint_raw, "constraint", kind FROM dependencies'
        )
    }
    assert rows["ok"]["constraint"] == ">=1.2.3 <2.0.0"
    assert rows["ok"]["kind"] == "runtime"
    assert rows["weird"]["constraint"] is None  # unparseable kept raw-only
    assert rows["weird"]["constraint_raw"] == "not a range ###"
    assert rows["peer"]["kind"] == "peer"
    assert rows["peer"]["constraint"] == ">=1.0.0 <2.0.0"


def test_version_soft_delete_and_undelete(store):
    pid = store.upsert_package("p")
    vid, _ = store.insert_version(pid, _manifest(), parse_version("1.0.0"), "h", 1.0)
    assert store.set_version_deleted(vid, True) == 1
    assert store.set_version_deleted(vid, True) == 0  # already flagged
    row = store.query("SELECT deleted, deleted_at FROM versions")[0]
    assert row["deleted"] == 1 and row["deleted_at"] == 1000.0
    assert store.set_version_deleted(vid, False) == 1
    row = store.query("SELECT deleted, deleted_at FROM versions")[0]
    assert row["deleted"] == 0 and row["deleted_at"] is None


def test_package_delete_flags_live_versions(store):
    pid = store.upsert_package("p")
    store.insert_version(pid, _manifest(), parse_version("1.0.0"), "h1", 1.0)
    vid2, _ = store.insert_version(
        pid, _manifest(version="1.1.0"), parse_version("1.1.0"), "h2", 2.0
    )
    store.set_version_deleted(vid2, True)
    changed = store.set_package_deleted(pid, True)
    assert changed == 1  # only the still-live row flips
    assert store.get_package_state("p").deleted
    assert store.scalar("SELECT COUNT(*) FROM versions WHERE deleted = 1") == 2


def test_supersede_hides_old_generation(store):
    pid = store.upsert_package("p")
    v0, _ = store.insert_version(pid, _manifest(), parse_version("1.0.0"), "h0", 1.0)
    assert store.supersede_version(v0) == 1
    assert store.supersede_version(v0) == 0
    v1, created = store.insert_version(
        pid, _manifest(description="republished"), parse_version("1.0.0"),
        "h1", 2.0, generation=1,
    )
    assert created and v1 != v0
    state = store.get_package_state("p")
    assert state.versions["1.0.0"].version_id == v1
    assert state.versions["1.0.0"].generation == 1
    # both generations remain as rows
    assert store.scalar("SELECT COUNT(*) FROM versions") == 2


# --- transactions -----------------------------------------------------------


def test_nested_transaction_commits_once(store):
    with store.transaction():
        store.upsert_package("a")  # opens a nested transaction internally
        store.set_cursor("5-x")
    assert store.get_cursor() == "5-x"
    assert store.get_package_state("a") is not None


def test_outer_rollback_undoes_nested_writes(store):
    store.set_cursor("1-a")
    with pytest.raises(RuntimeError):
        with store.transaction():
            store.upsert_package("doomed")
            store.set_cursor("2-b")
            raise RuntimeError("boom")
    assert store.get_cursor() == "1-a"
    assert store.get_package_state("doomed") is None


# --- metrics ----------------------------------------------------------------


def test_append_metric_points_idempotent_and_sorted(store):
    pid = store.upsert_package("p")
    assert store.append_metric_points(pid, [("2026-08-10", 5), ("2026-08-03", 3)]) == 2
    assert store.append_metric_points(pid, [("2026-08-10", 999)]) == 0  # no rewrite
    assert store.append_metric_points(pid, [("2026-08-17", 7)]) == 1
    series = json.loads(
        store.scalar("SELECT download_counts FROM download_metrics WHERE package_id = ?", (pid,))
    )
    assert [p["week_start"] for p in series] == ["2026-08-03", "2026-08-10", "2026-08-17"]
    assert [p["counter"] for p in series] == [3, 5, 7]
    # latest point is what the impact threshold reads
    assert store.scalar(
        "SELECT json_extract(download_counts, '$[#-1].counter') FROM download_metrics"
    ) == 7


def test_record_metric_failure(store):
    store.record_metric_failure("gone", "2026-08-17", "no-data")
    row = store.query("SELECT * FROM metric_fetch_failures")[0]
    assert row["package_name"] == "gone" and row["error"] == "no-data"


# --- advisories & dead letters ----------------------------------------------


def test_upsert_advisory_update_in_place(store):
    ranges = [{"type": "SEMVER", "dnf": "<1.2.3"}]
    store.upsert_advisory("GHSA-1", "lib", ranges, severity="HIGH", cwes=["CWE-79"])
    store.upsert_advisory("GHSA-1", "lib", ranges, severity="HIGH", withdrawn=True)
    rows = store.query("SELECT * FROM vulnerabilities")
    assert len(rows) == 1
    assert rows[0]["withdrawn"] == 1
    assert json.loads(rows[0]["affected_ranges"]) == ranges


def test_advisory_split_rows_per_package(store):
    store.upsert_advisory("GHSA-2", "a", [])
    store.upsert_advisory("GHSA-2", "b", [])
    assert store.scalar("SELECT COUNT(*) FROM vulnerabilities") == 2


def test_dead_letter_roundtrip(store):
    store.record_dead_letter("9-z", "bad", {"versions": None}, "versions missing")
    row = store.query("SELECT * FROM dead_letters")[0]
    assert row["seq"] == "9-z"
    assert json.loads(row["raw"]) == {"versions": None}
    assert row["recorded_at"] == 1000.0
