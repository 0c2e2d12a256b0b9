"""The built-in analysis library: dependency-edge materialization,
historical constraint resolution, update computation, transitive closure,
vulnerable-version identification, and the vulnerability-impact candidate
pipeline.

Each materialization rebuilds one table in the attached
``metadata_analysis`` schema from scratch, so reruns on unchanged data are
deterministic. Superseded version generations are excluded everywhere: the
current generation is a version's live truth, older generations are
retained history. Deleted versions stay in: the archive analyses what
existed, not just what survives.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

from . import semver
from .blobstore import blob_key
from .errors import MalformedRange, MalformedVersion
from .store import MetadataStore


def materialize_direct_runtime_deps(store: MetadataStore) -> dict:
    """One row per (client version, dependency package) runtime edge whose
    target name is a known package; dev/peer/optional edges excluded."""
    with store.transaction():
        store.execute("DELETE FROM metadata_analysis.version_direct_runtime_deps")
        store.execute(
            "INSERT INTO metadata_analysis.version_direct_runtime_deps (v, depends_on_pkg) "
            "SELECT DISTINCT d.version_id, dp.id "
            "FROM dependencies d "
            "JOIN versions cv ON cv.id = d.version_id AND cv.superseded = 0 "
            "JOIN packages dp ON dp.name = d.depends_on_name "
            "WHERE d.kind = 'runtime'"
        )
        edges = store.scalar(
            "SELECT COUNT(*) FROM metadata_analysis.version_direct_runtime_deps"
        )
    skipped = [
        r["depends_on_name"] for r in store.query(
            "SELECT DISTINCT d.depends_on_name FROM dependencies d "
            "JOIN versions cv ON cv.id = d.version_id AND cv.superseded = 0 "
            "WHERE d.kind = 'runtime' AND NOT EXISTS "
            "(SELECT 1 FROM packages p WHERE p.name = d.depends_on_name) "
            "ORDER BY d.depends_on_name"
        )
    ]
    return {"edges": edges, "skipped_names": skipped}


def _candidate_versions(store: MetadataStore, package_id: int) -> list[dict]:
    rows = store.query(
        "SELECT id, version, published_at, deleted, deleted_at FROM versions "
        "WHERE package_id = ? AND superseded = 0",
        (package_id,),
    )
    out = []
    for r in rows:
        try:
            parsed = semver.parse_version(r["version"])
        except MalformedVersion:
            continue
        out.append(
            {
                "id": r["id"],
                "version": parsed,
                "published_at": r["published_at"],
                "deleted": bool(r["deleted"]),
                "deleted_at": r["deleted_at"],
            }
        )
    return out


def resolve_edges(store: MetadataStore, as_of_policy: str = "client_publish") -> dict:
    """Resolve every materialized runtime edge with max_satisfying.

    Policy "client_publish" (default) picks among dependency versions that
    existed — published, and not yet deleted — at the client's publish time:
    what a resolver would have chosen historically. Policy "latest" resolves
    against currently-live versions instead.
    """
    if as_of_policy not in ("client_publish", "latest"):
        raise ValueError(f"unknown as_of_policy {as_of_policy!r}")
    edges = store.query(
        "SELECT e.v, e.depends_on_pkg, cv.published_at AS client_published_at, "
        '       d."constraint" AS dnf '
        "FROM metadata_analysis.version_direct_runtime_deps e "
        "JOIN versions cv ON cv.id = e.v "
        "JOIN packages dp ON dp.id = e.depends_on_pkg "
        "JOIN dependencies d ON d.version_id = e.v AND d.depends_on_name = dp.name "
        "                   AND d.kind = 'runtime' "
        "ORDER BY e.v, e.depends_on_pkg"
    )
    candidates_cache: dict[int, list[dict]] = {}
    resolved_rows = []
    unresolved = 0
    now = store.clock.now()
    for edge in edges:
        as_of = edge["client_published_at"] if as_of_policy == "client_publish" else now
        constraint = None
        if edge["dnf"] is not None:
            try:
                constraint = semver.parse_constraint(edge["dnf"])
            except MalformedRange:
                constraint = None
        resolved_id = None
        if constraint is not None:
            pool = candidates_cache.setdefault(
                edge["depends_on_pkg"],
                _candidate_versions(store, edge["depends_on_pkg"]),
            )
            if as_of_policy == "client_publish":
                eligible = [
                    c for c in pool
                    if c["published_at"] <= as_of
                    and (c["deleted_at"] is None or c["deleted_at"] > as_of)
                ]
            else:
                eligible = [c for c in pool if not c["deleted"]]
            best = semver.max_satisfying([c["version"] for c in eligible], constraint)
            if best is not None:
                resolved_id = max(
                    c["id"] for c in eligible if c["version"] == best
                )
        else:
            unresolved += 1
        resolved_rows.append(
            (edge["v"], edge["depends_on_pkg"], resolved_id,
             edge["dnf"] if edge["dnf"] is not None else "", as_of)
        )
        if constraint is not None and resolved_id is None:
            unresolved += 1
    with store.transaction():
        store.execute("DELETE FROM metadata_analysis.resolved_edges")
        for row in resolved_rows:
            store.execute(
                "INSERT INTO metadata_analysis.resolved_edges "
                '(v, depends_on_pkg, resolved_version_id, "constraint", resolved_as_of) '
                "VALUES (?, ?, ?, ?, ?)",
                row,
            )
    return {"edges": len(resolved_rows), "unresolved": unresolved}


def compute_updates(store: MetadataStore) -> dict:
    """For each version v published at time t, the update it represents:
    from the semver-greatest non-prerelease version published strictly
    before t that is semver-less than v. kind is the highest changed core
    component; prerelease endpoints get kind='prerelease'. out_of_order
    flags backports — some semver-greater non-prerelease version already
    existed when v was published."""
    package_ids = [r["id"] for r in store.query("SELECT id FROM packages ORDER BY id")]
    records = []
    for pid in package_ids:
        releases = _candidate_versions(store, pid)
        releases.sort(key=lambda c: (c["published_at"], c["version"]))
        for current in releases:
            v = current["version"]
            t = current["published_at"]
            prior = [
                c for c in releases
                if c["published_at"] < t and not c["version"].prerelease
            ]
            less = [c for c in prior if semver.compare(c["version"], v) < 0]
            if not less:
                continue
            best = max(less, key=lambda c: c["version"])
            out_of_order = any(
                semver.compare(c["version"], v) > 0 for c in prior
            )
            records.append(
                (pid, best["id"], current["id"], _update_kind(best["version"], v),
                 int(out_of_order))
            )
    with store.transaction():
        store.execute("DELETE FROM metadata_analysis.updates")
        for rec in records:
            store.execute(
                "INSERT INTO metadata_analysis.updates "
                "(package_id, from_version_id, to_version_id, kind, out_of_order) "
                "VALUES (?, ?, ?, ?, ?)",
                rec,
            )
    return {
        "updates": len(records),
        "out_of_order": sum(r[4] for r in records),
    }


def _update_kind(from_v: semver.Version, to_v: semver.Version) -> str:
    if to_v.prerelease:
        return "prerelease"
    if to_v.major != from_v.major:
        return "major"
    if to_v.minor != from_v.minor:
        return "minor"
    return "patch"


def transitive_graph(store: MetadataStore, roots: list[int]) -> dict:
    """Breadth-first closure from root version ids over resolved runtime
    edges. Cycles are fine; every node expands once."""
    adjacency: dict[int, list[tuple[int, int]]] = {}
    for r in store.query(
        "SELECT v, depends_on_pkg, resolved_version_id "
        "FROM metadata_analysis.resolved_edges WHERE resolved_version_id IS NOT NULL"
    ):
        adjacency.setdefault(r["v"], []).append(
            (r["resolved_version_id"], r["depends_on_pkg"])
        )
    nodes: set[int] = set()
    edges: list[tuple[int, int, int]] = []
    frontier = list(dict.fromkeys(roots))
    nodes.update(frontier)
    while frontier:
        nxt = []
        for node in frontier:
            for target, dep_pkg in adjacency.get(node, ()):
                edges.append((node, target, dep_pkg))
                if target not in nodes:
                    nodes.add(target)
                    nxt.append(target)
        frontier = nxt
    return {"nodes": sorted(nodes), "edges": sorted(edges)}


def vulnerable_versions(store: MetadataStore) -> dict:
    """(version, advisory) pairs where the version satisfies any affected
    range. Withdrawn advisories contribute nothing; ranges without a parsed
    DNF and advisories for unknown packages are skipped but reported."""
    advisories = store.query(
        "SELECT advisory_id, package_name, affected_ranges FROM vulnerabilities "
        "WHERE withdrawn = 0 ORDER BY advisory_id, package_name"
    )
    pairs: set[tuple[int, str]] = set()
    skipped_packages: list[str] = []
    skipped_ranges = 0
    for adv in advisories:
        pid = store.scalar(
            "SELECT id FROM packages WHERE name = ?", (adv["package_name"],)
        )
        if pid is None:
            skipped_packages.append(f"{adv['advisory_id']}:{adv['package_name']}")
            continue
        constraints = []
        for entry in json.loads(adv["affected_ranges"]):
            if entry.get("dnf") is None:
                skipped_ranges += 1
                continue
            try:
                constraints.append(semver.parse_constraint(entry["dnf"]))
            except MalformedRange:
                skipped_ranges += 1
        if not constraints:
            continue
        for candidate in _candidate_versions(store, pid):
            if any(semver.satisfies(candidate["version"], c) for c in constraints):
                pairs.add((candidate["id"], adv["advisory_id"]))
    with store.transaction():
        store.execute("DELETE FROM metadata_analysis.vulnerable_versions")
        for version_id, advisory_id in sorted(pairs):
            store.execute(
                "INSERT INTO metadata_analysis.vulnerable_versions "
                "(version_id, advisory_id) VALUES (?, ?)",
                (version_id, advisory_id),
            )
    return {
        "rows": len(pairs),
        "skipped_packages": skipped_packages,
        "skipped_ranges": skipped_ranges,
    }


@dataclass
class ImpactCandidate:
    client_version_id: int
    client_name: str
    client_version: str
    vulnerable_package_id: int
    vulnerable_name: str
    blob_key: Optional[str]


def impact_candidates(store: MetadataStore, min_weekly_downloads: int = 0,
                      require_test_script: bool = False) -> list[ImpactCandidate]:
    """Candidate (client version, vulnerable package) pairs: packages named
    by a live advisory, optionally gated on the latest weekly download count,
    joined to their direct runtime dependents, optionally only clients that
    declare a test script. Affected-version precision is deliberately not
    applied here — any advisory on the package qualifies it; see
    vulnerable_versions for the version-precise view.

    Results are materialized with each client's blob key so the matching
    tarballs can be pulled from the archive afterwards, whether or not the
    upstream URL still resolves.
    """
    sql = (
        "SELECT DISTINCT client.id AS client_version_id, "
        "       cp.name AS client_name, client.version AS client_version, "
        "       client.tarball_url AS client_tarball_url, "
        "       vuln_p.id AS vulnerable_package_id, vuln_p.name AS vulnerable_name "
        "FROM packages vuln_p "
        "JOIN vulnerabilities vuln ON vuln_p.name = vuln.package_name "
        "                          AND vuln.withdrawn = 0 "
    )
    params: list = []
    if min_weekly_downloads > 0:
        sql += (
            "JOIN download_metrics metrics ON metrics.package_id = vuln_p.id "
            "AND json_extract(metrics.download_counts, '$[#-1].counter') > ? "
        )
        params.append(min_weekly_downloads)
    sql += (
        "JOIN metadata_analysis.version_direct_runtime_deps edge "
        "  ON edge.depends_on_pkg = vuln_p.id "
        "JOIN versions client ON client.id = edge.v "
        "JOIN packages cp ON cp.id = client.package_id "
    )
    if require_test_script:
        sql += "WHERE json_extract(client.extra_metadata, '$.scripts.test') IS NOT NULL "
    sql += "ORDER BY client.id, vuln_p.id"
    rows = store.query(sql, params)
    out = []
    for r in rows:
        key = None
        if r["client_tarball_url"]:
            key = blob_key(
                r["client_name"], r["client_version"], r["client_tarball_url"]
            )
        out.append(
            ImpactCandidate(
                client_version_id=r["client_version_id"],
                client_name=r["client_name"],
                client_version=r["client_version"],
                vulnerable_package_id=r["vulnerable_package_id"],
                vulnerable_name=r["vulnerable_name"],
                blob_key=key,
            )
        )
    with store.transaction():
        store.execute("DELETE FROM metadata_analysis.impact_candidates")
        for c in out:
            store.execute(
                "INSERT INTO metadata_analysis.impact_candidates "
                "(client_version_id, vulnerable_package_id, client_blob_key) "
                "VALUES (?, ?, ?)",
                (c.client_version_id, c.vulnerable_package_id, c.blob_key),
            )
    return out
