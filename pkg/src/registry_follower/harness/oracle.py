"""Independent oracle: computes the expected end state of a scenario by
direct interpretation of the script. Deliberately shares no code with the
pipeline under test — blob keys, latencies, metric series, and the
impact-candidate set are all re-derived here from first principles (only
the scenario accessors themselves are reused). Comparing a pipeline run
against this is the harness's end-to-end check.

Scope notes: advisory range matching here is at package granularity (the
impact pipeline's own rule); range-precise vulnerable-version checks live
in the analysis tests with their own brute-force evaluator. Latencies are
exact only for scenarios that script delays rather than raw fault lists,
since retry backoff is a pipeline policy, not a scripted fact.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

from .scenario import Scenario, tarball_bytes


def _expected_blob_key(package: str, version: str, url: str) -> str:
    # Independent re-derivation (same published contract as the store).
    return f"{package}@{version}#{hashlib.sha256(url.encode('utf-8')).hexdigest()[:12]}"


@dataclass
class ExpectedVersion:
    version: str
    manifest: dict
    published_at: float
    deleted: bool = False
    generations: int = 1
    tarball: dict | None = None
    delay: float = 0.0
    gone_at: float | None = None


@dataclass
class ExpectedPackage:
    name: str
    deleted: bool = False
    versions: dict[str, ExpectedVersion] = field(default_factory=dict)


@dataclass
class ExpectedState:
    packages: dict[str, ExpectedPackage] = field(default_factory=dict)
    version_rows: int = 0
    deleted_version_rows: int = 0
    blobs: dict[str, bytes] = field(default_factory=dict)  # key -> bytes
    missing: set[str] = field(default_factory=set)  # keys whose URL 404s pre-archive
    latencies: dict[str, float] = field(default_factory=dict)  # key -> seconds
    advisories: dict[tuple[str, str], bool] = field(default_factory=dict)
    # (advisory_id, package) -> withdrawn
    metric_series: dict[str, list[tuple[str, int]]] = field(default_factory=dict)

    def fraction_within(self, sla_seconds: float) -> float | None:
        if not self.latencies:
            return None
        within = sum(1 for l in self.latencies.values() if l <= sla_seconds)
        return within / len(self.latencies)


def expected_state(scenario: Scenario, base_url: str = "",
                   sweep_time: float | None = None) -> ExpectedState:
    """Interpret the script event by event.

    base_url must match the mock's so tarball URLs (and the keys hashed
    from them) line up. sweep_time, when given, selects which scripted week
    a single metrics sweep at that time should have appended.
    """
    st = ExpectedState()
    for e in scenario.events:
        action = e["action"]
        if action == "publish":
            pkg = st.packages.setdefault(e["package"], ExpectedPackage(e["package"]))
            pkg.deleted = False
            existing = pkg.versions.get(e["version"])
            manifest = dict(e.get("manifest") or {})
            manifest["version"] = e["version"]
            if existing is None:
                st.version_rows += 1
                pkg.versions[e["version"]] = ExpectedVersion(
                    version=e["version"],
                    manifest=manifest,
                    published_at=e["at"],
                    tarball=e.get("tarball"),
                    delay=float(e.get("delay", 0)),
                    gone_at=e.get("tarball_gone_at"),
                )
            else:
                if existing.deleted:
                    existing.deleted = False
                if existing.manifest != manifest or existing.tarball != e.get("tarball"):
                    # republish: one more retained row (old one superseded)
                    st.version_rows += 1
                    existing.generations += 1
                    existing.manifest = manifest
            current = pkg.versions[e["version"]]
            if current.tarball is not None:
                url = (
                    f"{base_url}/tarballs/{e['package']}/-/"
                    f"{e['package']}-{e['version']}.tgz"
                )
                key = _expected_blob_key(e["package"], e["version"], url)
                download_time = e["at"] + current.delay
                if current.gone_at is not None and current.gone_at <= download_time:
                    st.missing.add(key)
                elif key not in st.blobs:
                    st.blobs[key] = tarball_bytes(current.tarball)
                    st.latencies[key] = current.delay
        elif action == "delete_version":
            pkg = st.packages.get(e["package"])
            if pkg and e["version"] in pkg.versions:
                pkg.versions[e["version"]].deleted = True
        elif action == "delete_package":
            pkg = st.packages.get(e["package"])
            if pkg:
                pkg.deleted = True
                for v in pkg.versions.values():
                    v.deleted = True
        elif action == "advisory":
            doc = e["doc"]
            for affected in doc.get("affected", []):
                name = (affected.get("package") or {}).get("name")
                if name:
                    st.advisories[(doc["id"], name)] = bool(doc.get("withdrawn"))
        elif action == "advisory_withdraw":
            for (aid, name), _ in list(st.advisories.items()):
                if aid == e["id"]:
                    st.advisories[(aid, name)] = True

    st.deleted_version_rows = sum(
        1 for p in st.packages.values() for v in p.versions.values() if v.deleted
    )
    if sweep_time is not None:
        week = None
        for e in scenario.events:
            if e["action"] == "metrics_week" and e["at"] <= sweep_time:
                week = e
        if week is not None:
            for name, pkg in st.packages.items():
                if pkg.deleted:
                    continue
                if name in week["downloads"]:
                    st.metric_series[name] = [
                        (week["week_start"], int(week["downloads"][name]))
                    ]
    return st


def expected_impact_pairs(scenario: Scenario, min_weekly_downloads: int = 0,
                          require_test_script: bool = False,
                          as_of: float | None = None) -> set[tuple[str, str, str]]:
    """(client package, client version, vulnerable package) triples per the
    canned impact pipeline's rules, recomputed directly from manifests:
    advisory names the package (version ranges deliberately ignored), its
    latest scripted weekly downloads beat the threshold, and the client
    declares it under runtime dependencies (plus the optional test-script
    gate)."""
    if as_of is None:
        as_of = scenario.end_time()
    st = expected_state(scenario)
    vulnerable = {
        name for (aid, name), withdrawn in st.advisories.items() if not withdrawn
    }
    if min_weekly_downloads > 0:
        week = None
        for e in scenario.events:
            if e["action"] == "metrics_week" and e["at"] <= as_of:
                week = e
        downloads = week["downloads"] if week else {}
        vulnerable = {
            name for name in vulnerable
            if int(downloads.get(name, 0)) > min_weekly_downloads
        }
    # only packages the follower has actually seen can join
    vulnerable &= set(st.packages)

    pairs: set[tuple[str, str, str]] = set()
    for pkg in st.packages.values():
        for v in pkg.versions.values():
            deps = v.manifest.get("dependencies") or {}
            if require_test_script:
                scripts = v.manifest.get("scripts") or {}
                if scripts.get("test") is None:
                    continue
            for dep_name in deps:
                if dep_name in vulnerable:
                    pairs.add((pkg.name, v.version, dep_name))
    return pairs
