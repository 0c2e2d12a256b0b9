"""Report rendering: delimited output plus matplotlib figures.

Each entry point takes already-computed data, writes a CSV, renders the
matching PNG(s) into the same directory, and returns the paths it wrote.
Figures use the Agg backend so reports work headless.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .blobstore import SizeStats  # noqa: E402

Pathish = Union[str, Path]


def write_csv(path: Pathish, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    return path


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def latency_report(outdir: Pathish, latencies: Sequence[float], summary: dict) -> list[Path]:
    """latency.csv (summary row) + per-job rows, histogram, and CDF with the
    SLA marked."""
    outdir = Path(outdir)
    written = [
        write_csv(
            outdir / "latency_summary.csv",
            ["count", "sla_seconds", "p50", "p99", "fraction_within_sla"],
            [[summary.get(k) for k in ("count", "sla_seconds", "p50", "p99", "fraction_within")]],
        ),
        write_csv(
            outdir / "latency_jobs.csv",
            ["latency_seconds"],
            [[v] for v in latencies],
        ),
    ]
    if latencies:
        sla = summary.get("sla_seconds")
        ordered = sorted(latencies)

        fig, ax = plt.subplots(figsize=(7, 4))
        ax.hist(ordered, bins=min(50, max(5, len(ordered) // 10)), color="#4878cf")
        if sla is not None:
            ax.axvline(sla, color="#d65f5f", linestyle="--", label=f"SLA {sla:g}s")
            ax.legend()
        ax.set_xlabel("publish-to-archive latency (s)")
        ax.set_ylabel("downloads")
        ax.set_title("archive latency distribution")
        written.append(_save(fig, outdir / "latency_hist.png"))

        fig, ax = plt.subplots(figsize=(7, 4))
        frac = [(i + 1) / len(ordered) for i in range(len(ordered))]
        ax.step(ordered, frac, where="post", color="#4878cf")
        if sla is not None:
            ax.axvline(sla, color="#d65f5f", linestyle="--", label=f"SLA {sla:g}s")
            ax.legend()
        ax.set_xlabel("latency (s)")
        ax.set_ylabel("fraction of downloads completed")
        ax.set_ylim(0, 1.02)
        ax.set_title("archive latency CDF")
        written.append(_save(fig, outdir / "latency_cdf.png"))
    return written


def blob_report(outdir: Pathish, sizes: Sequence[int],
                stats: SizeStats) -> list[Path]:
    """Size stats CSV + a histogram and a bytes-retained-vs-threshold curve."""
    outdir = Path(outdir)
    st = stats.to_json()
    written = [
        write_csv(
            outdir / "blob_stats.csv",
            sorted(st),
            [[st[k] for k in sorted(st)]],
        ),
        write_csv(outdir / "blob_sizes.csv", ["size_bytes"], [[s] for s in sizes]),
    ]
    if sizes:
        ordered = sorted(sizes)
        total = sum(ordered)

        fig, ax = plt.subplots(figsize=(7, 4))
        ax.hist(ordered, bins=min(50, max(5, len(ordered) // 10)), color="#6acc65")
        if stats.threshold is not None:
            ax.axvline(stats.threshold, color="#d65f5f", linestyle="--",
                       label=f"threshold {stats.threshold}")
            ax.legend()
        ax.set_xlabel("blob size (bytes)")
        ax.set_ylabel("blobs")
        ax.set_title("archived tarball sizes")
        written.append(_save(fig, outdir / "blob_sizes_hist.png"))

        # For every candidate cutoff: what fraction of blobs / bytes would a
        # keep-only-small policy retain?
        cum_bytes = []
        acc = 0
        for s in ordered:
            acc += s
            cum_bytes.append(acc)
        count_frac = [(i + 1) / len(ordered) for i in range(len(ordered))]
        byte_frac = [b / total for b in cum_bytes] if total else [0.0] * len(ordered)

        fig, ax = plt.subplots(figsize=(7, 4))
        ax.step(ordered, count_frac, where="post", label="blobs retained")
        ax.step(ordered, byte_frac, where="post", label="bytes retained")
        if stats.threshold is not None:
            ax.axvline(stats.threshold, color="#d65f5f", linestyle="--")
        ax.set_xlabel("size threshold (bytes)")
        ax.set_ylabel("fraction retained")
        ax.set_ylim(0, 1.02)
        ax.legend()
        ax.set_title("retention vs. size threshold")
        written.append(_save(fig, outdir / "blob_threshold_curve.png"))
    return written


def updates_report(outdir: Pathish, rows: Sequence[dict]) -> list[Path]:
    """updates.csv + bar chart of update kinds (out-of-order split out)."""
    outdir = Path(outdir)
    written = [
        write_csv(
            outdir / "updates.csv",
            ["package", "from_version", "to_version", "kind", "out_of_order"],
            [
                [r["package"], r.get("from_version") or "", r["to_version"],
                 r["kind"], int(r["out_of_order"])]
                for r in rows
            ],
        )
    ]
    if rows:
        kinds = ["major", "minor", "patch", "prerelease"]
        ordinary = {k: 0 for k in kinds}
        backports = {k: 0 for k in kinds}
        for r in rows:
            bucket = backports if r["out_of_order"] else ordinary
            bucket[r["kind"]] = bucket.get(r["kind"], 0) + 1
        fig, ax = plt.subplots(figsize=(7, 4))
        xs = range(len(kinds))
        ax.bar(xs, [ordinary[k] for k in kinds], label="in order", color="#4878cf")
        ax.bar(xs, [backports[k] for k in kinds],
               bottom=[ordinary[k] for k in kinds],
               label="out of order", color="#d65f5f")
        ax.set_xticks(list(xs))
        ax.set_xticklabels(kinds)
        ax.set_ylabel("updates")
        ax.legend()
        ax.set_title("update kinds")
        written.append(_save(fig, outdir / "update_kinds.png"))
    return written


def impact_report(outdir: Pathish, rows: Sequence[dict],
                  top: int = 15) -> list[Path]:
    """impact.csv + bar chart of most-implicated vulnerable packages."""
    outdir = Path(outdir)
    written = [
        write_csv(
            outdir / "impact.csv",
            ["client_package", "client_version", "vulnerable_package",
             "advisories", "client_blob_key"],
            [
                [r["client_package"], r["client_version"], r["vulnerable_package"],
                 ";".join(r.get("advisories", [])), r.get("client_blob_key") or ""]
                for r in rows
            ],
        )
    ]
    if rows:
        counts: dict[str, int] = {}
        for r in rows:
            counts[r["vulnerable_package"]] = counts.get(r["vulnerable_package"], 0) + 1
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:top]
        fig, ax = plt.subplots(figsize=(7, max(3, 0.4 * len(ranked))))
        names = [name for name, _ in ranked][::-1]
        vals = [c for _, c in ranked][::-1]
        ax.barh(range(len(ranked)), vals, color="#ee854a")
        ax.set_yticks(range(len(ranked)))
        ax.set_yticklabels(names)
        ax.set_xlabel("dependent (package, version) pairs")
        ax.set_title("vulnerable packages by downstream exposure")
        written.append(_save(fig, outdir / "impact_exposure.png"))
    return written
