"""Run reports from StepRecord streams: percentiles, throughput, transport and memory audits."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

from .errors import EmptyRun, WorkloadMismatch

ATTRIBUTION_ROWS = ("baseline", "+pager", "+pager+merge", "+far-view")

TIMESERIES_FIELDS = ("step", "clock", "trains_issued", "total_dma_bytes", "step_latency",
                     "reserved_bytes", "active_bytes", "active_sessions", "eos_sessions")


def nearest_rank(values, q: float) -> float:
    """Nearest-rank percentile: the (floor(q * n) + 1)-th smallest value, capped at n.

    With this rank a single outlier among 1000 samples is the p99.9.
    """
    s = sorted(values)
    if not s:
        raise EmptyRun("no values")
    k = min(len(s), math.floor(q * len(s)) + 1)
    return s[k - 1]


@dataclass
class RunReport:
    label: str
    workload_hash: str
    steps: int
    throughput: float  # tokens per simulated second
    p50: float
    p99: float
    p999: float
    submit_share: float
    mean_trains: float
    mean_train_bytes: float
    mean_descriptors: float
    total_dma_bytes: int
    mean_reserved_bytes: float
    mean_active_bytes: float
    reserved_over_active: float
    audit: dict = field(default_factory=dict)
    timeseries: dict = field(default_factory=dict)

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("timeseries")
        return d


def aggregate(records, warmup_cutoff: int = 0, label: str = "run", workload_hash: str = "",
              audit: dict | None = None) -> RunReport:
    post = [r for r in records if r.step >= warmup_cutoff]
    if not post:
        raise EmptyRun(f"no records at or after step {warmup_cutoff}")
    lat = [r.step_latency for r in post]
    total_time = sum(lat)
    tokens = sum(r.tokens_emitted for r in post)
    control = sum(r.submit_time + r.commit_time for r in post)
    trains = sum(r.trains_issued for r in post)
    nbytes = sum(r.total_dma_bytes for r in post)
    reserved = sum(r.reserved_bytes for r in post) / len(post)
    active = sum(r.active_bytes for r in post) / len(post)
    ts = {f: [getattr(r, f) for r in post] for f in TIMESERIES_FIELDS}
    return RunReport(
        label=label,
        workload_hash=workload_hash,
        steps=len(post),
        throughput=tokens / (total_time * 1e-6) if total_time else 0.0,
        p50=nearest_rank(lat, 0.50),
        p99=nearest_rank(lat, 0.99),
        p999=nearest_rank(lat, 0.999),
        submit_share=control / total_time if total_time else 0.0,
        mean_trains=trains / len(post),
        mean_train_bytes=nbytes / trains if trains else 0.0,
        mean_descriptors=sum(r.descriptors for r in post) / len(post),
        total_dma_bytes=nbytes,
        mean_reserved_bytes=reserved,
        mean_active_bytes=active,
        reserved_over_active=reserved / active if active else math.inf,
        audit=dict(audit or {}),
        timeseries=ts,
    )


COMPARED = ("throughput", "p50", "p99", "p999", "submit_share", "mean_trains",
            "mean_train_bytes", "mean_reserved_bytes", "mean_active_bytes", "reserved_over_active")


def compare(a: RunReport, b: RunReport) -> dict:
    """Per-metric ratio a/b and difference a-b; both runs must share a workload."""
    if a.workload_hash != b.workload_hash:
        raise WorkloadMismatch(f"{a.label} ran {a.workload_hash}, {b.label} ran {b.workload_hash}")
    out = {}
    for k in COMPARED:
        x, y = getattr(a, k), getattr(b, k)
        if x == y:
            ratio = 1.0
        elif y:
            ratio = x / y
        else:
            ratio = math.inf
        out[k] = {"a": x, "b": y, "ratio": ratio, "diff": x - y}
    return {"a": a.label, "b": b.label, "workload_hash": a.workload_hash, "metrics": out}


def attribution_table(reports: list[RunReport]) -> list[dict]:
    """Four cumulative rows, each compared against the baseline row."""
    if len(reports) != len(ATTRIBUTION_ROWS):
        raise ValueError(f"expected {len(ATTRIBUTION_ROWS)} reports, got {len(reports)}")
    base = reports[0]
    rows = []
    for name, rep in zip(ATTRIBUTION_ROWS, reports):
        cmp = compare(rep, base)["metrics"]
        rows.append({
            "config": name,
            "trains_per_step": rep.mean_trains,
            "mean_train_kib": rep.mean_train_bytes / 1024,
            "p99": rep.p99,
            "submit_share": rep.submit_share,
            "reserved_over_active": rep.reserved_over_active,
            "throughput_vs_baseline": cmp["throughput"]["ratio"],
        })
    return rows


# -- output ------------------------------------------------------------------
def _finite(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_finite(v) for v in obj]
    return obj


def write_report(report: RunReport, path) -> None:
    with open(path, "w") as fh:
        json.dump(_finite(report.summary()), fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_reports(reports, path) -> None:
    with open(path, "w") as fh:
        json.dump([_finite(r.summary()) for r in reports], fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_timeseries(report: RunReport, path) -> None:
    ts = report.timeseries
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TIMESERIES_FIELDS)
        for row in zip(*(ts[f] for f in TIMESERIES_FIELDS)):
            w.writerow(row)


def format_table(rows: list[dict], columns=None) -> str:
    """Aligned plain-text table."""
    if not rows:
        return ""
    columns = columns or list(rows[0])

    def cell(v):
        if isinstance(v, float):
            return f"{v:.4g}" if abs(v) < 1e4 else f"{v:.0f}"
        return str(v)

    body = [[cell(r.get(c, "")) for c in columns] for r in rows]
    widths = [max(len(c), *(len(b[i]) for b in body)) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths)),
             "  ".join("-" * w for w in widths)]
    lines += ["  ".join(v.rjust(w) for v, w in zip(b, widths)) for b in body]
    return "\n".join(lines)


def report_row(rep: RunReport) -> dict:
    return {
        "label": rep.label,
        "trains/step": rep.mean_trains,
        "mean_train_KiB": rep.mean_train_bytes / 1024,
        "p50": rep.p50,
        "p99": rep.p99,
        "p99.9": rep.p999,
        "submit_share": rep.submit_share,
        "tok/s": rep.throughput,
        "reserved/active": rep.reserved_over_active,
    }
