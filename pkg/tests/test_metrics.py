import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kvrm.errors import EmptyRun, WorkloadMismatch
from kvrm.metrics import (
    ATTRIBUTION_ROWS,
    aggregate,
    attribution_table,
    compare,
    format_table,
    nearest_rank,
    write_report,
    write_timeseries,
)
from kvrm.sim import StepRecord


def recs(latencies, **kw):
    return [StepRecord(step=i, step_latency=float(x), tokens_emitted=4, submit_time=0.5,
                       commit_time=0.25, trains_issued=2, total_dma_bytes=8192, **kw)
            for i, x in enumerate(latencies)]


def test_equal_latencies():
    r = aggregate(recs([7.0] * 50))
    assert r.p50 == r.p99 == r.p999 == 7.0


def test_outlier_in_tail_only():
    lat = [1.0] * 999 + [10.0]
    r = aggregate(recs(lat))
    assert r.p999 == 10.0 and r.p50 == 1.0 and r.p99 == 1.0


def test_warmup_excluded_and_empty_run():
    r = aggregate(recs([100.0] * 10 + [1.0] * 10), warmup_cutoff=10)
    assert r.steps == 10 and r.p99 == 1.0
    with pytest.raises(EmptyRun):
        aggregate(recs([1.0] * 5), warmup_cutoff=5)


def test_derived_fields():
    r = aggregate(recs([10.0] * 4))
    assert r.submit_share == pytest.approx(0.075)
    assert r.mean_trains == 2 and r.mean_train_bytes == 4096
    assert r.throughput == pytest.approx(4 / 10e-6)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(1.0, 1e4, allow_nan=False), min_size=1, max_size=300))
def test_percentiles_match_sort_oracle(lat):
    s = sorted(lat)
    r = aggregate(recs(lat))
    for q, got in ((0.5, r.p50), (0.99, r.p99), (0.999, r.p999)):
        assert got == s[min(len(s), math.floor(q * len(s)) + 1) - 1]
    assert r.p50 <= r.p99 <= r.p999
    assert 0 <= r.submit_share <= 1


def test_nearest_rank_empty():
    with pytest.raises(EmptyRun):
        nearest_rank([], 0.5)


def test_compare_identical_and_mismatch():
    a = aggregate(recs([3.0, 4.0]), workload_hash="h")
    c = compare(a, a)
    assert all(m["ratio"] == 1.0 for m in c["metrics"].values())
    b = aggregate(recs([3.0, 4.0]), workload_hash="other")
    with pytest.raises(WorkloadMismatch):
        compare(a, b)


def test_attribution_rows_in_order():
    reps = [aggregate(recs([2.0]), label=n, workload_hash="h") for n in ATTRIBUTION_ROWS]
    rows = attribution_table(reps)
    assert [r["config"] for r in rows] == ["baseline", "+pager", "+pager+merge", "+far-view"]
    with pytest.raises(ValueError):
        attribution_table(reps[:3])
    assert format_table(rows).count("\n") == 5


def test_report_files_deterministic(tmp_path):
    rng = np.random.default_rng(0)
    r = aggregate(recs(rng.uniform(1, 2, 30)))
    write_report(r, tmp_path / "a.json")
    write_report(r, tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    write_timeseries(r, tmp_path / "t.csv")
    assert len((tmp_path / "t.csv").read_text().splitlines()) == 31
