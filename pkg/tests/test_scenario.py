import dataclasses

import pytest

from kvrm.config import ScenarioConfig
from kvrm.errors import InvariantViolation
from kvrm.far_view import FarViewConfig
from kvrm.pager import PagerConfig
from kvrm.scenario import Scenario, load_events, run_scenario
from kvrm.transport import TransportConfig
from kvrm.workload import WorkloadSpec


def cfg(**kw):
    base = ScenarioConfig(pager=PagerConfig(arena_pages=4096, store_payload=False),
                          workload=WorkloadSpec(concurrency=8, n_requests=2000),
                          steps=300, warmup=20, audit_every=25)
    return base.with_(**kw)


@pytest.fixture(scope="module")
def events():
    return load_events(cfg())


def test_one_commit_per_session_per_step(events):
    res = run_scenario(cfg(), events)
    assert all(r.commits_this_step == r.active_sessions for r in res.records)
    a = res.audit
    assert a["multi_commit_steps"] == 0 and a["shape_violations"] == 0
    assert a["commits"] == sum(r.commits_this_step for r in res.records)
    assert a["full_audits"] > 0


def test_merge_changes_trains_not_bytes(events):
    on = run_scenario(cfg(regime="strong"), events)
    off = run_scenario(cfg(regime="strong", transport=TransportConfig(merge=False)), events)
    assert [r.total_dma_bytes for r in on.records] == [r.total_dma_bytes for r in off.records]
    assert sum(r.trains_issued for r in on.records) < sum(r.trains_issued for r in off.records)


def test_far_view_keeps_commit_count_and_width(events):
    fv = FarViewConfig(enabled=True, W_star=256, cap=16, sv_chunk=64)
    with_fv = run_scenario(cfg(far_view=fv), events)
    no_fv = run_scenario(cfg(far_view=dataclasses.replace(fv, enabled=False)), events)
    assert ([r.commits_this_step for r in with_fv.records]
            == [r.commits_this_step for r in no_fv.records])
    assert {r.visible_width for r in with_fv.records} == {272}
    assert sum(r.far_trains for r in with_fv.records) > 0


def test_reserved_tracks_active_after_burst(events):
    c = cfg(burst_step=150)
    res = run_scenario(c, events)
    before, after = res.records[149], res.records[150]
    assert after.reserved_bytes < before.reserved_bytes
    survivors = after.active_sessions - after.eos_sessions
    assert after.reserved_bytes <= after.active_bytes + survivors * c.pager.page_bytes


def test_static_baseline_reserved_is_flat(events):
    res = run_scenario(cfg(static_arena=True, burst_step=150), events)
    assert len({r.reserved_bytes for r in res.records}) == 1


def test_determinism(events):
    a = run_scenario(cfg(regime="adversarial-random"), events)
    b = run_scenario(cfg(regime="adversarial-random"), events)
    assert [r.to_json() for r in a.records] == [r.to_json() for r in b.records]


def test_steps_are_resumable_step_by_step(events):
    sc = Scenario(cfg(), events)
    recs = [sc.step(t) for t in range(50)]
    assert [r.step for r in recs] == list(range(50))
    sc.pager.check_invariants()


def test_arena_exhaustion_is_invariant_violation(events):
    with pytest.raises(InvariantViolation):
        run_scenario(cfg(pager=PagerConfig(arena_pages=16, store_payload=False)), events)
