import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kvrm.errors import (
    AliasOverlap,
    FutureDelta,
    OutOfPages,
    PrefixOutOfRange,
    SessionRetired,
    UnknownSession,
    UnmappedRange,
)
from kvrm.pager import BlockState, FrameDelta, KVPager, PagerConfig
from oracles import TINY, FlatTapes, ListAllocator, OwnershipMap, random_pager_program

# 16 tokens per page: 2 * 1 layer * 4 dims * 2 bytes = 16 B per token, 256 B pages
P16 = PagerConfig(page_bytes=256, arena_pages=64, layers=1, kv_head_dim=4, elem_bytes=2)


def rows(n, start=0, cfg=P16):
    base = np.arange(start, start + n, dtype=np.float64)
    out = np.broadcast_to(base[:, None, None, None], (n, 2, cfg.layers, cfg.kv_head_dim))
    return out.astype(cfg.dtype)


def session_with(pager, sid, n):
    pager.open_session(sid)
    pager.reserve(sid, n)
    pager.write_tokens(sid, 0, rows(n, 1000 * (sid if isinstance(sid, int) else 7)))
    pager.frame_commit(sid)


# -- config ------------------------------------------------------------------
def test_tokens_per_page_derivation():
    assert P16.tokens_per_page == 16
    assert PagerConfig(page_bytes=16384, layers=2, kv_head_dim=64, elem_bytes=2).tokens_per_page == 32


@pytest.mark.parametrize("kw", [dict(page_bytes=300), dict(page_bytes=8, layers=1, kv_head_dim=4)])
def test_config_rejects_bad_page(kw):
    with pytest.raises(ValueError):
        PagerConfig(**kw)


# -- reserve -----------------------------------------------------------------
def test_reserve_zero_is_empty():
    p = KVPager(P16)
    p.open_session("s1")
    assert p.reserve("s1", 0) == []
    assert p.stats().free_pages == 64


def test_reserve_ceiling():
    p = KVPager(P16)
    p.open_session("s1")
    got = p.reserve("s1", 17)
    assert len(got) == 2
    assert sum(c for _, c in got) == 32
    assert all(p.block_state(b) is BlockState.LIVE for b, _ in got)


def test_reserve_more_than_arena_fails_without_partial_allocation():
    p = KVPager(P16)
    p.open_session("s1")
    with pytest.raises(OutOfPages):
        p.reserve("s1", 65 * 16)
    assert p.stats().free_pages == 64
    p.reserve("s1", 60 * 16)
    with pytest.raises(OutOfPages):
        p.reserve("s1", 5 * 16)
    assert p.stats().free_pages == 4


def test_reserve_on_retired_session():
    p = KVPager(P16)
    session_with(p, "s", 4)
    p.trim("s", eos=True)
    with pytest.raises(SessionRetired):
        p.reserve("s", 1)


def test_unknown_session():
    with pytest.raises(UnknownSession):
        KVPager(P16).active_view("nope")


def test_reserve_trim_matches_list_allocator():
    rng = np.random.default_rng(7)
    cfg = PagerConfig(page_bytes=256, arena_pages=128, layers=1, kv_head_dim=4, elem_bytes=2,
                      store_payload=False)
    p = KVPager(cfg)
    ref = ListAllocator(cfg.arena_pages)
    sids = list(range(8))
    for s in sids:
        p.open_session(s)
    for _ in range(10_000):
        s = int(rng.integers(len(sids)))
        if rng.random() < 0.55:
            n = int(rng.integers(0, 5 * 16))
            pages = -(-n // 16)
            ok = ref.reserve(s, pages)
            if ok:
                p.reserve(s, n)
            else:
                with pytest.raises(OutOfPages):
                    p.reserve(s, n)
        else:
            mapped = sorted(q for q in p.shadow_pages(s))
            k = int(rng.integers(0, len(mapped) + 1))
            victims = mapped[len(mapped) - k:]
            p.trim_pages(s, victims)
            ref.trim_last(s, k)
        p.frame_commit(s)
    assert p.stats().free_pages == ref.free_count
    got = {s: len(p.active_pages(s)) for s in sids if p.active_pages(s)}
    assert got == ref.sizes()
    live = {b for s in sids for b in p.active_pages(s).values()}
    assert live == {b for b, rc in enumerate(p.refcount) if rc > 0}
    p.check_invariants()


# -- alias -------------------------------------------------------------------
def test_alias_empty_prefix():
    p = KVPager(P16)
    session_with(p, 1, 48)
    p.open_session(2)
    assert p.alias(2, 1, 0) == 0
    assert all(rc <= 1 for rc in p.refcount)


def test_alias_exact_block_boundary():
    p = KVPager(P16)
    session_with(p, 1, 48)
    p.open_session(2)
    assert p.alias(2, 1, 32) == 2
    blocks = [p.active_pages(1)[q] for q in (0, 1)]
    assert [p.refcount[b] for b in blocks] == [2, 2]
    assert all(p.block_state(b) is BlockState.SHARED for b in blocks)
    assert p.refcount[p.active_pages(1)[2]] == 1


def test_alias_partial_block_then_cow_of_exactly_that_block():
    p = KVPager(P16)
    session_with(p, 1, 48)
    p.open_session(2)
    assert p.alias(2, 1, 40) == 3
    p.frame_commit(2)
    before = dict(p.active_pages(2))
    p.write_tokens(2, 40, rows(2, 9000))
    after = p.shadow_pages(2)
    changed = [q for q in before if before[q] != after[q]]
    assert changed == [2]
    p.frame_commit(2)
    # the old block is released from the writer's view at the commit
    assert p.refcount[before[2]] == 1
    assert p.refcount[after[2]] == 1
    # the owner of the original block still reads its own bytes
    np.testing.assert_array_equal(p.gather(1, 32, 48), rows(48, 1000)[32:48])
    np.testing.assert_array_equal(p.gather(2, 40, 42), rows(2, 9000))
    np.testing.assert_array_equal(p.gather(2, 0, 40), rows(48, 1000)[:40])


def test_alias_errors():
    p = KVPager(P16)
    session_with(p, 1, 20)
    p.open_session(2)
    with pytest.raises(PrefixOutOfRange):
        p.alias(2, 1, 21)
    p.reserve(2, 1)
    with pytest.raises(AliasOverlap):
        p.alias(2, 1, 16)


def test_alias_matches_ownership_oracle():
    rng = np.random.default_rng(3)
    p = KVPager(P16)
    own = OwnershipMap()
    session_with(p, 0, 64)
    own.views[0] = dict(p.active_pages(0))
    for sid in range(1, 6):
        p.open_session(sid)
        src = int(rng.integers(sid))
        live = p.live_tokens(src)
        prefix = int(rng.integers(1, live + 1))
        p.alias(sid, src, prefix)
        p.frame_commit(sid)
        own.views[sid] = dict(p.active_pages(sid))
        for b in set(own.views[sid].values()):
            want = sum(b in v.values() for v in own.views.values())
            assert p.refcount[b] == want
    assert p.stats().free_pages == 64 - own.live_unique()


# -- write / COW ---------------------------------------------------------------
def test_write_exclusive_is_in_place():
    p = KVPager(P16)
    session_with(p, 1, 16)
    blk = p.active_pages(1)[0]
    assert p.write_tokens(1, 3, rows(1, 77)) == 0
    assert p.shadow_pages(1)[0] == blk


def test_write_shared_copies_and_source_keeps_bytes():
    p = KVPager(P16)
    session_with(p, 1, 16)
    p.open_session(2)
    p.alias(2, 1, 16)
    p.frame_commit(2)
    assert p.write_tokens(2, 0, rows(4, 555)) == 1
    p.frame_commit(2)
    np.testing.assert_array_equal(p.gather(1), rows(16, 1000))
    np.testing.assert_array_equal(p.gather(2, 0, 4), rows(4, 555))


def test_write_unmapped():
    p = KVPager(P16)
    p.open_session(1)
    with pytest.raises(UnmappedRange):
        p.write_tokens(1, 0, rows(1))


def test_three_aliased_writers_match_unshared_copies():
    rng = np.random.default_rng(11)
    p = KVPager(P16)
    session_with(p, 0, 48)
    tapes = {0: rows(48, 0).astype(np.float64)}
    for sid in (1, 2):
        p.open_session(sid)
        p.alias(sid, 0, 48)
        p.frame_commit(sid)
        tapes[sid] = tapes[0].copy()
    for _ in range(60):
        sid = int(rng.integers(3))
        start = int(rng.integers(48))
        n = int(rng.integers(1, 49 - start))
        data = rng.integers(-9, 9, size=(n, 2, 1, 4)).astype(np.float16)
        p.write_tokens(sid, start, data)
        p.frame_commit(sid)
        tapes[sid][start:start + n] = data
    for sid in range(3):
        np.testing.assert_array_equal(p.gather(sid).astype(np.float64), tapes[sid])
    p.check_invariants()


# -- trim --------------------------------------------------------------------
def test_trim_eos_frees_sole_owner_pages():
    p = KVPager(P16)
    session_with(p, 1, 32)
    p.trim(1, eos=True)
    p.frame_commit(1)
    assert p.stats().free_pages == 64


def test_trim_eos_reports_pages_freed():
    p = KVPager(P16)
    p.open_session(1)
    p.reserve(1, 32)
    assert p.trim(1, eos=True) == 2


def test_trim_shared_block_survives():
    p = KVPager(P16)
    session_with(p, 1, 16)
    p.open_session(2)
    p.alias(2, 1, 16)
    p.frame_commit(2)
    blk = p.active_pages(1)[0]
    assert p.trim(1, [(0, 16)]) == 0
    p.frame_commit(1)
    assert p.refcount[blk] == 1
    np.testing.assert_array_equal(p.gather(2), rows(16, 1000))


def test_trim_unmapped():
    p = KVPager(P16)
    session_with(p, 1, 16)
    with pytest.raises(UnmappedRange):
        p.trim(1, [(16, 20)])


def test_random_alias_trim_conservation():
    rng = np.random.default_rng(5)
    p = KVPager(P16)
    own = OwnershipMap()
    sids = []
    for step in range(1000):
        r = rng.random()
        if r < 0.2 or not sids:
            sid = step
            p.open_session(sid)
            if sids and rng.random() < 0.5:
                src = sids[int(rng.integers(len(sids)))]
                prefix = int(rng.integers(0, p.live_tokens(src) + 1))
                if all(q in p.active_pages(src) for q in range(-(-prefix // 16))):
                    p.alias(sid, src, prefix)
                else:
                    with pytest.raises(PrefixOutOfRange):
                        p.alias(sid, src, prefix)
            elif p.stats().free_pages >= 2:
                p.reserve(sid, 20)
                p.write_tokens(sid, 0, rows(20))
            sids.append(sid)
        elif r < 0.6:
            sid = sids[int(rng.integers(len(sids)))]
            mapped = sorted(p.shadow_pages(sid))
            if mapped:
                q = mapped[int(rng.integers(len(mapped)))]
                p.trim_pages(sid, [q])
        else:
            sid = sids.pop(int(rng.integers(len(sids))))
            p.trim(sid, eos=True)
            p.frame_commit(sid)
            p.close_session(sid)
            own.views.pop(sid, None)
            continue
        p.frame_commit(sid)
        own.views[sid] = dict(p.active_pages(sid))
        assert p.stats().free_pages == 64 - own.live_unique()


# -- frame commit --------------------------------------------------------------
def test_empty_delta_advances_epoch_and_keeps_view():
    p = KVPager(P16)
    session_with(p, 1, 20)
    v0 = p.active_view(1)
    e = p.frame_commit(1, FrameDelta(1, p.next_step(1)))
    v1 = p.active_view(1)
    assert e == v0.epoch + 1
    assert (v1.entries, v1.live_token_count) == (v0.entries, v0.live_token_count)


def test_commit_retry_is_idempotent():
    p = KVPager(P16)
    p.open_session(1)
    d = FrameDelta(1, 0, reserves=(20,))
    e1 = p.frame_commit(1, d)
    state = (dict(p.active_pages(1)), p.stats().free_pages)
    e2 = p.frame_commit(1, d)
    assert e1 == e2 == 1
    assert (dict(p.active_pages(1)), p.stats().free_pages) == state


def test_future_delta_rejected():
    p = KVPager(P16)
    p.open_session(1)
    with pytest.raises(FutureDelta):
        p.frame_commit(1, FrameDelta(1, 3))


def test_delta_applies_all_edit_kinds():
    p = KVPager(P16)
    session_with(p, 1, 32)
    p.open_session(2)
    p.frame_commit(2, FrameDelta(2, 0, aliases=((1, 16),), reserves=(16,)))
    assert len(p.active_pages(2)) == 2
    p.frame_commit(2, FrameDelta(2, 1, trims=((16, 32),)))
    assert list(p.active_pages(2)) == [0]
    p.frame_commit(2, FrameDelta(2, 2, eos=True))
    assert p.is_eos(2) and not p.active_pages(2)


def test_commit_work_bounded_by_delta_not_view_size():
    p = KVPager(PagerConfig(page_bytes=256, arena_pages=4096, layers=1, kv_head_dim=4,
                            elem_bytes=2, store_payload=False))
    p.open_session(1)
    touched = []
    for _ in range(2000):
        live = p.live_tokens(1, shadow=True)
        if p.capacity_tokens(1) == live:
            p.reserve(1, 1)
        p.write_tokens(1, live, count=1)
        p.frame_commit(1)
        edits = p.counters.last_commit_edits
        touched.append((p.counters.last_commit_touched, edits))
    assert all(t <= 2 * max(e, 1) for t, e in touched)
    assert max(t for t, _ in touched) <= 4


# -- views -------------------------------------------------------------------
def test_shadow_isolation():
    p = KVPager(P16)
    session_with(p, 1, 16)
    view = p.active_view(1)
    p.reserve(1, 16)
    p.trim(1, [(0, 16)])
    assert p.active_view(1) == view
    p.frame_commit(1)
    after = p.active_view(1)
    assert [e[0] for e in after.entries] == [(16, 32)]


def test_view_descriptor_entries_sorted_disjoint():
    p = KVPager(P16)
    session_with(p, 1, 50)
    v = p.active_view(1)
    ranges = [r for r, _, _ in v.entries]
    assert ranges == sorted(ranges)
    assert all(a[1] == b[0] for a, b in zip(ranges, ranges[1:]))
    assert ranges[0][0] == 0 and ranges[-1][1] >= v.live_token_count
    assert v.epoch == 1


def test_concurrent_reader_sees_whole_epochs():
    p = KVPager(PagerConfig(page_bytes=256, arena_pages=4096, layers=1, kv_head_dim=4,
                            elem_bytes=2, store_payload=False))
    p.open_session(1)
    seen = []
    stop = threading.Event()

    def reader():
        while not stop.is_set():
            v = p.active_view(1)
            seen.append((v.epoch, len(v.entries), v.live_token_count))

    th = threading.Thread(target=reader)
    th.start()
    for _ in range(300):
        p.reserve(1, 16)
        p.write_tokens(1, p.live_tokens(1, shadow=True), count=16)
        p.frame_commit(1)
    stop.set()
    th.join()
    # epoch e always carries e pages holding 16 * e tokens, never a mix
    assert seen
    assert all(n == e and live == 16 * e for e, n, live in seen)


def test_stats_record():
    p = KVPager(P16)
    session_with(p, 1, 20)
    d = p.stats().as_dict()
    assert d == {"free_pages": 62, "live_pages": 2, "shared_pages": 0,
                 "reserved_bytes": 512, "active_bytes": 20 * 16}


# -- properties --------------------------------------------------------------
@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_random_programs_match_flat_tapes(seed):
    p = KVPager(TINY)
    tapes = FlatTapes(p.tpp, (2, 1, 4))
    random_pager_program(np.random.default_rng(seed), p, tapes, 40)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 40)), max_size=40))
def test_uncommitted_edits_never_change_active_view(ops):
    p = KVPager(P16)
    for s in range(4):
        session_with(p, s, 10 + s)
    views = {s: p.active_view(s) for s in range(4)}
    for s, n in ops:
        if n % 3 == 0 and p.shadow_pages(s):
            p.trim_pages(s, [max(p.shadow_pages(s))])
        elif p.stats().free_pages * 16 > n:
            p.reserve(s, n)
    assert {s: p.active_view(s) for s in range(4)} == views


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 40), min_size=1, max_size=20))
def test_commit_twice_equals_once(reserves):
    a, b = KVPager(P16), KVPager(P16)
    for p in (a, b):
        p.open_session(1)
    for t, n in enumerate(reserves):
        if a.stats().free_pages * 16 < n:
            break
        d = FrameDelta(1, t, reserves=(n,))
        a.frame_commit(1, d)
        b.frame_commit(1, d)
        b.frame_commit(1, d)
        assert a.active_view(1) == b.active_view(1)
        assert a.stats() == b.stats()
