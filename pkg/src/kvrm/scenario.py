"""Decode-loop driver: workload -> pager/placement/far view/transport -> simulated device.

Each simulated step runs, in order: admission into free lanes, one decode
write per running session (with prefetch-1 reservation of the next page),
placement, cold and EOS trims, exactly one frame commit per session, then
staging, merging and issue of the step's descriptors.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

from .config import ScenarioConfig
from .errors import InvariantViolation, KvrmError, MultiCommit
from .pager import KVPager
from .placement import SessionPlacement, UtilityTracker, plan_step
from .sim import CostModel, DecodeKernel, DmaEngine, StepRecord, execute_step
from .transport import Kind, Transport, reduce, summarize
from .workload import (
    TraceEvent,
    apply_preset,
    fragmentation_preset,
    generate,
    load_trace,
    select_window,
)

FILLER = "__filler__"


@dataclass
class _Req:
    sid: int
    prompt: int
    target: int  # tokens to generate
    admitted_at: int
    generated: int = 0
    live: int = 0  # tokens written, including the prompt
    trimmed_upto: int = 0  # logical pages below this are already trimmed
    pending: list = field(default_factory=list)  # committed pages awaiting staging
    chunks_done: int = 0  # far chunks already summarized
    aux_pages: int = 0
    lane: int = -1
    fresh: bool = True
    far_dirty: bool = False


@dataclass
class RunResult:
    records: list[StepRecord]
    workload_hash: str
    warmup: int
    audit: dict
    config: ScenarioConfig

    @property
    def measured(self) -> list[StepRecord]:
        return self.records[self.warmup:]


def workload_hash(events: list[TraceEvent], concurrency: int) -> str:
    h = hashlib.sha256(f"B={concurrency};".encode())
    for e in events:
        h.update(f"{e.arrival_time!r},{e.prompt_tokens},{e.generate_tokens};".encode())
    return h.hexdigest()[:16]


def load_events(cfg: ScenarioConfig) -> list[TraceEvent]:
    if cfg.trace is not None:
        events = load_trace(cfg.trace)
        if cfg.replay_seconds:
            events = select_window(events, cfg.replay_seconds)
        return events
    import dataclasses

    return generate(dataclasses.replace(cfg.workload, seed=cfg.seed))


class Scenario:
    def __init__(self, cfg: ScenarioConfig, events: list[TraceEvent] | None = None):
        self.cfg = cfg
        self.events = events if events is not None else load_events(cfg)
        if not self.events:
            raise InvariantViolation("workload has no requests")
        self.B = cfg.concurrency
        pcfg = cfg.pager
        self.pager = KVPager(pcfg)
        self.tpp = pcfg.tokens_per_page
        self.page_bytes = pcfg.page_bytes
        self.W = cfg.far_view.W_star
        self.fv = cfg.far_view
        self.transport = Transport(cfg.transport, pcfg.page_bytes, self.tpp)
        self.tracker = UtilityTracker(cfg.placement.alpha)
        self.cost: CostModel = cfg.cost
        self.kernel = DecodeKernel(self.fv.visible_width)
        self.engine = DmaEngine(self.cost)
        self.clock = 0.0
        self.running: dict[int, _Req] = {}
        self._cursor = 0
        self._lanes_free = list(range(self.B - 1, -1, -1))
        self.audit = {"commits": 0, "steps": 0, "multi_commit_steps": 0, "shape_violations": 0,
                      "recompiles": 0, "conservation_breaches": 0, "reserve_slack_breaches": 0,
                      "full_audits": 0}
        region = int(pcfg.arena_pages * cfg.frag_fraction)
        if not cfg.static_arena:
            apply_preset(self.pager, fragmentation_preset(cfg.regime, region, cfg.seed), FILLER)
            if self.pager.has_session(FILLER):
                self._filler_pages = len(self.pager.active_pages(FILLER))
            else:
                self._filler_pages = 0
        else:
            self._filler_pages = 0
            self._open_static_lanes()

    # -- static-arena baseline ---------------------------------------------
    def _open_static_lanes(self) -> None:
        # one fixed slot per lane sized for the near window plus a page of slack
        self.slot_pages = -(-self.W // self.tpp) + 2
        self.lane_blocks: list[list[int]] = []
        for lane in range(self.B):
            sid = ("lane", lane)
            self.pager.open_session(sid)
            blocks = self.pager.reserve(sid, self.slot_pages * self.tpp)
            self.pager.frame_commit(sid)
            self.lane_blocks.append([b for b, _ in blocks])

    # -- admission ---------------------------------------------------------
    def _next_event(self) -> tuple[int, TraceEvent]:
        n = len(self.events)
        i = self._cursor
        self._cursor += 1
        return i, self.events[i % n]

    def _admit(self, step: int) -> None:
        while len(self.running) < self.B:
            sid, ev = self._next_event()
            r = _Req(sid, ev.prompt_tokens, ev.generate_tokens, step)
            r.lane = self._lanes_free.pop()
            self.running[sid] = r
            if not self.cfg.static_arena:
                self.pager.open_session(sid, start_step=step)

    # -- one step ----------------------------------------------------------
    def step(self, t: int) -> StepRecord:
        cfg = self.cfg
        pager, tpp, W = self.pager, self.tpp, self.W
        static = cfg.static_arena
        self._admit(t)

        eos_now: list[int] = []
        placements = []
        observations: dict[int, float] = {}
        tokens = 0
        burst = cfg.burst_step is not None and t == cfg.burst_step
        batch: list[tuple[_Req, int]] = []  # (request, tokens) reserved this frame
        for k, r in enumerate(list(self.running.values())):
            if r.fresh:
                if not static:
                    # prefill: the prompt plus the page for the first decode token
                    batch.append((r, r.prompt + 1))
                r.live = r.prompt
                continue
            done = r.generated + 1 >= r.target or (burst and k % 2 == 0)
            if not static:
                page = r.live // tpp
                pager.write_tokens(r.sid, r.live, count=1)
                if done:
                    eos_now.append(r.sid)
                elif (r.live + 2) > pager.capacity_tokens(r.sid):
                    batch.append((r, 1))
                blk = pager.shadow_pages(r.sid).get(page)
                if blk is not None:
                    observations[blk] = 1.0
            else:
                if done:
                    eos_now.append(r.sid)
                elif (r.live + 1) % tpp == 0:
                    r.pending.append((r.live + 1) // tpp)
            r.live += 1
            r.generated += 1
            tokens += 1
        if batch:
            self._reserve(batch)

        records_eos = len(eos_now)
        if static:
            commits = self._static_frames(t, eos_now)
            near, far = self._static_stage(t)
        else:
            eos_set = set(eos_now)
            for r in self.running.values():
                first = max(0, r.live - W) // tpp
                hint = range(r.trimmed_upto, first) if r.trimmed_upto < first else ()
                look = [(p * tpp, (p + 1) * tpp) for p in r.pending]
                placements.append(SessionPlacement(
                    r.sid, pager.shadow_pages(r.sid), r.live, look,
                    eos=r.sid in eos_set, cold_hint=list(hint)))
            refcount = pager.refcount
            plan = plan_step(self.tracker, placements,
                             lookahead_budget=cfg.placement.lookahead_budget,
                             cold_budget=cfg.placement.cold_budget, w_star=W,
                             tokens_per_page=tpp, step=t, observations=observations,
                             shared=lambda b: refcount[b] >= 2)
            commits = []
            for r in list(self.running.values()):
                sid = r.sid
                cold = plan.cold_pages.get(sid)
                if cold:
                    pager.trim_pages(sid, cold)
                    r.trimmed_upto = max(r.trimmed_upto, max(cold) + 1)
                if self.fv.enabled and sid not in eos_set:
                    self._far_edits(r)
                if sid in eos_set:
                    pager.trim(sid, eos=True)
                before = pager.next_step(sid)
                pager.frame_commit(sid)
                commits.append(pager.next_step(sid) - before)
            self.tracker.forget(plan.cold)
            near, far = self._stage(t, plan, eos_set)

        # retire EOS sessions after their final frame
        for sid in eos_now:
            r = self.running.pop(sid)
            self._lanes_free.append(r.lane)
            self.transport.shift(sid, r.live, W, eos=True)
            if not static:
                pager.close_session(sid)
        for r in self.running.values():
            r.fresh = False
            self.transport.shift(r.sid, r.live, W)

        now = self.clock
        descs = near + far
        trains = reduce(descs, cfg.transport, now)
        widths = [self.fv.visible_width] * len(self.running)
        try:
            rec = execute_step(t, trains, widths, commits, self.cost, self.kernel,
                               commit_entries=pager.counters.last_commit_touched,
                               engine=self.engine)
        except MultiCommit:
            self.audit["multi_commit_steps"] += 1
            raise
        tr = summarize(trains, len(descs), now)
        rec.descriptors = len(descs)
        rec.near_trains, rec.far_trains, rec.max_hold = tr.near_trains, tr.far_trains, tr.max_hold
        rec.active_sessions = len(self.running) + records_eos
        rec.eos_sessions = records_eos
        rec.tokens_emitted = tokens
        rec.reserved_bytes, rec.active_bytes = self._memory()
        self.clock += rec.step_latency
        rec.clock = self.clock
        self.audit["commits"] += len(commits)
        self.audit["steps"] += 1
        self._check(t, rec)
        return rec

    def _reserve(self, batch: list[tuple[_Req, int]]) -> None:
        pager, tpp, W = self.pager, self.tpp, self.W
        if self.cfg.batch_reserve:
            got = pager.reserve_batch([(r.sid, n) for r, n in batch])
        else:
            got = [pager.reserve(r.sid, n) for r, n in batch]
        for (r, n), blocks in zip(batch, got):
            if r.fresh:
                pager.write_tokens(r.sid, 0, count=r.prompt)
                r.pending.extend(range(max(0, r.prompt - W) // tpp, len(blocks)))
            else:
                # prefetch-1: the page the next decode token lands in
                r.pending.append(r.live // tpp)

    def _far_edits(self, r: _Req) -> None:
        """Summaries for far chunks that just became complete go to aux pages."""
        boundary = max(0, r.live - self.W)
        complete = boundary // self.fv.sv_chunk
        if complete <= r.chunks_done or self.fv.cap == 0:
            r.chunks_done = max(r.chunks_done, complete)
            return
        if r.aux_pages == 0:
            # one fixed aux region holds the cap selected summaries
            got = self.pager.reserve(r.sid, self.fv.cap, aux=True)
            r.aux_pages = len(got)
        r.chunks_done = complete
        r.far_dirty = True

    def _stage(self, t: int, plan, eos_set) -> tuple[list, list]:
        pager, tr = self.pager, self.transport
        refcount = pager.refcount
        is_live = lambda b: refcount[b] > 0  # noqa: E731
        selected: dict[int, set[int]] = {}
        for sid, lo, _hi in plan.block_aligned_ranges:
            selected.setdefault(sid, set()).add(lo // self.tpp)
        near = []
        now = self.clock
        for sid, pages in selected.items():
            r = self.running[sid]
            table = pager.active_pages(sid)
            near.extend(tr.stage([table[p] for p in pages], Kind.NEAR, now, is_live))
            r.pending = [p for p in r.pending if p not in pages]
        far = []
        if self.fv.enabled:
            for r in self.running.values():
                if r.far_dirty and r.sid not in eos_set:
                    table = pager.active_pages(r.sid)
                    blocks = [table[-1 - i] for i in range(r.aux_pages)]
                    far.extend(tr.stage(blocks, Kind.FAR, now, is_live))
                    r.far_dirty = False
        return near, far

    def _static_frames(self, t: int, eos_now) -> list[int]:
        commits = []
        for lane in range(self.B):
            sid = ("lane", lane)
            before = self.pager.next_step(sid)
            self.pager.frame_commit(sid)
            commits.append(self.pager.next_step(sid) - before)
        return commits

    def _static_stage(self, t: int) -> tuple[list, list]:
        near = []
        now = self.clock
        for r in self.running.values():
            if r.fresh:
                first = max(0, r.live - self.W) // self.tpp
                r.pending = list(range(first, -(-(r.live + 1) // self.tpp)))
            if not r.pending:
                continue
            blocks = self.lane_blocks[r.lane]
            near.extend(self.transport.stage(
                [blocks[p % self.slot_pages] for p in r.pending], Kind.NEAR, now))
            r.pending = []
        return near, []

    # -- accounting and audits ---------------------------------------------
    def _memory(self) -> tuple[int, int]:
        if self.cfg.static_arena:
            reserved = self.B * self.slot_pages * self.page_bytes
            tb = self.cfg.pager.token_bytes
            active = sum(min(r.live, self.W) for r in self.running.values()) * tb
            return reserved, active
        st = self.pager.stats()
        reserved = st.reserved_bytes - self._filler_pages * self.page_bytes
        return reserved, st.active_bytes

    def _check(self, t: int, rec: StepRecord) -> None:
        cfg = self.cfg
        pager = self.pager
        st = pager.stats()
        if st.free_pages + st.live_pages != cfg.pager.arena_pages:
            self.audit["conservation_breaches"] += 1
            raise InvariantViolation(f"step {t}: page conservation broken")
        if not cfg.static_arena:
            aux = sum(r.aux_pages for r in self.running.values()) * self.page_bytes
            slack = len(self.running) * self.page_bytes
            if rec.reserved_bytes - aux > rec.active_bytes + slack:
                self.audit["reserve_slack_breaches"] += 1
                raise InvariantViolation(
                    f"step {t}: reserved {rec.reserved_bytes - aux} B exceeds active "
                    f"{rec.active_bytes} B plus one page per session")
        if cfg.audit_every and t % cfg.audit_every == 0:
            try:
                pager.check_invariants()
            except InvariantViolation as exc:
                raise InvariantViolation(f"step {t}: {exc}") from None
            self.audit["full_audits"] += 1

    def run(self) -> RunResult:
        total = self.cfg.warmup + self.cfg.steps
        records = []
        try:
            for t in range(total):
                records.append(self.step(t))
        except KvrmError as exc:
            if isinstance(exc, InvariantViolation):
                raise
            raise InvariantViolation(f"simulation aborted: {type(exc).__name__}: {exc}") from exc
        post = self.audit["commits"]
        self.audit["commits_per_step_session_ok"] = post == sum(
            r.commits_this_step for r in records)
        return RunResult(records, workload_hash(self.events, self.B), self.cfg.warmup,
                         dict(self.audit), self.cfg)


def run_scenario(cfg: ScenarioConfig, events=None) -> RunResult:
    return Scenario(cfg, events).run()
