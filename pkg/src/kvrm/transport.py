"""Merge-staged descriptor transport: Shift, Stage, Reduce, Issue.

Staging emits one descriptor per contiguous physical run of a session's
pages, so a descriptor may span several page blocks.  ``reduce`` walks them in (kind, offset)
order and grows a train while the next descriptor is physically adjacent,
the train is below the merge threshold and its oldest member is younger than
the hold cutoff.  Whatever is left when the step ends goes out as the step's
final trains.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable

from .errors import UnmappedBlock


class Kind(enum.IntEnum):
    NEAR = 0
    FAR = 1


@dataclass(frozen=True)
class TransportConfig:
    tau: int = 131072
    delta: float = 25.0
    max_trains_per_step: int = 2
    merge: bool = True

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.delta < 0:
            raise ValueError("delta must be non-negative")


@dataclass(frozen=True, slots=True)
class Descriptor:
    block_id: int
    physical_offset: int
    length: int
    kind: Kind = Kind.NEAR
    stage_time: float = 0.0

    def __post_init__(self):
        if self.length <= 0:
            raise ValueError("descriptor length must be positive")

    @property
    def end(self) -> int:
        return self.physical_offset + self.length


@dataclass
class DmaTrain:
    descriptors: list[Descriptor]
    kind: Kind
    issue_time: float = 0.0
    total_bytes: int = 0

    def __post_init__(self):
        if not self.total_bytes:
            self.total_bytes = sum(d.length for d in self.descriptors)

    @property
    def oldest_stage_time(self) -> float:
        return min(d.stage_time for d in self.descriptors)


@dataclass
class TransportRecord:
    trains: int = 0
    descriptors: int = 0
    total_bytes: int = 0
    max_hold: float = 0.0
    near_trains: int = 0
    far_trains: int = 0

    @property
    def mean_train_bytes(self) -> float:
        return self.total_bytes / self.trains if self.trains else 0.0


def near_window(live_tokens: int, w_star: int) -> tuple[int, int]:
    """Half-open token range of the near window once ``live_tokens`` exist."""
    return max(0, live_tokens - w_star), live_tokens


def block_align(ranges: Iterable[tuple[int, int]], tokens_per_page: int) -> list[int]:
    """Logical pages covering every token range, expanded to page boundaries."""
    pages: dict[int, None] = {}
    for lo, hi in ranges:
        if hi > lo:
            for p in range(lo // tokens_per_page, -(-hi // tokens_per_page)):
                pages[p] = None
    return sorted(pages)


@dataclass
class _Lane:
    window: tuple[int, int] = (0, 0)
    resident: dict = field(default_factory=dict)  # page -> block staged into the window


class Transport:
    """Per-device transport state: which window pages each lane already holds."""

    def __init__(self, config: TransportConfig, page_bytes: int, tokens_per_page: int):
        self.config = config
        self.page_bytes = page_bytes
        self.tpp = tokens_per_page
        self.lanes: dict[object, _Lane] = {}

    # -- phase 1 ------------------------------------------------------------
    def shift(self, sid, live_tokens: int, w_star: int, eos: bool = False) -> tuple[int, int]:
        """Advance ``sid``'s near window; a retired session stops contributing."""
        if eos:
            self.lanes.pop(sid, None)
            return (live_tokens, live_tokens)
        lane = self.lanes.setdefault(sid, _Lane())
        lane.window = near_window(live_tokens, w_star)
        lo_page = lane.window[0] // self.tpp
        for p in [p for p in lane.resident if 0 <= p < lo_page]:
            del lane.resident[p]
        return lane.window

    def missing_pages(self, sid, pages: dict[int, int], upto_tokens: int) -> list[tuple[int, int]]:
        """(page, block) pairs of the window (extended to ``upto_tokens``) not yet resident."""
        lane = self.lanes.get(sid)
        if lane is None:
            return []
        lo = lane.window[0] // self.tpp
        hi = -(-upto_tokens // self.tpp)
        out = []
        res = lane.resident
        for p in range(lo, hi):
            b = pages.get(p)
            if b is not None and res.get(p) != b:
                out.append((p, b))
        return out

    def mark_resident(self, sid, page: int, block: int) -> None:
        lane = self.lanes.get(sid)
        if lane is not None:
            lane.resident[page] = block

    # -- phase 2 ------------------------------------------------------------
    def stage(self, blocks: Iterable[int], kind: Kind, now: float, is_live=None) -> list[Descriptor]:
        """One descriptor per maximal physically contiguous run of ``blocks``.

        ``is_live`` (block -> bool) guards against staging a block that was
        trimmed in the same frame.
        """
        pb = self.page_bytes
        out: list[Descriptor] = []
        run_start = prev = None
        for b in sorted(set(blocks)):
            if is_live is not None and not is_live(b):
                raise UnmappedBlock(f"block {b} staged after being trimmed")
            if prev is not None and b == prev + 1:
                prev = b
                continue
            if run_start is not None:
                out.append(Descriptor(run_start, run_start * pb, (prev - run_start + 1) * pb, kind, now))
            run_start = prev = b
        if run_start is not None:
            out.append(Descriptor(run_start, run_start * pb, (prev - run_start + 1) * pb, kind, now))
        return out

    # -- phase 3 ------------------------------------------------------------
    def reduce(self, descriptors: list[Descriptor], now: float) -> list[DmaTrain]:
        return reduce(descriptors, self.config, now)


def physical_runs(descriptors: Iterable[Descriptor]) -> list[tuple[int, int]]:
    """Maximal physically contiguous extents (offset, length), by linear scan."""
    runs: list[list[int]] = []
    for d in sorted(descriptors, key=lambda d: d.physical_offset):
        if runs and runs[-1][0] + runs[-1][1] == d.physical_offset:
            runs[-1][1] += d.length
        else:
            runs.append([d.physical_offset, d.length])
    return [tuple(r) for r in runs]


def reduce(descriptors: list[Descriptor], config: TransportConfig, now: float) -> list[DmaTrain]:
    if not descriptors:
        return []
    descs = sorted(descriptors, key=lambda d: (d.kind, d.physical_offset))
    if not config.merge:
        return [DmaTrain([d], d.kind, now, d.length) for d in descs]
    tau, delta = config.tau, config.delta
    trains: list[DmaTrain] = []
    i, n = 0, len(descs)
    while i < n:
        first = descs[i]
        members = [first]
        total = first.length
        oldest = first.stage_time
        i += 1
        while total < tau and now - oldest < delta and i < n:
            nxt = descs[i]
            if nxt.kind != first.kind or nxt.physical_offset != members[-1].end:
                break
            members.append(nxt)
            total += nxt.length
            if nxt.stage_time < oldest:
                oldest = nxt.stage_time
            i += 1
        trains.append(DmaTrain(members, first.kind, now, total))
    return trains


def issue(trains: list[DmaTrain], engine) -> list:
    """Submit each train as one DMA; returns the engine's completion records."""
    return [engine.submit(t) for t in trains]


def summarize(trains: list[DmaTrain], n_descriptors: int, now: float) -> TransportRecord:
    rec = TransportRecord(trains=len(trains), descriptors=n_descriptors)
    for t in trains:
        rec.total_bytes += t.total_bytes
        hold = now - t.oldest_stage_time
        if hold > rec.max_hold:
            rec.max_hold = hold
        if t.kind == Kind.NEAR:
            rec.near_trains += 1
        else:
            rec.far_trains += 1
    return rec
