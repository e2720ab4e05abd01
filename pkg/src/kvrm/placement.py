"""Lookahead placement: EMA utility scoring, the prefetch set and the cold set."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

from .transport import block_align


class UtilityTracker:
    """Per-block exponential moving average of attention utility.

    Decay is applied lazily: a block that sees no observation for ``k`` steps
    has its score multiplied by ``(1 - alpha) ** k`` on the next read, which is
    the same recurrence as updating it with zeros every step.
    """

    def __init__(self, alpha: float = 0.3):
        if not 0.0 < alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        self.alpha = alpha
        self.last_update_step = -1
        self._score: dict[int, float] = {}
        self._stamp: dict[int, int] = {}

    def score(self, block: int, step: int | None = None) -> float:
        s = self._score.get(block)
        if s is None:
            return 0.0
        step = self.last_update_step if step is None else step
        gap = step - self._stamp[block]
        return s * (1.0 - self.alpha) ** gap if gap > 0 else s

    def update(self, observations: Mapping[int, float], step: int | None = None) -> None:
        step = self.last_update_step + 1 if step is None else step
        a = self.alpha
        for block, obs in observations.items():
            if obs < 0:
                raise ValueError(f"negative utility for block {block}")
            old = self.score(block, step - 1)
            self._score[block] = a * obs + (1.0 - a) * old
            self._stamp[block] = step
        self.last_update_step = step

    def forget(self, blocks: Iterable[int]) -> None:
        for b in blocks:
            self._score.pop(b, None)
            self._stamp.pop(b, None)

    def __len__(self) -> int:
        return len(self._score)


def score_candidates(tracker: UtilityTracker, candidates: Iterable[int],
                     observations: Mapping[int, float] | None = None,
                     step: int | None = None) -> list[int]:
    """Fold in this step's observations, then rank candidates best first."""
    if observations is not None:
        tracker.update(observations, step)
    now = tracker.last_update_step
    cands = list(dict.fromkeys(candidates))
    return sorted(cands, key=lambda b: (-tracker.score(b, now), b))


@dataclass
class SessionPlacement:
    """What placement needs to know about one session at step t."""

    session_id: object
    pages: Mapping[int, int]  # committed logical page -> block
    live_tokens: int
    lookahead: list[tuple[int, int]] = field(default_factory=list)  # token ranges for t+1
    eos: bool = False
    # pages the caller knows may sit outside the window; None means scan all
    cold_hint: list[int] | None = None


@dataclass
class PlacementPlan:
    step: int
    lookahead: list[int] = field(default_factory=list)
    cold: list[int] = field(default_factory=list)
    block_aligned_ranges: list[tuple[object, int, int]] = field(default_factory=list)
    cold_pages: dict = field(default_factory=dict)  # session -> [logical page]
    eos_sessions: list = field(default_factory=list)  # trimmed whole, at EOS


def plan_step(tracker: UtilityTracker, sessions: Iterable[SessionPlacement], *,
              lookahead_budget: int, cold_budget: int, w_star: int, tokens_per_page: int,
              step: int = 0, observations: Mapping[int, float] | None = None,
              shared: Callable[[int], bool] | None = None) -> PlacementPlan:
    """Pick S_{t+1} (top-ranked lookahead blocks) and C_t (bottom-ranked cold blocks).

    ``shared`` tells which blocks more than one session maps.  When given,
    only shared cold candidates are checked against other sessions' near
    windows, which keeps the step cost independent of history length.
    """
    if lookahead_budget < 0 or cold_budget < 0:
        raise ValueError("budgets must be non-negative")
    sessions = list(sessions)
    if observations is not None:
        tracker.update(observations, step)
    now = tracker.last_update_step
    tpp = tokens_per_page
    plan = PlacementPlan(step)

    cand: dict[int, tuple[object, int]] = {}
    cold_cand: dict[int, list[tuple[object, int]]] = {}
    eos_blocks: set[int] = set()
    live_sessions = []
    for s in sessions:
        if s.eos:
            eos_blocks.update(s.pages.values())
            plan.eos_sessions.append(s.session_id)
            continue
        first_window_page = max(0, s.live_tokens - w_star) // tpp
        live_sessions.append((s, first_window_page))
        scan = s.pages if s.cold_hint is None else s.cold_hint
        for p in scan:
            b = s.pages.get(p)
            if b is not None and 0 <= p < first_window_page:
                cold_cand.setdefault(b, []).append((s.session_id, p))
        for p in block_align(s.lookahead, tpp):
            b = s.pages.get(p)
            if b is not None:
                cand.setdefault(b, (s.session_id, p))

    def rank(b):
        return (-tracker.score(b, now), b)

    selected = sorted(cand, key=rank)[:lookahead_budget]
    plan.lookahead = selected
    for b in selected:
        sid, p = cand[b]
        plan.block_aligned_ranges.append((sid, p * tpp, (p + 1) * tpp))

    need_check = [b for b in (cold_cand.keys() | eos_blocks) if shared is None or shared(b)]
    protected: set[int] = set()
    if need_check:
        for s, first in live_sessions:
            protected.update(b for p, b in s.pages.items() if p >= first)

    chosen = set(selected)
    cold_pool = [b for b in cold_cand if b not in protected and b not in chosen]
    cold = sorted(cold_pool, key=lambda b: (tracker.score(b, now), b))[:cold_budget]
    for b in cold:
        for sid, p in cold_cand[b]:
            plan.cold_pages.setdefault(sid, []).append(p)
    taken = set(cold)
    cold.extend(b for b in sorted(eos_blocks)
                if b not in chosen and b not in protected and b not in taken)
    plan.cold = cold
    return plan
