"""Mixed-length decode traffic: synthetic generation, CSV traces, replay windows, arena presets."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    EmptyStream,
    InfeasibleSpec,
    NonMonotoneTime,
    TraceParseError,
    UnknownRegime,
)
from .metrics import nearest_rank

CSV_HEADER = ("arrival_ms", "prompt_tokens", "generate_tokens")
REGIMES = ("contiguous", "mild", "strong", "adversarial-random")


@dataclass(frozen=True)
class TraceEvent:
    arrival_time: float  # ms
    prompt_tokens: int
    generate_tokens: int
    request_id: int


@dataclass(frozen=True)
class WorkloadSpec:
    concurrency: int = 64
    n_requests: int = 10000
    length_percentiles: tuple[int, int, int] = (96, 384, 1024)
    max_generate: int = 2048
    min_generate: int = 1
    eos_burst_targets: tuple[int, int, int] = (1, 5, 11)  # reported, not gated
    arrival_top_decile_share: float = 0.31
    arrival_rate: float = 40.0  # requests per second
    window_ms: float = 100.0
    length_cluster_corr: float = 0.5
    prompt_mix: tuple[tuple[int, float], ...] = ((64, 0.5), (256, 0.35), (768, 0.15))
    seed: int = 0

    def __post_init__(self):
        p50, p90, p99 = self.length_percentiles
        if not (1 <= self.min_generate <= p50 <= p90 <= p99 <= self.max_generate):
            raise InfeasibleSpec(f"length percentiles must be monotone: {self.length_percentiles}")
        if not 0.1 <= self.arrival_top_decile_share < 1.0:
            raise InfeasibleSpec("top-decile arrival share must lie in [0.1, 1)")
        if self.n_requests < 1 or self.arrival_rate <= 0:
            raise InfeasibleSpec("need at least one request and a positive rate")
        if not 0.0 <= self.length_cluster_corr < 1.0:
            raise InfeasibleSpec("length_cluster_corr must lie in [0, 1)")


@dataclass
class WorkloadAudit:
    length_p50: float
    length_p90: float
    length_p99: float
    top_decile_share: float
    eos_per_window: tuple[float, float, float] = (0.0, 0.0, 0.0)
    passed: bool = True
    failures: list = field(default_factory=list)


class WorkloadAuditError(InfeasibleSpec):
    pass


# -- length law -----------------------------------------------------------
def length_quantile(u: np.ndarray, spec: WorkloadSpec) -> np.ndarray:
    """Three log-linear pieces through (0.5, p50), (0.9, p90), (0.99, p99).

    The body below the median starts at ``min_generate``, the tail above p99
    is extended to ``max_generate``.
    """
    p50, p90, p99 = spec.length_percentiles
    qs = np.array([0.0, 0.5, 0.9, 0.99, 1.0])
    ls = np.log(np.array([spec.min_generate, p50, p90, p99, max(p99, spec.max_generate)], dtype=float))
    out = np.exp(np.interp(u, qs, ls))
    return np.clip(np.rint(out), spec.min_generate, spec.max_generate).astype(int)


# -- arrivals -------------------------------------------------------------
def top_decile_share(times_ms, window_ms: float) -> float:
    t = np.asarray(times_ms, dtype=float)
    if t.size == 0:
        return 0.0
    idx = np.floor((t - t.min()) / window_ms).astype(int)
    counts = np.bincount(idx)
    k = max(1, int(math.ceil(0.1 * counts.size)))
    top = np.sort(counts)[::-1][:k]
    return float(top.sum() / counts.sum())


def _arrivals(spec: WorkloadSpec, sigma: float) -> np.ndarray:
    """Arrival times (ms) under log-normal per-window rate modulation of width ``sigma``.

    The random draws do not depend on ``sigma`` (same seed every call), so the
    realized concentration moves smoothly as ``sigma`` is tuned.
    """
    rng = np.random.default_rng([spec.seed, 1])
    n = spec.n_requests
    mean = spec.arrival_rate * spec.window_ms / 1000.0
    n_windows = int(math.ceil(3 * n / mean)) + 10
    z = rng.standard_normal(n_windows)
    mult = np.exp(sigma * z)
    mult /= mult.mean()
    counts = rng.poisson(mean * mult)
    win = np.repeat(np.arange(n_windows), counts)
    offs = rng.uniform(0.0, spec.window_ms, size=win.size)
    if win.size < n:
        raise InfeasibleSpec("arrival process produced too few requests")
    times = np.sort(win[:n] * spec.window_ms + offs[:n])
    return np.round(times, 3)


def _fit_arrivals(spec: WorkloadSpec) -> np.ndarray:
    """Bisect the modulation width until the stream hits its top-decile share."""
    target = spec.arrival_top_decile_share
    best = None
    lo, hi = 0.0, 4.0
    for _ in range(30):
        mid = 0.5 * (lo + hi)
        times = _arrivals(spec, mid)
        share = top_decile_share(times, spec.window_ms)
        if best is None or abs(share - target) < best[0]:
            best = (abs(share - target), times)
        if share < target:
            lo = mid
        else:
            hi = mid
    return best[1]


def generate(spec: WorkloadSpec, audit: bool = True) -> list[TraceEvent]:
    """Deterministic event stream for ``spec``; rejected if its self-audit fails."""
    n = spec.n_requests
    times = _fit_arrivals(spec)
    win_of = np.floor((times - times[0]) / spec.window_ms).astype(int)
    rng = np.random.default_rng([spec.seed, 2])

    # a latent shared across one arrival window makes lengths cluster (and
    # finish together); mapping latent ranks to evenly spaced quantiles keeps
    # the marginal law exact however strong the clustering
    rho = spec.length_cluster_corr
    z_win = rng.standard_normal(int(win_of.max()) + 1)
    z = rho * z_win[win_of] + math.sqrt(1 - rho * rho) * rng.standard_normal(n)
    ranks = np.empty(n, dtype=float)
    ranks[np.argsort(z, kind="stable")] = np.arange(n)
    gen = length_quantile((ranks + 0.5) / n, spec)

    sizes = np.array([s for s, _ in spec.prompt_mix], dtype=float)
    probs = np.array([p for _, p in spec.prompt_mix], dtype=float)
    pick = rng.choice(len(sizes), size=n, p=probs / probs.sum())
    jitter = rng.uniform(0.75, 1.25, n)
    prompts = np.maximum(1, np.rint(sizes[pick] * jitter)).astype(int)

    events = [TraceEvent(float(times[i]), int(prompts[i]), int(gen[i]), i) for i in range(n)]
    if audit:
        rep = audit_stream(events, spec)
        if not rep.passed:
            raise WorkloadAuditError("; ".join(rep.failures))
    return events


def audit_stream(events: list[TraceEvent], spec: WorkloadSpec) -> WorkloadAudit:
    lengths = [e.generate_tokens for e in events]
    p50, p90, p99 = (nearest_rank(lengths, q) for q in (0.5, 0.9, 0.99))
    share = top_decile_share([e.arrival_time for e in events], spec.window_ms)
    rep = WorkloadAudit(p50, p90, p99, share)
    for got, want, name in zip((p50, p90, p99), spec.length_percentiles, ("p50", "p90", "p99")):
        if abs(got - want) > 0.10 * want:
            rep.failures.append(f"length {name} {got} vs target {want}")
    if abs(share - spec.arrival_top_decile_share) > 0.05:
        rep.failures.append(
            f"top-decile arrival share {share:.3f} vs target {spec.arrival_top_decile_share}"
        )
    rep.passed = not rep.failures
    return rep


# -- trace files ----------------------------------------------------------
def save_trace(events, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for e in events:
            w.writerow((repr(float(e.arrival_time)), e.prompt_tokens, e.generate_tokens))


def load_trace(path) -> list[TraceEvent]:
    text = Path(path).read_text()
    if not text.strip():
        return []
    rows = csv.reader(text.splitlines())
    header = next(rows)
    if tuple(h.strip() for h in header) != CSV_HEADER:
        raise TraceParseError(1, f"expected header {','.join(CSV_HEADER)}")
    events: list[TraceEvent] = []
    last = -math.inf
    for lineno, row in enumerate(rows, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 3:
            raise TraceParseError(lineno, f"expected 3 fields, got {len(row)}")
        try:
            t = float(row[0])
            p, g = int(row[1]), int(row[2])
        except ValueError as exc:
            raise TraceParseError(lineno, str(exc)) from None
        if p < 1 or g < 1:
            raise TraceParseError(lineno, "token counts must be >= 1")
        if t < last:
            raise NonMonotoneTime(lineno, f"arrival {t} precedes {last}")
        last = t
        events.append(TraceEvent(t, p, g, len(events)))
    return events


def select_window(events: list[TraceEvent], seconds: float) -> list[TraceEvent]:
    """Contiguous window of ``seconds`` with the most arrivals (earliest on ties)."""
    if seconds <= 0:
        raise ValueError("seconds must be positive")
    if not events:
        raise EmptyStream("cannot select a window from an empty stream")
    dur = seconds * 1000.0
    times = [e.arrival_time for e in events]
    best_i, best_n = 0, 0
    j = 0
    for i, t in enumerate(times):
        if j < i:
            j = i
        while j < len(times) and times[j] < t + dur:
            j += 1
        if j - i > best_n:
            best_i, best_n = i, j - i
    return events[best_i:best_i + best_n]


def eos_per_window(events: list[TraceEvent], step_ms: float, window_ms: float = 100.0):
    """p50/p90/p99 EOS completions per window if every request decodes one token per step."""
    if not events:
        return (0.0, 0.0, 0.0)
    ends = np.array([e.arrival_time + e.generate_tokens * step_ms for e in events])
    idx = np.floor((ends - ends.min()) / window_ms).astype(int)
    c = np.bincount(idx).tolist()
    return tuple(float(nearest_rank(c, q)) for q in (0.5, 0.9, 0.99))


# -- fragmentation presets ------------------------------------------------
def fragmentation_preset(regime: str, arena_pages: int, seed: int = 0) -> list[tuple]:
    """Reserve/trim script that shapes the initial arena layout.

    The script reserves the whole arena into one filler session and then
    trims the blocks that should start out free.  ``mild`` keeps every 4th
    block pinned (free runs of 3), ``strong`` keeps alternating blocks pinned
    (free runs of 1), ``adversarial-random`` pins a seeded random half.
    """
    if regime not in REGIMES:
        raise UnknownRegime(f"{regime!r}; expected one of {', '.join(REGIMES)}")
    if regime == "contiguous":
        return []
    if regime == "mild":
        free = [b for b in range(arena_pages) if b % 4 != 3]
    elif regime == "strong":
        free = [b for b in range(arena_pages) if b % 2 == 0]
    else:
        rng = np.random.default_rng(seed)
        occupied = rng.permutation(arena_pages)[: arena_pages // 2]
        mask = np.ones(arena_pages, dtype=bool)
        mask[occupied] = False
        free = np.flatnonzero(mask).tolist()
    return [("reserve", arena_pages), ("trim_pages", free)]


def occupancy(script: list[tuple], arena_pages: int) -> np.ndarray:
    """Occupancy bitmap a preset script leaves behind (True = pinned)."""
    occ = np.zeros(arena_pages, dtype=bool)
    for op, arg in script:
        if op == "reserve":
            occ[:arg] = True
        elif op == "trim_pages":
            occ[list(arg)] = False
    return occ


def apply_preset(pager, script: list[tuple], sid="__filler__") -> None:
    """Run a preset script against a fresh pager and commit it."""
    if not script:
        return
    pager.open_session(sid)
    for op, arg in script:
        if op == "reserve":
            pager.reserve(sid, arg * pager.tpp)
        elif op == "trim_pages":
            pager.trim_pages(sid, arg)
    pager.frame_commit(sid)
