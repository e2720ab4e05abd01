"""Simulated device: linear-cost DMA engine, fixed-shape kernel stub, step accounting."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from typing import Iterable

import numpy as np

from .errors import MultiCommit, ShapeViolation
from .pager import KVPager, PagerConfig


@dataclass(frozen=True)
class CostModel:
    """Time unit is the microsecond."""

    dma_fixed_overhead: float = 4.0
    dma_bandwidth: float = 16384.0  # bytes per unit
    kernel_base: float = 150.0
    kernel_per_slot: float = 0.05
    submit_cost: float = 2.0
    commit_cost: float = 1.0
    commit_per_entry: float = 0.002
    overlap: bool = True

    def __post_init__(self):
        for f in ("dma_fixed_overhead", "dma_bandwidth", "kernel_base", "kernel_per_slot",
                  "submit_cost", "commit_cost"):
            if getattr(self, f) <= 0:
                raise ValueError(f"{f} must be positive")
        if self.commit_per_entry < 0:
            raise ValueError("commit_per_entry must be non-negative")

    def kernel_time(self, visible_width: int) -> float:
        return self.kernel_base + self.kernel_per_slot * visible_width

    def dma_time(self, train_bytes: Iterable[int]) -> float:
        return sum(self.dma_fixed_overhead + b / self.dma_bandwidth for b in train_bytes)


@dataclass
class Completion:
    start: float
    end: float
    nbytes: int


class DmaEngine:
    """One in-order queue; each train is one transfer of fixed cost plus bytes/bandwidth."""

    def __init__(self, cost: CostModel):
        self.cost = cost
        self.clock = 0.0
        self.submitted = 0
        self.bytes = 0

    def reset(self, now: float = 0.0) -> None:
        self.clock = now

    def submit(self, train) -> Completion:
        start = self.clock
        nbytes = train.total_bytes
        self.clock = start + self.cost.dma_fixed_overhead + nbytes / self.cost.dma_bandwidth
        self.submitted += 1
        self.bytes += nbytes
        return Completion(start, self.clock, nbytes)


@dataclass
class StepRecord:
    step: int
    active_sessions: int = 0
    eos_sessions: int = 0
    tokens_emitted: int = 0
    trains_issued: int = 0
    descriptors: int = 0
    near_trains: int = 0
    far_trains: int = 0
    total_dma_bytes: int = 0
    mean_train_bytes: float = 0.0
    max_hold: float = 0.0
    dma_time: float = 0.0
    kernel_time: float = 0.0
    submit_time: float = 0.0
    commit_time: float = 0.0
    step_latency: float = 0.0
    reserved_bytes: int = 0
    active_bytes: int = 0
    commits_this_step: int = 0
    commit_entries: int = 0
    visible_width: int = 0
    clock: float = 0.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "StepRecord":
        data = json.loads(line)
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in names})


def write_records(records: Iterable[StepRecord], path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(r.to_json())
            fh.write("\n")


def read_records(path) -> list[StepRecord]:
    with open(path) as fh:
        return [StepRecord.from_json(line) for line in fh if line.strip()]


@dataclass
class DecodeKernel:
    """Stand-in for the compiled decode graph: one shape, fixed at construction."""

    compiled_width: int
    launches: int = 0
    recompiles: int = field(default=0, init=False)

    def launch(self, widths: Iterable[int]) -> None:
        for w in widths:
            if w != self.compiled_width:
                raise ShapeViolation(f"view width {w} != compiled width {self.compiled_width}")
        self.launches += 1


def execute_step(step: int, trains, visible_widths: Iterable[int], commits: Iterable[int],
                 cost: CostModel, kernel: DecodeKernel, commit_entries: int = 0,
                 engine: DmaEngine | None = None) -> StepRecord:
    """Run one decode step on the simulated device and account for its latency.

    ``commits`` holds the number of frame commits each participating session
    made for this step; anything other than exactly one is fatal.
    """
    commits = list(commits)
    for c in commits:
        if c != 1:
            raise MultiCommit(f"step {step}: a session made {c} commits")
    widths = list(visible_widths)
    kernel.launch(widths)
    engine = engine or DmaEngine(cost)
    engine.reset(0.0)
    for t in trains:
        engine.submit(t)
    dma = engine.clock
    ktime = cost.kernel_time(kernel.compiled_width)
    submit = cost.submit_cost
    commit = cost.commit_cost + cost.commit_per_entry * commit_entries
    body = max(dma, ktime) if cost.overlap else dma + ktime
    total_bytes = sum(t.total_bytes for t in trains)
    return StepRecord(
        step=step,
        trains_issued=len(trains),
        total_dma_bytes=total_bytes,
        mean_train_bytes=total_bytes / len(trains) if trains else 0.0,
        dma_time=dma,
        kernel_time=ktime,
        submit_time=submit,
        commit_time=commit,
        step_latency=body + submit + commit,
        commits_this_step=len(commits),
        commit_entries=commit_entries,
        visible_width=kernel.compiled_width,
    )


def reconstruct_view(pager: KVPager, sid) -> np.ndarray:
    """Token payload of the committed view in logical order."""
    return pager.gather(sid)


def dense_kv_bytes_per_token(config: PagerConfig, T: int) -> int:
    if T < 0:
        raise ValueError("T must be >= 0")
    return 2 * config.layers * config.kv_head_dim * config.elem_bytes * T


def capped_kv_bytes_per_token(config: PagerConfig, T: int, window: int) -> int:
    """Traffic once the visible working set is capped at ``window`` tokens."""
    return dense_kv_bytes_per_token(config, min(T, window))
