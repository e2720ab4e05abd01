"""Scenario configuration: one YAML file, one named key per tunable constant."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .far_view import FarViewConfig
from .pager import PagerConfig
from .sim import CostModel
from .transport import TransportConfig
from .workload import REGIMES, WorkloadSpec


@dataclass(frozen=True)
class PlacementConfig:
    alpha: float = 0.3
    lookahead_budget: int = 256
    cold_budget: int = 1024


@dataclass(frozen=True)
class SweepConfig:
    concurrency: tuple[int, ...] = (16, 32, 64, 128)
    regimes: tuple[str, ...] = REGIMES
    caps: tuple[int, ...] = (0, 16, 64)


@dataclass(frozen=True)
class ScenarioConfig:
    pager: PagerConfig = field(default_factory=lambda: PagerConfig(arena_pages=32768,
                                                                   store_payload=False))
    transport: TransportConfig = field(default_factory=TransportConfig)
    far_view: FarViewConfig = field(default_factory=FarViewConfig)
    cost: CostModel = field(default_factory=CostModel)
    placement: PlacementConfig = field(default_factory=PlacementConfig)
    workload: WorkloadSpec | None = field(default_factory=WorkloadSpec)
    trace: str | None = None
    replay_seconds: float | None = None
    steps: int = 6000  # measured steps, after warm-up
    warmup: int = 100
    regime: str = "contiguous"
    frag_fraction: float = 0.5  # share of the arena the fragmentation preset shapes
    batch_reserve: bool = True  # one free-list request per step for all sessions
    static_arena: bool = False  # pager-off baseline: one fixed slot per lane
    audit_every: int = 0  # full O(arena) audit period in steps; 0 disables
    burst_step: int | None = None  # retire every other session at this step
    sweep: SweepConfig = field(default_factory=SweepConfig)
    out: str = "out"
    seed: int = 0

    def __post_init__(self):
        if (self.workload is None) == (self.trace is None):
            raise ValueError("set exactly one of 'workload' and 'trace'")
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}; expected one of {', '.join(REGIMES)}")
        if self.steps < 1 or self.warmup < 0:
            raise ValueError("steps must be >= 1 and warmup >= 0")
        if not 0.0 <= self.frag_fraction <= 1.0:
            raise ValueError("frag_fraction must lie in [0, 1]")

    @property
    def concurrency(self) -> int:
        return self.workload.concurrency if self.workload else _TRACE_CONCURRENCY

    def with_(self, **changes) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))


_TRACE_CONCURRENCY = 64

_SECTIONS = {
    "pager": PagerConfig,
    "transport": TransportConfig,
    "far_view": FarViewConfig,
    "cost": CostModel,
    "placement": PlacementConfig,
    "workload": WorkloadSpec,
    "sweep": SweepConfig,
}


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _tuplify(value):
    if isinstance(value, list):
        return tuple(_tuplify(v) for v in value)
    return value


def _build(cls, data: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ValueError(f"unknown keys in '{cls.__name__}': {', '.join(sorted(unknown))}")
    return cls(**{k: _tuplify(v) for k, v in data.items()})


def from_dict(data: dict) -> ScenarioConfig:
    data = dict(data or {})
    base = ScenarioConfig()
    kwargs = {}
    for key, cls in _SECTIONS.items():
        if key not in data:
            continue
        raw = data.pop(key)
        if raw is None:
            kwargs[key] = None
            continue
        merged = {**dataclasses.asdict(getattr(base, key) or cls()), **raw}
        kwargs[key] = _build(cls, merged)
    names = {f.name for f in dataclasses.fields(ScenarioConfig)}
    unknown = set(data) - names
    if unknown:
        raise ValueError(f"unknown top-level keys: {', '.join(sorted(unknown))}")
    kwargs.update(data)
    if kwargs.get("trace") is not None and "workload" not in kwargs:
        kwargs["workload"] = None
    return ScenarioConfig(**kwargs)


def load_config(path) -> ScenarioConfig:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file {p} does not exist")
    try:
        data = yaml.safe_load(p.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ValueError(f"{p}: not valid YAML ({exc})") from None
    if not isinstance(data, dict):
        raise ValueError(f"{p}: top level must be a mapping")
    return from_dict(data)


def dump_config(cfg: ScenarioConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))


def calibrated_preset(**changes) -> ScenarioConfig:
    """Fragmented mixed-length setup tuned so merge-off/merge-on land on the audit targets."""
    cfg = ScenarioConfig(
        pager=PagerConfig(page_bytes=32768, arena_pages=65536, layers=4, kv_head_dim=64,
                          elem_bytes=2, store_payload=False),
        far_view=FarViewConfig(enabled=True, W_star=512, cap=128, sv_chunk=128),
        workload=WorkloadSpec(concurrency=96),
        regime="adversarial-random",
    )
    return cfg.with_(**changes) if changes else cfg


def stress_preset(**changes) -> ScenarioConfig:
    """Calibrated traffic on an arena tight enough that the shaped layout is actually used."""
    base = calibrated_preset()
    cfg = base.with_(pager=dataclasses.replace(base.pager, arena_pages=4096), frag_fraction=0.75)
    return cfg.with_(**changes) if changes else cfg


PRESETS = {"default": ScenarioConfig, "calibrated": calibrated_preset, "stress": stress_preset}
