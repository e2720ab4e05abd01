"""Command-line scenario runner: run, sweep, attribution, replay, audit."""
from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from .config import PRESETS, ScenarioConfig, dump_config, load_config
from .errors import InvariantViolation, KvrmError
from .metrics import (
    aggregate,
    attribution_table,
    format_table,
    report_row,
    write_report,
    write_reports,
    write_timeseries,
)
from .scenario import load_events, run_scenario
from .sim import write_records


def _on_off(value: str) -> bool:
    v = value.lower()
    if v not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return v == "on"


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kvrm", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML scenario file")
    common.add_argument("--preset", choices=sorted(PRESETS), help="built-in scenario preset")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", type=Path)
    common.add_argument("--merge", type=_on_off, metavar="on|off")
    common.add_argument("--far-view", type=_on_off, metavar="on|off", dest="far_view")
    common.add_argument("--regime")
    common.add_argument("--steps", type=int, help="measured steps after warm-up")
    common.add_argument("--warmup", type=int)
    common.add_argument("--concurrency", type=int)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="one simulation, report and records")
    sw = sub.add_parser("sweep", parents=[common], help="one run per axis value")
    sw.add_argument("--axis", choices=("concurrency", "regime", "cap"), default="concurrency")
    sw.add_argument("--values", help="comma-separated axis values (default: from config)")
    sub.add_parser("attribution", parents=[common], help="four-row mechanism ladder")
    rp = sub.add_parser("replay", parents=[common], help="replay the busiest window of a trace")
    rp.add_argument("--trace", type=Path, required=True)
    rp.add_argument("--seconds", type=float, default=60.0)
    sub.add_parser("audit", parents=[common], help="invariant audits only, no report files")
    return p


def resolve_config(args) -> ScenarioConfig:
    if args.config and args.preset:
        raise ValueError("use either --config or --preset, not both")
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = PRESETS[args.preset or "default"]()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["out"] = str(args.out)
    if args.regime is not None:
        changes["regime"] = args.regime
    if args.steps is not None:
        changes["steps"] = args.steps
    if args.warmup is not None:
        changes["warmup"] = args.warmup
    if args.merge is not None:
        changes["transport"] = dataclasses.replace(cfg.transport, merge=args.merge)
    if args.far_view is not None:
        changes["far_view"] = dataclasses.replace(cfg.far_view, enabled=args.far_view)
    if args.concurrency is not None:
        if cfg.workload is None:
            raise ValueError("--concurrency needs a generated workload")
        changes["workload"] = dataclasses.replace(cfg.workload, concurrency=args.concurrency)
    return cfg.with_(**changes) if changes else cfg


def _execute(cfg: ScenarioConfig, label: str, events=None, write_to: Path | None = None):
    res = run_scenario(cfg, events)
    rep = aggregate(res.records, cfg.warmup, label=label, workload_hash=res.workload_hash,
                    audit=res.audit)
    if write_to is not None:
        write_to.mkdir(parents=True, exist_ok=True)
        write_report(rep, write_to / "report.json")
        write_timeseries(rep, write_to / "timeseries.csv")
        write_records(res.records, write_to / "records.ndjson")
        dump_config(cfg, write_to / "config.yaml")
    return rep


def cmd_run(cfg, args) -> int:
    out = Path(cfg.out)
    rep = _execute(cfg, "run", write_to=out)
    print(format_table([report_row(rep)]))
    print(f"report written to {out / 'report.json'}")
    return 0


def _axis_values(cfg, args) -> list:
    if args.values:
        raw = [v.strip() for v in args.values.split(",") if v.strip()]
    elif args.axis == "concurrency":
        raw = list(cfg.sweep.concurrency)
    elif args.axis == "regime":
        raw = list(cfg.sweep.regimes)
    else:
        raw = list(cfg.sweep.caps)
    if not raw:
        raise ValueError("sweep axis is empty")
    return raw if args.axis == "regime" else [int(v) for v in raw]


def sweep_configs(cfg: ScenarioConfig, axis: str, values) -> list[tuple[str, ScenarioConfig]]:
    runs = []
    for v in values:
        if axis == "concurrency":
            runs.append((f"B={v}", cfg.with_(workload=dataclasses.replace(cfg.workload,
                                                                          concurrency=v))))
        elif axis == "cap":
            fv = dataclasses.replace(cfg.far_view, enabled=True, cap=v)
            runs.append((f"cap={v}", cfg.with_(far_view=fv)))
        else:
            for merge in (False, True):
                tr = dataclasses.replace(cfg.transport, merge=merge)
                runs.append((f"{v}/merge-{'on' if merge else 'off'}",
                             cfg.with_(regime=v, transport=tr)))
    return runs


def cmd_sweep(cfg, args) -> int:
    values = _axis_values(cfg, args)
    out = Path(cfg.out)
    events = None if args.axis == "concurrency" else load_events(cfg)
    reports = []
    for label, c in sweep_configs(cfg, args.axis, values):
        safe = label.replace("/", "_").replace("=", "")
        reports.append(_execute(c, label, events, out / safe))
    write_reports(reports, out / "sweep.json")
    table = format_table([report_row(r) for r in reports])
    (out / "sweep.txt").write_text(table + "\n")
    print(table)
    if args.axis == "concurrency":
        bad = [r.label for r in reports if r.audit.get("multi_commit_steps")]
        if bad:
            print(f"multi-commit steps observed in {', '.join(bad)}", file=sys.stderr)
            return 2
    return 0


def attribution_configs(cfg: ScenarioConfig) -> list[tuple[str, ScenarioConfig]]:
    off = dataclasses.replace(cfg.transport, merge=False)
    on = dataclasses.replace(cfg.transport, merge=True)
    fv_off = dataclasses.replace(cfg.far_view, enabled=False)
    fv_on = dataclasses.replace(cfg.far_view, enabled=True)
    return [
        ("baseline", cfg.with_(static_arena=True, transport=off, far_view=fv_off)),
        ("+pager", cfg.with_(static_arena=False, transport=off, far_view=fv_off)),
        ("+pager+merge", cfg.with_(static_arena=False, transport=on, far_view=fv_off)),
        ("+far-view", cfg.with_(static_arena=False, transport=on, far_view=fv_on)),
    ]


def cmd_attribution(cfg, args) -> int:
    out = Path(cfg.out)
    events = load_events(cfg)
    reports = [_execute(c, label, events, out / label.strip("+").replace("+", "_"))
               for label, c in attribution_configs(cfg)]
    rows = attribution_table(reports)
    write_reports(reports, out / "attribution.json")
    table = format_table(rows)
    (out / "attribution.txt").write_text(table + "\n")
    print(table)
    return 0


def cmd_replay(cfg, args) -> int:
    cfg = cfg.with_(trace=str(args.trace), workload=None, replay_seconds=args.seconds)
    return cmd_run(cfg, args)


def cmd_audit(cfg, args) -> int:
    cfg = cfg.with_(audit_every=cfg.audit_every or 100)
    res = run_scenario(cfg)
    a = res.audit
    print(" ".join(f"{k}={v}" for k, v in sorted(a.items())))
    return 0


COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "attribution": cmd_attribution,
            "replay": cmd_replay, "audit": cmd_audit}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
    except (ValueError, FileNotFoundError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    try:
        return COMMANDS[args.command](cfg, args)
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return 2
    except KvrmError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
