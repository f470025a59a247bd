"""Scenario files in, report files out.

A scenario is one TOML file.  Top-level keys describe the instance and the
engine; ``[cost]`` overrides cost-model fields; ``[workload]`` describes the
query stream; ``[[snapshot]]``, ``[[os_op]]`` and ``[[error]]`` are lists of
timed events.  Every key is optional except that a scenario without
``[[snapshot]]`` simply never forks.  Unknown keys are rejected.  See
README.md for the full grammar.

Exit codes: 0 success, 2 consistency violation, 3 configuration error.
"""
from __future__ import annotations

import argparse
import csv
import json
import re
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .fork_engines import Engine
from .metrics import throughput_series
from .runner import ErrorPlan, Layout, OsOp, RunResult, Simulation, SnapshotPlan, build, summarize
from .sim_clock import CostModel
from .workload import WorkloadSpec

EXIT_OK, EXIT_INCONSISTENT, EXIT_CONFIG = 0, 2, 3
SWEEP_AXES = ("instance_bytes", "workers", "rate", "clients")

_LAYOUT_INTS = ("vmas", "vma_stride_pages", "page_payload_bytes", "value_bytes", "key_space", "spare_pages",
                "extra_keys")
_TOP_KEYS = {"seed", "engine", "instance_bytes", "workers", "scratch_bytes", "expect_leak", "trace", "output_dir",
             "throughput_window_ns", "verify", "cost", "workload", "snapshot", "os_op", "error", *_LAYOUT_INTS}
_WORKLOAD_KEYS = {"rate", "set_get_ratio", "key_space", "key_dist", "key_mean", "key_stddev", "clients",
                  "total_queries", "arrivals", "start_ns"}
_SNAPSHOT_KEYS = {"at", "engine"}
_OSOP_KEYS = {"at", "kind", "vpage", "key", "pages", "value"}
_ERROR_KEYS = {"phase", "site", "snapshot"}
_UNITS = {"": 1, "B": 1, "KIB": 1 << 10, "MIB": 1 << 20, "GIB": 1 << 30, "KB": 1 << 10, "MB": 1 << 20,
          "GB": 1 << 30}


class ConfigError(ValueError):
    pass


def parse_size(v) -> int:
    if isinstance(v, bool):
        raise ConfigError(f"bad size {v!r}")
    if isinstance(v, int):
        return v
    m = re.fullmatch(r"\s*(\d+)\s*([A-Za-z]*)\s*", str(v))
    if not m or m.group(2).upper() not in _UNITS:
        raise ConfigError(f"bad size {v!r}")
    return int(m.group(1)) * _UNITS[m.group(2).upper()]


def _engine(v) -> Engine:
    for e in Engine:
        if str(v).lower() == e.value.lower():
            return e
    raise ConfigError(f"unknown engine {v!r}; expected one of {[e.value for e in Engine]}")


def _check_keys(section: str, got: dict, allowed: set) -> None:
    extra = set(got) - allowed
    if extra:
        raise ConfigError(f"unknown key(s) in {section}: {sorted(extra)}")


@dataclass
class ScenarioConfig:
    seed: int = 0
    engine: Engine = Engine.ASYNC
    workers: int = 8
    layout: Layout = field(default_factory=Layout)
    cost: CostModel = field(default_factory=CostModel)
    workload: WorkloadSpec | None = None
    snapshots: list[SnapshotPlan] = field(default_factory=list)
    os_ops: list[OsOp] = field(default_factory=list)
    errors: list[ErrorPlan] = field(default_factory=list)
    expect_leak: bool = False
    trace: bool = False
    verify: bool = True
    output_dir: Path = Path("out")
    throughput_window_ns: int = 50_000_000


def parse_config(text: str, base_dir: Path | None = None) -> ScenarioConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"not valid TOML: {exc}") from exc
    try:
        return _build_config(raw, base_dir or Path("."))
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc


def _build_config(raw: dict, base_dir: Path) -> ScenarioConfig:
    _check_keys("top level", raw, _TOP_KEYS)
    layout_kw = {}
    for k in _LAYOUT_INTS:
        if k in raw:
            layout_kw[k] = int(raw[k])
    for k in ("instance_bytes", "scratch_bytes"):
        if k in raw:
            layout_kw[k] = parse_size(raw[k])
    layout = Layout(**layout_kw)
    layout.vma_bounds()  # validates shape early
    cost_raw = raw.get("cost", {})
    if not isinstance(cost_raw, dict):
        raise ConfigError("[cost] must be a table")
    known_cost = {f.name for f in fields(CostModel)}
    _check_keys("[cost]", cost_raw, known_cost)
    cost = CostModel(**{k: float(v) for k, v in cost_raw.items()})
    seed = int(raw.get("seed", 0))
    workload = None
    if "workload" in raw:
        w = raw["workload"]
        _check_keys("[workload]", w, _WORKLOAD_KEYS)
        key_space = int(w.get("key_space", layout.key_space or layout.capacity()))
        workload = WorkloadSpec(
            rate=float(w.get("rate", 50_000)), set_get_ratio=tuple(w.get("set_get_ratio", (1, 0))),
            key_space=key_space, key_dist=w.get("key_dist", "uniform"), key_mean=w.get("key_mean"),
            key_stddev=w.get("key_stddev"), value_bytes=layout.value_bytes, clients=int(w.get("clients", 1)),
            total_queries=int(w.get("total_queries", 10_000)), seed=seed,
            arrivals=w.get("arrivals", "fixed"), start_ns=int(w.get("start_ns", 0)))
        if workload.key_space > (layout.key_space or layout.capacity()):
            raise ConfigError("workload key_space exceeds the keys loaded into the store")
    snaps = []
    for s in raw.get("snapshot", []):
        _check_keys("[[snapshot]]", s, _SNAPSHOT_KEYS)
        snaps.append(SnapshotPlan(int(s["at"]), _engine(s["engine"]) if "engine" in s else None))
    ops = []
    for o in raw.get("os_op", []):
        _check_keys("[[os_op]]", o, _OSOP_KEYS)
        value = o.get("value")
        if value is not None:
            value = bytes.fromhex(value[2:]) if value.startswith("0x") else value.encode()
        ops.append(OsOp(int(o["at"]), o["kind"], o.get("vpage"), o.get("key"), int(o.get("pages", 1)), value))
    errs = []
    for e in raw.get("error", []):
        _check_keys("[[error]]", e, _ERROR_KEYS)
        plan = ErrorPlan(e["phase"], int(e.get("site", 1)), int(e.get("snapshot", 0)))
        plan.injection()  # validates phase/site
        if snaps and not 0 <= plan.snapshot < len(snaps):
            raise ConfigError("error.snapshot does not name a snapshot")
        errs.append(plan)
    out = Path(raw.get("output_dir", "out"))
    return ScenarioConfig(
        seed=seed, engine=_engine(raw.get("engine", "Async")), workers=int(raw.get("workers", 8)),
        layout=layout, cost=cost, workload=workload, snapshots=snaps, os_ops=ops, errors=errs,
        expect_leak=bool(raw.get("expect_leak", False)), trace=bool(raw.get("trace", False)),
        verify=bool(raw.get("verify", True)), output_dir=out if out.is_absolute() else base_dir / out,
        throughput_window_ns=int(raw.get("throughput_window_ns", 50_000_000)))


def load_config(path) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    return parse_config(text, path.parent)


def simulate(cfg: ScenarioConfig) -> RunResult:
    if cfg.workers < 1:
        raise ConfigError("workers must be >= 1")
    extra = (cfg.workload.total_queries if cfg.workload else 0) + sum(o.pages for o in cfg.os_ops) + 64
    built = build(cfg.layout, cfg.cost, extra_pages=extra)
    sim = Simulation(built, cfg.engine, cfg.workload, cfg.snapshots, cfg.workers, cfg.os_ops, cfg.errors,
                     verify=cfg.verify, template=False)
    res = sim.run()
    res.meta["seed"] = cfg.seed
    res.seed = cfg.seed
    return res


def exit_code_for(res: RunResult, expect_leak: bool) -> int:
    verdicts = [r.verdict for r in res.reports]
    if "fail" in verdicts:
        return EXIT_INCONSISTENT
    if "leak" in verdicts and not expect_leak:
        return EXIT_INCONSISTENT
    if res.violations and not expect_leak:
        return EXIT_INCONSISTENT
    return EXIT_OK


def write_reports(res: RunResult, cfg: ScenarioConfig, out_dir: Path) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "latencies.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["query_id", "class", "arrival_ns", "latency_ns"])
        for r in res.latencies.records:
            w.writerow([r.query_id, r.cls.value, r.arrival_ns, r.latency_ns])
    with open(out_dir / "interruptions.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["start_ns", "duration_ns", "cause"])
        for e in res.interruptions.ordered():
            w.writerow([e.start, e.duration, e.cause.value])
    finishes = [c.finish for c in res.cpu.completions]
    with open(out_dir / "throughput.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["window_start_ns", "count"])
        for start, n in throughput_series(finishes, cfg.throughput_window_ns, res.run_end):
            w.writerow([start, n])
    summary = summarize(res, cfg.throughput_window_ns)
    summary["expect_leak"] = cfg.expect_leak
    summary["exit_code"] = exit_code_for(res, cfg.expect_leak)
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if cfg.trace:
        (out_dir / "trace.jsonl").write_text(res.trace.to_jsonl())
    return summary


def run_scenario(config_path, output_dir=None) -> int:
    """Run one scenario file; returns the process exit code."""
    try:
        cfg = load_config(config_path)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if output_dir is not None:
        cfg.output_dir = Path(output_dir)
    try:
        res = simulate(cfg)
    except (ConfigError, ValueError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return write_reports(res, cfg, cfg.output_dir)["exit_code"]


def _with_axis(cfg: ScenarioConfig, axis: str, value) -> ScenarioConfig:
    if axis == "instance_bytes":
        layout = replace(cfg.layout, instance_bytes=parse_size(value), key_space=None)
        wl = cfg.workload and replace(cfg.workload, key_space=min(cfg.workload.key_space, layout.capacity()))
        return replace(cfg, layout=layout, workload=wl)
    if axis == "workers":
        return replace(cfg, workers=int(value))
    if cfg.workload is None:
        raise ConfigError(f"sweeping {axis} needs a [workload] section")
    if axis == "rate":
        return replace(cfg, workload=replace(cfg.workload, rate=float(value)))
    if axis == "clients":
        return replace(cfg, workload=replace(cfg.workload, clients=int(value)))
    raise ConfigError(f"sweep axis must be one of {SWEEP_AXES}")


def sweep(config_path, axis: str, values, output_dir=None) -> list[dict]:
    """One run per value with the same seed; writes per-value report directories and sweep.csv."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {SWEEP_AXES}")
    base = load_config(config_path)
    root = Path(output_dir) if output_dir is not None else base.output_dir
    rows = []
    for v in values:
        cfg = _with_axis(base, axis, v)
        res = simulate(cfg)
        summary = write_reports(res, cfg, root / f"{axis}={v}")
        summary["axis"], summary["value"] = axis, v
        rows.append(summary)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "sweep.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow([axis, "engine", "fork_kernel_ns", "copy_span_ns", "snapshot_p99_ns", "snapshot_max_ns",
                    "interruptions", "out_of_service_ns", "consistency"])
        for s in rows:
            snap = s["snapshots"][0] if s["snapshots"] else {}
            span = snap.get("copy_span_ns")
            lat = s["latency"]["snapshot"] or {}
            w.writerow([s["value"], s["engine"], snap.get("fork_kernel_ns"), span[1] - span[0] if span else "",
                        lat.get("p99_ns", ""), lat.get("max_ns", ""), s["interruptions"]["count"],
                        s["out_of_service_ns"]["total"], s["consistency"]])
    return rows


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="forksim", description=__doc__.split("\n")[0])
    sub = ap.add_subparsers(dest="cmd", required=True)
    r = sub.add_parser("run", help="run one scenario file")
    r.add_argument("config")
    r.add_argument("--out", default=None, help="override output_dir")
    s = sub.add_parser("sweep", help="run a scenario once per axis value")
    s.add_argument("config")
    s.add_argument("--axis", required=True, choices=SWEEP_AXES)
    s.add_argument("--values", required=True, help="comma-separated values")
    s.add_argument("--out", default=None)
    args = ap.parse_args(argv)
    if args.cmd == "run":
        return run_scenario(args.config, args.out)
    try:
        rows = sweep(args.config, args.axis, [v.strip() for v in args.values.split(",") if v.strip()], args.out)
    except (ConfigError, ValueError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    worst = max((s["exit_code"] for s in rows), default=EXIT_OK)
    for s in rows:
        lat = s["latency"]["snapshot"] or {}
        print(f"{s['axis']}={s['value']}: p99={lat.get('p99_ns')} interruptions={s['interruptions']['count']} "
              f"consistency={s['consistency']}")
    return worst
