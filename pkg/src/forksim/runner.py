"""Wires a world, a KV store, a query stream and snapshot triggers onto one timeline.

The parent is a single FIFO server (see :class:`~forksim.sim_clock.ParentCpu`).
Queries, snapshot triggers and parent-side OS operations are jobs on it; page
migration and child-side reads happen outside the parent and run as plain
scheduler events.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from functools import partial

import numpy as np

from .fork_engines import Engine, ErrorInjection, Phase, SnapshotSession, begin_snapshot
from .kv_engine import KvStore, make_value
from .metrics import InterruptionLog, LatencyLog, LatencyRecord, QueryClass, interruption_histogram
from .sim_clock import PT_COPY_CAUSES, Cause, CostModel, EventKind, Job, ManualClock, ParentCpu, Scheduler, Trace
from .vm_core import PAGE_BYTES, Process, VmError, World, coherence_audit
from .workload import QueryStream, WorkloadSpec, generate

PARENT_JOB_OPS = {"unmap", "protect", "oom", "gup", "set", "get"}
DIRECT_OPS = {"migrate", "child_read"}
OS_OP_KINDS = PARENT_JOB_OPS | DIRECT_OPS


@dataclass(frozen=True)
class SnapshotPlan:
    at: int
    engine: Engine | None = None  # None: the scenario's engine


@dataclass(frozen=True)
class OsOp:
    at: int
    kind: str
    vpage: int | None = None
    key: int | None = None
    pages: int = 1
    value: bytes | None = None

    def __post_init__(self):
        if self.kind not in OS_OP_KINDS:
            raise ValueError(f"unknown os_op kind {self.kind!r}")
        if self.vpage is None and self.key is None:
            raise ValueError("os_op needs a vpage or a key")


@dataclass(frozen=True)
class ErrorPlan:
    phase: str
    site: int = 1
    snapshot: int = 0  # index into the snapshot list

    def injection(self) -> ErrorInjection:
        return ErrorInjection(self.phase, self.site)


@dataclass(frozen=True)
class Layout:
    """Address-space shape: heap VMAs, an optional scratch VMA, and the KV population."""

    instance_bytes: int = 64 << 20
    vmas: int = 8
    vma_stride_pages: int | None = None
    page_payload_bytes: int = 8
    scratch_bytes: int = 0
    value_bytes: int = 8
    key_space: int | None = None  # default: fill the heap
    spare_pages: int = 4096
    extra_keys: int = 0  # index room for keys first set after the load

    @property
    def heap_pages(self) -> int:
        if self.instance_bytes <= 0 or self.instance_bytes % PAGE_BYTES:
            raise ValueError("instance_bytes must be a positive multiple of 4096")
        return self.instance_bytes // PAGE_BYTES

    def vma_bounds(self) -> list[tuple[int, int]]:
        n, k = self.heap_pages, self.vmas
        if not 1 <= k <= n:
            raise ValueError("need 1 <= vmas <= heap pages")
        sizes = [n // k + (1 if i < n % k else 0) for i in range(k)]
        out, cursor = [], 0
        for i, sz in enumerate(sizes):
            start = i * self.vma_stride_pages if self.vma_stride_pages else cursor
            if self.vma_stride_pages and sz > self.vma_stride_pages:
                raise ValueError("vma_stride_pages smaller than a VMA")
            out.append((start, start + sz))
            cursor = start + sz
        return out

    def scratch_bounds(self) -> tuple[int, int] | None:
        if not self.scratch_bytes:
            return None
        if self.scratch_bytes % PAGE_BYTES:
            raise ValueError("scratch_bytes must be a multiple of 4096")
        end = self.vma_bounds()[-1][1]
        start = -(-end // 512) * 512 + 512
        return start, start + self.scratch_bytes // PAGE_BYTES

    def capacity(self) -> int:
        return self.heap_pages * (self.page_payload_bytes // self.value_bytes)


@dataclass
class Built:
    world: World
    parent: Process
    kv: KvStore
    layout: Layout


def build(layout: Layout, cost: CostModel | None = None, extra_pages: int = 0) -> Built:
    """Map the heap, fill the KV store with version-0 values for keys [0, key_space)."""
    if layout.value_bytes > layout.page_payload_bytes:
        raise ValueError("value_bytes exceeds page_payload_bytes")
    heap = layout.heap_pages
    scratch = layout.scratch_bounds()
    scratch_pages = 0 if scratch is None else scratch[1] - scratch[0]
    n_phys = heap + scratch_pages + layout.spare_pages + extra_pages
    est_tables = 3 * (-(-(heap + scratch_pages) // 512)) + 4 * layout.vmas + 64
    world = World(n_phys, layout.page_payload_bytes, cost or CostModel(), ManualClock(), est_tables)
    parent = world.spawn()
    for lo, hi in layout.vma_bounds():
        world.add_vma(parent, lo, hi)
        world.map_range(parent, lo, hi)
    if scratch is not None:
        world.add_vma(parent, *scratch)
        world.map_range(parent, *scratch)
    keys = layout.capacity() if layout.key_space is None else layout.key_space
    if keys > layout.capacity():
        raise ValueError("key_space does not fit in the heap")
    bounds = layout.vma_bounds()
    kv = KvStore(world, parent, bounds[0][0], bounds[-1][1], keys + layout.extra_keys)
    if layout.vma_stride_pages:
        # strided heap: fill each VMA separately so no value lands in a gap
        per_page = layout.page_payload_bytes // layout.value_bytes
        cursor = 0
        for lo, hi in bounds:
            take = min(keys - cursor, (hi - lo) * per_page)
            if take <= 0:
                break
            kv._page, kv._off = lo, 0
            kv.load(np.arange(cursor, cursor + take), layout.value_bytes)
            cursor += take
    elif keys:
        kv.load(np.arange(keys), layout.value_bytes)
    return Built(world, parent, kv, layout)


@dataclass
class SessionReport:
    session: SnapshotSession
    invoked: int
    oracle_vpages: np.ndarray | None = None
    oracle_rows: np.ndarray | None = None
    verdict: str = "pending"

    @property
    def window(self) -> tuple[int, int]:
        s = self.session
        if s.phase == Phase.DONE:
            end = s.persist_end
        elif s.phase == Phase.ABORTED:
            end = s.copy_end if s.copy_end is not None else s.fork_end
        else:
            end = s.persist_end if s.persist_end is not None else s.fork_end
        return self.invoked, int(end if end is not None else self.invoked)


@dataclass
class RunResult:
    engine: Engine
    seed: int
    built: Built
    stream: QueryStream
    cpu: ParentCpu
    trace: Trace
    reports: list[SessionReport]
    latencies: LatencyLog
    interruptions: InterruptionLog
    violations: list[tuple[int, int]]
    run_end: int
    meta: dict = field(default_factory=dict)

    @property
    def world(self) -> World:
        return self.built.world

    def interruption_count(self, causes=PT_COPY_CAUSES) -> int:
        return self.interruptions.count(causes)

    def consistency(self) -> str:
        verdicts = [r.verdict for r in self.reports if r.verdict not in ("aborted", "pending", "unchecked")]
        if not verdicts:
            return "n/a"
        if "fail" in verdicts:
            return "fail"
        if "leak" in verdicts:
            return "leak"
        return "pass"


class Simulation:
    """One run of one scenario on a private copy of a pre-built world."""

    def __init__(self, built: Built, engine: Engine | str, workload: WorkloadSpec | None,
                 snapshots: list[SnapshotPlan], workers: int = 8, os_ops: list[OsOp] = (),
                 errors: list[ErrorPlan] = (), service_ns: int | None = None, verify: bool = True,
                 template: bool = True):
        self.built = copy.deepcopy(built) if template else built
        self.engine = Engine(engine)
        self.workload = workload
        self.snapshots = sorted(snapshots, key=lambda s: s.at)
        self.workers = workers
        self.os_ops = list(os_ops)
        self.errors = {e.snapshot: e for e in errors}
        self.verify = verify
        self.trace = Trace()
        self.sched = Scheduler(self.trace)
        w = self.built.world
        self.cpu = ParentCpu(self.sched, self.built.parent.pid)
        w.clock, w.trace = self.cpu, self.trace
        self.service = w.cost.service() if service_ns is None else int(service_ns)
        self.reports: list[SessionReport] = []
        self.stream = generate(workload) if workload is not None else QueryStream(
            np.zeros(0, np.int64), np.zeros(0, bool), np.zeros(0, np.int64), np.zeros(0, np.int32))

    # -- jobs ---------------------------------------------------------------
    def _query(self, i: int) -> int:
        kv, st = self.built.kv, self.stream
        key = int(st.keys[i])
        if st.is_set[i]:
            kv.kv_set(key, make_value(key, i + 1, self.workload.value_bytes))
        else:
            kv.kv_get(key)
        return self.service

    def _arrive(self, i: int) -> None:
        self.cpu.submit(Job(int(self.stream.times[i]), partial(self._query, i), query_id=i))

    def _snapshot(self, k: int, plan: SnapshotPlan) -> int:
        b = self.built
        invoked = self.cpu.now
        rep = SessionReport(None, invoked)
        if self.verify:
            rep.oracle_vpages, rep.oracle_rows = b.world.snapshot_image(b.parent)
        index = b.kv.index_copy()
        err = self.errors.get(k)
        s = begin_snapshot(b.world, plan.engine or self.engine, b.parent, self.workers,
                           err.injection() if err else None, self.sched, capture_dump=self.verify)
        s.meta["kv_index"] = index
        rep.session = s
        s.on_done.append(partial(self._verify, rep))
        if s.phase == Phase.ABORTED:
            rep.verdict = "aborted"
        self.reports.append(rep)
        return 0

    def _verify(self, rep: SessionReport, s: SnapshotSession) -> None:
        if not self.verify:
            rep.verdict = "unchecked"
            return
        same = (np.array_equal(rep.oracle_vpages, s.persist_vpages)
                and np.array_equal(rep.oracle_rows, s.dump_rows))
        flagged = any(pid == s.child_pid for pid, _ in self.built.world.detector)
        if same:
            rep.verdict = "pass"
        elif s.engine == Engine.ODF and flagged:
            rep.verdict = "leak"
        else:
            rep.verdict = "fail"
        self.trace.add(s.persist_end, "verdict", child=s.child_pid, verdict=rep.verdict)

    def _resolve_vpage(self, op: OsOp) -> int:
        if op.vpage is not None:
            return op.vpage
        return int(self.built.kv.vpage[op.key])

    def _parent_op(self, op: OsOp) -> int:
        try:
            return self._apply_parent_op(op)
        except VmError as exc:
            # a rejected syscall: nothing changed, the run goes on
            self.trace.add(self.cpu.now, "os_op_failed", op=op.kind, error=str(exc))
            return 0

    def _apply_parent_op(self, op: OsOp) -> int:
        w, p, kv = self.built.world, self.built.parent, self.built.kv
        if op.kind == "set":
            kv.kv_set(op.key, op.value or make_value(op.key, 1 << 20, self.built.layout.value_bytes))
            return 0
        if op.kind == "get":
            kv.kv_get(op.key)
            return 0
        v = self._resolve_vpage(op)
        if op.kind == "unmap":
            w.unmap_range(p, v, v + op.pages)
        elif op.kind == "protect":
            w.protect_range(p, v, v + op.pages)
        elif op.kind == "oom":
            for u in range(v, v + op.pages):
                w.oom_reclaim(p, u)
        elif op.kind == "gup":
            w.get_user_page(p, v)
        return 0

    def _direct_op(self, op: OsOp) -> None:
        try:
            self._apply_direct_op(op)
        except VmError as exc:
            self.trace.add(self.sched.now, "os_op_failed", op=op.kind, error=str(exc))

    def _apply_direct_op(self, op: OsOp) -> None:
        w, p = self.built.world, self.built.parent
        v = self._resolve_vpage(op)
        if op.kind == "migrate":
            if w.walk(p, v) is not None:
                w.migrate_page(p.pid, v)
        else:
            live = [r.session.child for r in self.reports if r.session.child is not None and r.session.child.alive]
            if live:
                w.read(live[-1], v)

    # -- run ----------------------------------------------------------------
    def run(self) -> RunResult:
        sched = self.sched
        for i in range(len(self.stream)):
            sched.at(int(self.stream.times[i]), EventKind.QUERY_ARRIVAL, partial(self._arrive, i))
        for k, plan in enumerate(self.snapshots):
            sched.at(plan.at, EventKind.OS_OP, partial(
                lambda k, plan: self.cpu.submit(Job(plan.at, partial(self._snapshot, k, plan), label="snapshot")),
                k, plan))
        for op in self.os_ops:
            if op.kind in DIRECT_OPS:
                sched.at(op.at, EventKind.OS_OP, partial(self._direct_op, op))
            else:
                sched.at(op.at, EventKind.OS_OP, partial(
                    lambda op: self.cpu.submit(Job(op.at, partial(self._parent_op, op), label=op.kind)), op))
        sched.run_until(None)
        return self._result()

    def _classify(self) -> LatencyLog:
        windows = [r.window for r in self.reports]
        recs = []
        for c in sorted(self.cpu.completions, key=lambda c: c.query_id):
            snap = any(lo <= c.arrival <= hi for lo, hi in windows)
            recs.append(LatencyRecord(c.query_id, QueryClass.SNAPSHOT if snap else QueryClass.NORMAL,
                                      c.arrival, c.finish - c.arrival))
        return LatencyLog(recs)

    def _result(self) -> RunResult:
        log = InterruptionLog()
        for ep in self.cpu.episodes:
            log.add(ep)
        w = self.built.world
        violations = sorted(set(w.detector) | set(coherence_audit(w)))
        end = max([self.sched.now, self.cpu.free_at] + [c.finish for c in self.cpu.completions])
        return RunResult(self.engine, self.workload.seed if self.workload else 0, self.built, self.stream,
                         self.cpu, self.trace, self.reports, self._classify(), log, violations, end)


def summarize(res: RunResult, window_ns: int = 50_000_000) -> dict:
    """The summary.json payload."""
    lat = res.latencies

    def stats(cls):
        v = lat.latencies(cls)
        if not len(v):
            return None
        from .metrics import percentile
        return {"count": int(len(v)), "p50_ns": percentile(v, 0.5), "p99_ns": percentile(v, 0.99),
                "max_ns": percentile(v, 1.0)}

    log = res.interruptions
    oos = {c.value: log.total([c]) for c in Cause}
    oos["total"] = log.total()
    hist = interruption_histogram(e.duration for e in log.select(PT_COPY_CAUSES))
    snaps = []
    for r in res.reports:
        s = r.session
        snaps.append({
            "engine": s.engine.value, "invoked_ns": r.invoked, "fork_end_ns": s.fork_end,
            "fork_kernel_ns": s.kernel_time, "phase": s.phase.value,
            "copy_span_ns": list(s.copy_span) if s.copy_span else None,
            "persist_start_ns": s.persist_start, "persist_end_ns": s.persist_end,
            "proactive_syncs": len(s.sync_log), "rollback": s.rollback_case.value if s.rollback_case else None,
            "error": s.error, "verdict": r.verdict,
        })
    return {
        "engine": res.engine.value,
        "seed": res.seed,
        "queries": {"normal": lat.count(QueryClass.NORMAL), "snapshot": lat.count(QueryClass.SNAPSHOT)},
        "latency": {"normal": stats(QueryClass.NORMAL), "snapshot": stats(QueryClass.SNAPSHOT)},
        "out_of_service_ns": oos,
        "interruptions": {
            "count": log.count(PT_COPY_CAUSES),
            "by_cause": {c.value: log.count([c]) for c in Cause},
            "histogram_us": {f"{lo}-{hi}": n for (lo, hi), n in hist.items() if n},
        },
        "snapshots": snaps,
        "consistency": res.consistency(),
        "coherence_violations": len(res.violations),
        "run_end_ns": res.run_end,
    }
