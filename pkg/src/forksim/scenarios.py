"""Scripted protocol walkthroughs and the reference write-intensive scenario.

The scripted scenarios drive vm_core and fork_engines directly (no
scheduler) and record, step by step, what each process's TLB and PTE say
about the migrated virtual page.  States are rendered the way a protocol
table shows them: ``"V->X"``, ``"V->N"`` (not present) or ``"N/A"``.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np

from .fork_engines import Engine, SnapshotSession, begin_snapshot
from .kv_engine import KvStore, make_value, snapshot_dump
from .runner import Built, Layout, RunResult, Simulation, SnapshotPlan, build
from .sim_clock import CostModel
from .vm_core import Process, World, coherence_audit
from .workload import WorkloadSpec


@dataclass(frozen=True)
class SideState:
    tlb: str
    pte: str


@dataclass(frozen=True)
class Step:
    number: int
    operation: str
    parent: SideState
    child: SideState


@dataclass
class Walkthrough:
    engine: Engine
    steps: list[Step]
    frames: dict[str, int]  # letter -> physical page
    violations: list[tuple[int, int]]
    detector: list[tuple[int, int]]
    dump: dict[int, bytes]
    oracle: dict[int, bytes]
    extra: dict = field(default_factory=dict)

    def table(self) -> list[tuple]:
        """Rows as plain tuples: (step, op, P tlb, P pte, C tlb, C pte)."""
        return [(s.number, s.operation, s.parent.tlb, s.parent.pte, s.child.tlb, s.child.pte) for s in self.steps]


class _Recorder:
    def __init__(self, world: World, vpage: int, parent: Process, child: Process, frames: dict[str, int]):
        self.world, self.vpage, self.parent, self.child = world, vpage, parent, child
        self.frames = frames
        self.steps: list[Step] = []

    def _name(self, p) -> str:
        if p is None:
            return "N/A"
        if p == "N":
            return "V->N"
        for letter, frame in self.frames.items():
            if frame == p:
                return f"V->{letter}"
        letter = "XYZW"[len(self.frames)]
        self.frames[letter] = p
        return f"V->{letter}"

    def side(self, proc: Process) -> SideState:
        return SideState(self._name(proc.tlb.get(self.vpage)), self._name(self.world.pte_state(proc, self.vpage)))

    def record(self, operation: str) -> None:
        self.steps.append(Step(len(self.steps) + 1, operation, self.side(self.parent), self.side(self.child)))


def _small_world(payload_bytes: int = 64) -> tuple[World, Process]:
    world = World(8192, payload_bytes)
    parent = world.spawn()
    # filler VMA first, so an Async worker starting at the fork instant copies it before the heap
    world.add_vma(parent, 0, 512)
    world.map_range(parent, 0, 512)
    world.add_vma(parent, 512, 1024)
    world.map_range(parent, 512, 1024)
    return world, parent


def _kv(world: World, parent: Process, keys: int) -> KvStore:
    return KvStore(world, parent, 512, 1024, keys)


def shared_table_migration(engine: Engine | str = Engine.ODF, overwrite: bool = True) -> Walkthrough:
    """Migrate a page both processes have cached, while the child's snapshot is in flight.

    With ODF the PTE table is shared, so the other-process scan finds the
    already-cleared entry and leaves the child's TLB alone.  With ``overwrite``
    the parent then updates k0; the CoW copy reuses the freed frame and the
    child's stale translation ends up reading the parent's new value.
    """
    engine = Engine(engine)
    world, parent = _small_world()
    kv = _kv(world, parent, 1)
    v0 = make_value(0, 0, 8)
    kv.kv_set(0, v0)
    vpage = int(kv.vpage[0])
    world.read(parent, vpage)
    oracle = kv.oracle_snapshot()
    session = begin_snapshot(world, engine, parent)
    session.meta["kv_index"] = kv.index_copy()
    child = session.child
    world.read(child, vpage)  # child touches V before the migration
    frames = {"X": int(parent.tlb[vpage])}
    rec = _Recorder(world, vpage, parent, child, frames)
    scan: list[str] = []

    def observe(step: int, label: str) -> None:
        if step == 4:
            hits = [r for r in world.trace.records if r["kind"] == "migrate_scan" and r["pid"] == child.pid]
            skipped = bool(hits) and hits[-1]["result"] == "skipped"
            scan.append("skipped" if skipped else "invalidated")
            label = "C: Skipped because N!=X" if skipped else "C: Invalidate and flush TLB"
        rec.record(label)

    world.migrate_page(parent.pid, vpage, observe=observe)
    world.read(parent, vpage)
    world.read(child, vpage)
    rec.record("P&C: Access V")
    violations = coherence_audit(world)
    extra = {"scan": scan[0], "child_pid": child.pid, "vpage": vpage}
    if overwrite:
        v_new = make_value(0, 1, 8)
        kv.kv_set(0, v_new)
        extra["parent_new_value"] = v_new
        extra["parent_frame_after_write"] = world.walk(parent, vpage)
    session.finish()
    return Walkthrough(engine, rec.steps, dict(rec.frames), violations, list(world.detector),
                       snapshot_dump(session), oracle, extra)


def async_migration() -> Walkthrough:
    """Migrate a page the Async child has not copied yet; the child copies the updated PTE."""
    world, parent = _small_world()
    kv = _kv(world, parent, 1)
    v0 = make_value(0, 0, 8)
    kv.kv_set(0, v0)
    vpage = int(kv.vpage[0])
    world.read(parent, vpage)
    oracle = kv.oracle_snapshot()
    session = begin_snapshot(world, Engine.ASYNC, parent, workers=1)
    session.meta["kv_index"] = kv.index_copy()
    child = session.child
    rec = _Recorder(world, vpage, parent, child, {"X": int(parent.tlb[vpage])})
    labels = {1: "Initial state", 2: "P: Set PTE -> None present", 3: "P: Flush TLB", 5: "P: Update PTE"}

    def observe(step: int, label: str) -> None:
        if step in labels:
            rec.record(labels[step])

    world.migrate_page(parent.pid, vpage, observe=observe)
    syncs = len(session.sync_log)
    target = vpage >> 9
    while target in session.uncopied:
        session.advance(max(w.clock for w in session._workers if not w.finished))
    rec.record("C: Copy PTE")
    world.read(parent, vpage)
    world.read(child, vpage)
    rec.record("P&C: Access V")
    violations = coherence_audit(world)
    session.finish()
    return Walkthrough(Engine.ASYNC, rec.steps, dict(rec.frames), violations, list(world.detector),
                       snapshot_dump(session), oracle, {"syncs_during_migration": syncs, "vpage": vpage})


@dataclass
class NewKeyResult:
    session: SnapshotSession
    dump: dict[int, bytes]
    oracle: dict[int, bytes]
    syncs: int
    parent_after: dict[int, bytes]
    child_row: bytes
    parent_row: bytes


def new_key_during_copy() -> NewKeyResult:
    """Two keys exist at the fork; a third is set while the child is still copying."""
    world, parent = _small_world()
    kv = _kv(world, parent, 3)
    kv.kv_set(0, make_value(0, 0, 8))
    kv.kv_set(1, make_value(1, 0, 8))
    oracle = kv.oracle_snapshot()
    session = begin_snapshot(world, Engine.ASYNC, parent, workers=1)
    session.meta["kv_index"] = kv.index_copy()
    kv.kv_set(2, make_value(2, 0, 8))
    syncs = len(session.sync_log)
    vpage = int(kv.vpage[2])
    child_row = world.read(session.child, vpage)
    session.finish()
    return NewKeyResult(session, snapshot_dump(session), oracle, syncs,
                        {k: kv.kv_get(k) for k in range(3)}, child_row, world.read(parent, vpage))


# -- reference write-intensive scenario -----------------------------------------
REFERENCE_COST = CostModel().replace(persist_per_page=20e6 / 2**21, service_time=10_000.0)
REFERENCE_LAYOUT = Layout(instance_bytes=8 << 30, vmas=8, spare_pages=8192)
REFERENCE_FORK_AT = 2_000_000


def reference_workload(seed: int, total_queries: int = 2500) -> WorkloadSpec:
    return WorkloadSpec(rate=50_000, key_space=2**21, total_queries=total_queries, seed=seed)


@functools.lru_cache(maxsize=4)
def reference_built(workers_extra: int = 0) -> Built:
    return build(REFERENCE_LAYOUT, REFERENCE_COST, extra_pages=8192 + workers_extra)


def reference_run(engine: Engine | str, seed: int, workers: int = 8, verify: bool = False,
                  total_queries: int = 2500) -> RunResult:
    """One run on a private copy of the cached 8 GiB-shape world."""
    return Simulation(reference_built(), engine, reference_workload(seed, total_queries),
                      [SnapshotPlan(REFERENCE_FORK_AT)], workers=workers, verify=verify).run()


def distinct_tables(keys: np.ndarray, values_per_page: int = 1) -> int:
    """PTE tables a key sequence touches when keys are laid out densely one page apart."""
    return len(np.unique(np.asarray(keys) // values_per_page // 512))


# -- randomized consistency cases ------------------------------------------------
_ENGINES = (Engine.DEFAULT, Engine.ODF, Engine.ASYNC)


@dataclass(frozen=True)
class RandomCase:
    seed: int
    engine: Engine
    layout: Layout
    cost: CostModel
    workload: WorkloadSpec
    snapshots: tuple[SnapshotPlan, ...]
    os_ops: tuple
    workers: int


def random_case(seed: int) -> RandomCase:
    """A small write-intensive scenario with random shape, timing and OS interference.

    Engines rotate with the seed.  ODF cases never migrate pages (a migration
    under a shared PTE table is the known leak, exercised separately).  Unmaps
    only touch the scratch VMA so that keys stay addressable.
    """
    from .runner import OsOp

    rng = np.random.default_rng(seed)
    engine = _ENGINES[seed % 3]
    mib = int(rng.choice([1, 2, 4, 8, 16]))
    vmas = int(rng.integers(1, 9))
    layout = Layout(instance_bytes=mib << 20, vmas=vmas, scratch_bytes=int(rng.integers(1, 5)) * 512 * 4096,
                    spare_pages=512, vma_stride_pages=None if rng.random() < 0.5 else (mib << 8) // vmas + 700)
    cost = CostModel().replace(persist_per_page=float(rng.uniform(200, 2000)), service_time=10_000.0)
    n_q = int(rng.integers(100, 300))
    ratio = (1, 0) if rng.random() < 0.6 else (3, 1)
    workload = WorkloadSpec(rate=50_000, set_get_ratio=ratio, key_space=layout.capacity(),
                            key_dist="uniform" if rng.random() < 0.7 else "gaussian", total_queries=n_q, seed=seed)
    horizon = n_q * 20_000
    n_snap = 1 if rng.random() < 0.8 else 2
    snaps = tuple(SnapshotPlan(int(t)) for t in sorted(rng.integers(0, horizon // 2, n_snap)))
    s_lo, s_hi = layout.scratch_bounds()
    kinds = ["protect", "oom", "gup", "child_read", "unmap", "set", "get"]
    if engine != Engine.ODF:
        kinds.append("migrate")
    ops = []
    for _ in range(int(rng.integers(0, 8))):
        kind = str(rng.choice(kinds))
        at = int(rng.integers(0, horizon))
        key = int(rng.integers(0, layout.capacity()))
        if kind == "unmap":
            lo = int(rng.integers(s_lo, s_hi))
            ops.append(OsOp(at, kind, vpage=lo, pages=int(rng.integers(1, min(64, s_hi - lo) + 1))))
        else:
            ops.append(OsOp(at, kind, key=key))
    return RandomCase(seed, engine, layout, cost, workload, snaps, tuple(ops), int(rng.integers(1, 9)))


def run_random_case(case: RandomCase) -> RunResult:
    extra = case.workload.total_queries + 256
    built = build(case.layout, case.cost, extra_pages=extra)
    return Simulation(built, case.engine, case.workload, list(case.snapshots), workers=case.workers,
                      os_ops=list(case.os_ops), verify=True, template=False).run()
