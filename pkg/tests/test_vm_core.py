import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from forksim.fork_engines import fork_default, fork_odf
from forksim.sim_clock import Cause
from forksim.vm_core import (PGD, PMD, PTE, PUD, CheckpointEvent, CheckpointOp, OutOfPhysMem, PhysMem,
                             TableStore, UnmappedAddress, VmError, World, coherence_audit, pmd_of,
                             refcount_audit, structure_audit, table_shape)

from . import oracles


def world_with(pages=1024, n_phys=4096, payload=16):
    w = World(n_phys, payload)
    p = w.spawn()
    w.add_vma(p, 0, pages)
    w.map_range(p, 0, pages)
    return w, p


def clean(w):
    return not refcount_audit(w) and not structure_audit(w)


class TestTableShape:
    def test_8g_shape(self):
        assert table_shape(8 << 30) == oracles.SHAPE_8G

    def test_64g_shape(self):
        assert table_shape(64 << 30) == oracles.SHAPE_64G

    def test_rounds_partial_tables_up(self):
        assert table_shape(4096 * 513) == (1, 1, 2, 513)

    def test_rejects_non_page_multiple(self):
        with pytest.raises(ValueError):
            table_shape(4097)


class TestPhysMem:
    def test_initial_pops_are_ascending(self):
        m = PhysMem(8, 4)
        assert [m.alloc() for _ in range(3)] == [0, 1, 2]

    def test_lifo_reuse(self):
        m = PhysMem(8, 4)
        a, b = m.alloc(), m.alloc()
        m.put(a)
        assert m.alloc() == a

    def test_freed_page_keeps_payload(self):
        m = PhysMem(4, 4)
        p = m.alloc()
        m.payload[p] = 7
        m.put(p)
        assert (m.payload[p] == 7).all()

    def test_exhaustion(self):
        m = PhysMem(2, 4)
        m.alloc_many(2)
        with pytest.raises(OutOfPhysMem):
            m.alloc()

    def test_take_specific_page(self):
        m = PhysMem(8, 4)
        assert m.take(5) == 5 and 5 not in m.free_list
        with pytest.raises(ValueError):
            m.take(5)

    def test_put_below_zero_rejected(self):
        m = PhysMem(4, 4)
        with pytest.raises(VmError):
            m.put(0)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.integers(0, 63), min_size=1, max_size=300))
    def test_bulk_refcount_matches_counting(self, pages):
        m = PhysMem(64, 1)
        m.alloc_many(64)
        arr = np.array(pages, dtype=np.int64)
        m.get_many(arr)
        expect = 1 + np.bincount(arr, minlength=64)
        assert (m.refcount == expect).all()


class TestTableStore:
    def test_limit_raises(self):
        ts = TableStore(8, limit=2)
        ts.alloc(PGD)
        ts.alloc(PUD)
        with pytest.raises(OutOfPhysMem):
            ts.alloc(PMD)

    def test_free_then_reuse(self):
        ts = TableStore(8)
        t = ts.alloc(PTE)
        ts.free(t)
        assert ts.alloc(PMD) == t and ts.level[t] == PMD

    def test_grows(self):
        ts = TableStore(8)
        ids = ts.alloc_many(PTE, 100)
        assert len(set(ids.tolist())) == 100 and ts.live == 100


class TestMapping:
    def test_walk_after_map(self):
        w, p = world_with(600)
        frames = [w.walk(p, v) for v in range(600)]
        assert frames == list(range(600))

    def test_pmd_of(self):
        assert pmd_of(511) == 0 and pmd_of(512) == 1

    def test_map_outside_vma(self):
        w, p = world_with(10)
        with pytest.raises(UnmappedAddress):
            w.map_range(p, 5, 20)

    def test_double_map_rejected(self):
        w, p = world_with(10)
        with pytest.raises(ValueError):
            w.map_range(p, 0, 1)

    def test_overlapping_vma_rejected(self):
        w, p = world_with(10)
        with pytest.raises(ValueError):
            w.add_vma(p, 5, 15)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 1500), st.integers(1, 2000), st.data())
    def test_map_range_matches_per_page_walk(self, start, length, data):
        w = World(5000, 4)
        p = w.spawn()
        w.add_vma(p, start, start + length)
        lo = data.draw(st.integers(start, start + length - 1))
        hi = data.draw(st.integers(lo + 1, start + length))
        pages = w.map_range(p, lo, hi)
        got = [w.walk(p, v) for v in range(start, start + length)]
        assert got == [int(pages[v - lo]) if lo <= v < hi else None for v in range(start, start + length)]
        assert clean(w)

    def test_level_discipline(self):
        w, p = world_with(2000)
        assert structure_audit(w) == []


class TestReadWrite:
    def test_read_fills_tlb(self):
        w, p = world_with(4)
        w.read(p, 2)
        assert p.tlb == {2: 2}

    def test_demand_zero_fault(self):
        w = World(16, 4)
        p = w.spawn()
        w.add_vma(p, 0, 8)
        assert w.read(p, 3) == bytes(4)
        assert w.clock.kernel_total(Cause.DATA_PAGE_FAULT) == w.cost.fault()

    def test_read_unmapped_address(self):
        w, p = world_with(4)
        with pytest.raises(UnmappedAddress):
            w.read(p, 100)

    def test_write_then_read(self):
        w, p = world_with(4)
        w.write(p, 1, b"abc", 2)
        assert w.read(p, 1)[2:5] == b"abc"

    def test_write_crossing_payload(self):
        w, p = world_with(4, payload=8)
        with pytest.raises(ValueError):
            w.write(p, 0, b"123456", 4)

    def test_cow_after_default_fork(self):
        w, p = world_with(8)
        w.write(p, 0, b"old")
        child, _ = fork_default(w, p)
        out = w.write(p, 0, b"new")
        assert out.kind == "cow"
        assert w.read(child, 0)[:3] == b"old" and w.read(p, 0)[:3] == b"new"
        assert clean(w)

    def test_write_after_child_exit_reuses(self):
        w, p = world_with(8)
        child, _ = fork_default(w, p)
        w.exit_process(child)
        assert w.write(p, 0, b"x").kind == "reuse"
        assert clean(w)

    def test_dead_process(self):
        w, p = world_with(4)
        w.exit_process(p)
        with pytest.raises(VmError):
            w.read(p, 0)


class TestOsOps:
    def test_unmap_splits_vma(self):
        w, p = world_with(100)
        assert w.unmap_range(p, 40, 60) == 20
        assert [(v.start, v.end) for v in p.vmas] == [(0, 40), (60, 100)]
        assert w.walk(p, 50) is None and clean(w)

    def test_unmap_pieces_share_peer_link(self):
        w, p = world_with(100)
        w.unmap_range(p, 40, 60)
        assert p.vmas[0].peer is p.vmas[1].peer

    def test_unmap_uncovered(self):
        w, p = world_with(10)
        with pytest.raises(UnmappedAddress):
            w.unmap_range(p, 5, 20)

    def test_protect_then_write_reuses(self):
        w, p = world_with(10)
        assert w.protect_range(p, 0, 10) == 10
        assert w.write(p, 3, b"z").kind == "reuse"

    def test_oom_then_read_zero(self):
        w, p = world_with(10)
        w.write(p, 3, b"abc")
        assert w.oom_reclaim(p, 3)
        assert w.read(p, 3) == bytes(16)

    def test_migrate_private_tables_invalidates_everyone(self):
        w, p = world_with(8)
        child, _ = fork_default(w, p)
        w.read(p, 2)
        w.read(child, 2)
        x = w.walk(p, 2)
        y = w.migrate_page(p.pid, 2)
        assert y != x and w.walk(p, 2) == y and w.walk(child, 2) == y
        assert 2 not in child.tlb and coherence_audit(w) == [] and clean(w)

    def test_migrate_steps_observed(self):
        w, p = world_with(8)
        seen = []
        w.migrate_page(p.pid, 1, observe=lambda k, label: seen.append(k))
        assert seen == [1, 2, 3, 4, 5]

    def test_migrate_shared_table_leaves_stale_tlb(self):
        w, p = world_with(8)
        child, _ = fork_odf(w, p)
        w.read(child, 2)
        w.migrate_page(p.pid, 2)
        assert coherence_audit(w) == [(child.pid, 2)]
        assert w.shared_migrations == [(child.pid, 2)]

    def test_migrate_unmapped(self):
        w, p = world_with(8)
        w.oom_reclaim(p, 1)
        with pytest.raises(UnmappedAddress):
            w.migrate_page(p.pid, 1)


class TestCheckpointEvent:
    def test_classification(self):
        assert CheckpointEvent.vma_wide_event(CheckpointOp.UNMAP, 0, 10).kind == "VmaWide"
        assert CheckpointEvent.pmd_wide(CheckpointOp.PAGE_FAULT, 5).kind == "PmdWide"

    def test_wrong_constructor(self):
        with pytest.raises(ValueError):
            CheckpointEvent.pmd_wide(CheckpointOp.UNMAP, 0)
        with pytest.raises(ValueError):
            CheckpointEvent.vma_wide_event(CheckpointOp.MIGRATE, 0, 1)

    def test_pmds_span(self):
        assert list(CheckpointEvent.vma_wide_event(CheckpointOp.PROTECT, 500, 1100).pmds()) == [0, 1, 2]


_ops = st.lists(st.tuples(st.sampled_from(["write", "read", "fork_default", "fork_odf", "exit", "migrate",
                                           "oom", "unmap", "protect"]),
                          st.integers(0, 1535)), max_size=40)


@settings(max_examples=60, deadline=None)
@given(_ops)
def test_random_operations_keep_audits_clean(ops):
    """Refcounts equal mapping counts and the tree keeps its level discipline under any op mix."""
    w, p = world_with(1536, n_phys=20000, payload=4)
    children = []
    for op, v in ops:
        try:
            if op == "write":
                w.write(p, v, b"\x01")
            elif op == "read":
                w.read(p, v)
            elif op == "fork_default":
                children.append(fork_default(w, p)[0])
            elif op == "fork_odf":
                children.append(fork_odf(w, p)[0])
            elif op == "exit" and children:
                w.exit_process(children.pop(0))
            elif op == "migrate":
                w.migrate_page(p.pid, v)
            elif op == "oom":
                w.oom_reclaim(p, v)
            elif op == "unmap":
                w.unmap_range(p, v, v + 1)
            elif op == "protect":
                w.protect_range(p, v, v + 1)
        except UnmappedAddress:
            pass
        assert clean(w)
