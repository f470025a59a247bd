import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from forksim.fork_engines import (Engine, ErrorInjection, Phase, RollbackCase, async_child_copy, begin_snapshot,
                                  fork_async_parent, fork_default, fork_odf, odf_cow_pte_table, rollback,
                                  wp_census)
from forksim.sim_clock import Cause, CostModel
from forksim.vm_core import World, coherence_audit, refcount_audit, structure_audit

from . import oracles


def heap_world(vmas=4, pages_per_vma=1024, payload=8, n_phys=40_000):
    w = World(n_phys, payload)
    p = w.spawn()
    for k in range(vmas):
        lo = k * pages_per_vma
        w.add_vma(p, lo, lo + pages_per_vma)
        w.map_range(p, lo, lo + pages_per_vma, payload=lambda v: (v % 251)[:, None].astype(np.uint8))
    return w, p


def image(w, proc):
    return w.snapshot_image(proc)


def same_image(a, b):
    return np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


class TestDefaultFork:
    def test_kernel_time_formula(self):
        w, p = heap_world(vmas=2, pages_per_vma=1024)
        _, kt = fork_default(w, p)
        # 2 VMAs, 1 PGD + 1 PUD + 4 PMD entries, 4 * 512 PTEs
        assert kt == 2000 + 6 * 500 + round(2048 * CostModel().c_pte)

    def test_child_sees_fork_time_image(self):
        w, p = heap_world()
        before = image(w, p)
        child, _ = fork_default(w, p)
        w.write(p, 5, b"\xff")
        assert same_image(image(w, child), before)

    def test_every_present_pte_write_protected(self):
        w, p = heap_world(vmas=1)
        fork_default(w, p)
        t = w.pte_table(p, 0)
        assert not w.tables.wr[t, w.tables.pres[t]].any()

    def test_audits_clean(self):
        w, p = heap_world()
        fork_default(w, p)
        assert not refcount_audit(w) and not structure_audit(w)


class TestOdfFork:
    def test_tables_shared(self):
        w, p = heap_world(vmas=1)
        child, kt = fork_odf(w, p)
        assert w.pte_table(p, 0) == w.pte_table(child, 0)
        assert kt == 1000 + 4 * 500

    def test_first_write_copies_whole_table(self):
        w, p = heap_world(vmas=1)
        child, _ = fork_odf(w, p)
        t0 = w.now
        w.write(p, 3, b"\x01")
        assert w.pte_table(p, 3) != w.pte_table(child, 3)
        assert w.clock.kernel_total(Cause.ODF_COW) == oracles.TABLE_COPY_NS
        # a second write under the same table costs no further table copy
        w.write(p, 4, b"\x01")
        assert w.clock.kernel_total(Cause.ODF_COW) == oracles.TABLE_COPY_NS
        assert w.now > t0

    def test_child_image_preserved(self):
        w, p = heap_world()
        before = image(w, p)
        child, _ = fork_odf(w, p)
        for v in (0, 700, 1500, 4000):
            w.write(p, v, b"\xee")
        assert same_image(image(w, child), before)
        assert not refcount_audit(w) and not structure_audit(w)

    def test_explicit_unshare(self):
        w, p = heap_world(vmas=1)
        child, _ = fork_odf(w, p)
        assert odf_cow_pte_table(w, child, 0) == oracles.TABLE_COPY_NS
        with pytest.raises(ValueError):
            odf_cow_pte_table(w, child, 0)

    def test_exit_restores_parent_pmd(self):
        w, p = heap_world(vmas=1)
        child, _ = fork_odf(w, p)
        w.exit_process(child)
        assert wp_census(w, p) == 0 and not structure_audit(w)


class TestAsyncParent:
    def test_kernel_time_formula(self):
        w, p = heap_world(vmas=4, pages_per_vma=1024)
        s = fork_async_parent(w, p)
        # 4 VMAs, PGD + PUD entries (1 + 1), 8 PMD marks
        assert s.kernel_time == 4000 + 2 * 500 + 8 * 18

    def test_all_pmds_write_protected(self):
        w, p = heap_world()
        s = fork_async_parent(w, p)
        assert wp_census(w, p) == 8 == s.wp_census()
        assert s.phase == Phase.CHILD_COPY

    def test_child_has_no_pte_tables_yet(self):
        w, p = heap_world()
        s = fork_async_parent(w, p)
        assert s.child is not None and all(w.pte_table(s.child, v) is None for v in range(0, 4096, 512))

    def test_peer_links_set(self):
        w, p = heap_world()
        s = fork_async_parent(w, p)
        assert all(v.peer.linked_pid == s.child_pid for v in p.vmas)
        assert all(v.peer.linked_pid == p.pid for v in s.child.vmas)


class TestAsyncChildCopy:
    def test_copy_restores_image_and_clears_bits(self):
        w, p = heap_world()
        before = image(w, p)
        s = fork_async_parent(w, p, workers=2)
        span = async_child_copy(s)
        assert span is not None and s.phase == Phase.PERSIST
        assert same_image(image(w, s.child), before)
        assert wp_census(w, p) == 0
        assert all(v.peer.linked_pid is None for v in p.vmas)

    def test_single_worker_span(self):
        w, p = heap_world(vmas=4)
        s = fork_async_parent(w, p, workers=1)
        lo, hi = async_child_copy(s)
        assert hi - lo == 8 * oracles.TABLE_COPY_NS

    def test_workers_split_equal_vmas(self):
        spans = {}
        for k in (1, 2, 4):
            w, p = heap_world(vmas=4)
            s = fork_async_parent(w, p, workers=k)
            lo, hi = async_child_copy(s)
            spans[k] = hi - lo
        assert spans[2] * 2 == spans[1] and spans[4] * 4 == spans[1]

    def test_write_during_copy_syncs_once(self):
        w, p = heap_world(vmas=2)
        before = image(w, p)
        s = fork_async_parent(w, p, workers=1)
        w.write(p, 1500, b"\x42")
        assert len(s.sync_log) == 1 and s.sync_log[0][1] == oracles.TABLE_COPY_NS
        w.write(p, 1501, b"\x43")
        assert len(s.sync_log) == 1
        s.finish()
        assert same_image((s.persist_vpages, s.dump_rows), before)

    def test_sync_lies_inside_copy_span(self):
        w, p = heap_world(vmas=4)
        s = fork_async_parent(w, p, workers=1)
        for v in (3000, 3500, 4000):
            w.write(p, v, b"\x01")
        lo, hi = async_child_copy(s)
        assert all(lo <= start and start + dur <= hi for start, dur, _ in s.sync_log)

    def test_vma_wide_checkpoint_syncs_range(self):
        w, p = heap_world(vmas=2)
        before = image(w, p)
        s = fork_async_parent(w, p, workers=1)
        w.protect_range(p, 1024, 2048)
        assert len(s.sync_log) == 2
        s.finish()
        assert same_image((s.persist_vpages, s.dump_rows), before)

    def test_unmap_during_copy(self):
        w, p = heap_world(vmas=2)
        before = image(w, p)
        s = fork_async_parent(w, p, workers=1)
        w.unmap_range(p, 1200, 1300)
        s.finish()
        assert same_image((s.persist_vpages, s.dump_rows), before)
        assert not refcount_audit(w) and not structure_audit(w)

    def test_gets_never_sync(self):
        w, p = heap_world(vmas=2)
        s = fork_async_parent(w, p, workers=1)
        for v in range(0, 2048, 7):
            w.read(p, v)
        assert s.sync_log == []


class TestErrorHandling:
    def test_parent_phase(self):
        w, p = heap_world()
        s = fork_async_parent(w, p, injection=ErrorInjection("parent", 1))
        assert s.phase == Phase.ABORTED and s.rollback_case == RollbackCase.PARENT_PHASE
        assert wp_census(w, p) == 0 and not s.child.alive
        assert all(v.peer.linked_pid is None for v in p.vmas)

    def test_child_phase(self):
        w, p = heap_world()
        s = fork_async_parent(w, p, workers=2, injection=ErrorInjection("child", 3))
        async_child_copy(s)
        assert s.phase == Phase.ABORTED and s.rollback_case == RollbackCase.CHILD_PHASE
        assert wp_census(w, p) == 0 and not s.child.alive
        assert s not in w.sessions

    def test_sync_phase(self):
        w, p = heap_world(vmas=2)
        s = fork_async_parent(w, p, workers=1, injection=ErrorInjection("sync", 1))
        w.write(p, 1500, b"\x01")
        assert s.rollback_case == RollbackCase.SYNC_PHASE
        unit = s.units[1]
        assert unit.link.error_code == "ENOMEM"
        async_child_copy(s)
        assert s.phase == Phase.ABORTED and not s.child.alive and wp_census(w, p) == 0

    def test_injection_validation(self):
        with pytest.raises(ValueError):
            ErrorInjection("nowhere")
        with pytest.raises(ValueError):
            ErrorInjection("child", 0)

    def test_explicit_rollback_child_phase(self):
        w, p = heap_world()
        s = fork_async_parent(w, p)
        rollback(s, RollbackCase.CHILD_PHASE)
        assert s.phase == Phase.ABORTED and wp_census(w, p) == 0

    def test_parent_keeps_serving_after_abort(self):
        w, p = heap_world()
        s = fork_async_parent(w, p, injection=ErrorInjection("child", 1))
        async_child_copy(s)
        n = len(s.sync_log)
        for v in range(0, 4096, 13):
            w.write(p, v, b"\x07")
        assert len(s.sync_log) == n and w.clock.kernel_total(Cause.PROACTIVE_SYNC) == 0


class TestConsecutiveSnapshots:
    def test_second_async_fork_syncs_prior_vma(self):
        w, p = heap_world(vmas=2)
        before = image(w, p)
        first = fork_async_parent(w, p, workers=1)
        second = fork_async_parent(w, p, workers=1)
        assert first.phase == Phase.PERSIST or not first.uncopied
        first.finish()
        second.finish()
        assert same_image((first.persist_vpages, first.dump_rows), before)
        assert same_image((second.persist_vpages, second.dump_rows), before)

    def test_default_after_async_drains(self):
        w, p = heap_world(vmas=2)
        first = begin_snapshot(w, Engine.ASYNC, p)
        begin_snapshot(w, Engine.DEFAULT, p)
        assert not first.uncopied and wp_census(w, p) == 0

    def test_engines_chained(self):
        w, p = heap_world(vmas=2)
        before = image(w, p)
        sessions = [begin_snapshot(w, e, p) for e in (Engine.ASYNC, Engine.ODF, Engine.ASYNC, Engine.DEFAULT)]
        for s in sessions:
            s.finish()
            assert same_image((s.persist_vpages, s.dump_rows), before)
        assert not refcount_audit(w) and not structure_audit(w)


class TestPersist:
    def test_persist_duration(self):
        w, p = heap_world(vmas=1, pages_per_vma=512)
        s = begin_snapshot(w, Engine.DEFAULT, p)
        assert s.persist_end - s.persist_start == oracles.PERSIST_512_PAGES_NS

    def test_child_exits_when_done(self):
        w, p = heap_world(vmas=1)
        s = begin_snapshot(w, Engine.ODF, p)
        s.finish()
        assert s.phase == Phase.DONE and not s.child.alive and wp_census(w, p) == 0

    def test_phase_sequence(self):
        w, p = heap_world(vmas=1)
        s = begin_snapshot(w, Engine.ASYNC, p)
        s.finish()
        assert s.phases == [Phase.PARENT_COPY, Phase.CHILD_COPY, Phase.PERSIST, Phase.DONE]


_events = st.lists(st.tuples(st.sampled_from(["write", "read", "protect", "unmap", "oom", "migrate", "gup", "step"]),
                             st.integers(0, 4095)), max_size=30)


@settings(max_examples=60, deadline=None)
@given(_events, st.integers(1, 4), st.sampled_from(list(Engine)))
def test_dump_equals_fork_image_under_interleavings(events, workers, engine):
    """Default and Async dumps equal the fork-instant image; ODF too when no migration touches a shared table."""
    w, p = heap_world()
    before = image(w, p)
    s = begin_snapshot(w, engine, p, workers=workers)
    for op, v in events:
        try:
            if op == "write":
                w.write(p, v, b"\x99")
            elif op == "read":
                w.read(p, v)
            elif op == "protect":
                w.protect_range(p, v, min(v + 40, 4096))
            elif op == "unmap":
                w.unmap_range(p, v, min(v + 40, 4096))
            elif op == "oom":
                w.oom_reclaim(p, v)
            elif op == "migrate" and engine != Engine.ODF:
                w.migrate_page(p.pid, v)
            elif op == "gup":
                w.get_user_page(p, v)
            elif op == "step" and s.phase == Phase.CHILD_COPY:
                s.advance(w.now + v * 10)
        except Exception as exc:  # only addressing errors are expected here
            assert type(exc).__name__ == "UnmappedAddress"
    s.finish()
    assert same_image((s.persist_vpages, s.dump_rows), before)
    assert coherence_audit(w) == []
    assert not refcount_audit(w) and not structure_audit(w)
    assert wp_census(w, p) == 0


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(1, 6))
def test_progress_flag_equivalence(workers, steps):
    """A PMD is write-protected in the parent exactly when the session still lists it as uncopied."""
    w, p = heap_world()
    s = fork_async_parent(w, p, workers=workers)
    for k in range(steps):
        s.advance(w.now + k * oracles.TABLE_COPY_NS)
        w.write(p, (k * 977) % 4096, b"\x01")
        if s.phase != Phase.CHILD_COPY:
            break
        tb = w.tables
        protected = {m for m, slot in s.pslot.items() if not tb.wr[slot]}
        assert protected == set(s.uncopied)
    async_child_copy(s)
    assert wp_census(w, p) == 0 and math.isfinite(s.copy_end)
