import pytest

from forksim.fork_engines import Engine
from forksim.kv_engine import make_value
from forksim.scenarios import async_migration, random_case, run_random_case, shared_table_migration

# Step-by-step TLB/PTE states written out by hand for the two migration walkthroughs.
SHARED_TABLE_ROWS = [
    (1, "Initial state", "V->X", "V->X", "V->X", "V->X"),
    (2, "P: Set PTE -> None present", "V->X", "V->N", "V->X", "V->N"),
    (3, "P: Flush TLB", "N/A", "V->N", "V->X", "V->N"),
    (4, "C: Skipped because N!=X", "N/A", "V->N", "V->X", "V->N"),
    (5, "P: Update PTE", "N/A", "V->Y", "V->X", "V->Y"),
    (6, "P&C: Access V", "V->Y", "V->Y", "V->X", "V->Y"),
]

ASYNC_ROWS = [
    (1, "Initial state", "V->X", "V->X", "N/A", "N/A"),
    (2, "P: Set PTE -> None present", "V->X", "V->N", "N/A", "N/A"),
    (3, "P: Flush TLB", "N/A", "V->N", "N/A", "N/A"),
    (4, "P: Update PTE", "N/A", "V->Y", "N/A", "N/A"),
    (5, "C: Copy PTE", "N/A", "V->Y", "N/A", "V->Y"),
    (6, "P&C: Access V", "V->Y", "V->Y", "V->Y", "V->Y"),
]


@pytest.fixture(scope="module")
def odf_walk():
    return shared_table_migration()


@pytest.fixture(scope="module")
def async_walk():
    return async_migration()


class TestSharedTableMigration:
    def test_rows_match_published_table(self, odf_walk):
        assert odf_walk.table() == SHARED_TABLE_ROWS

    def test_one_violation(self, odf_walk):
        assert len(odf_walk.violations) == 1 and odf_walk.violations == odf_walk.detector

    def test_stale_value_in_dump(self, odf_walk):
        assert odf_walk.dump != odf_walk.oracle
        assert odf_walk.dump[0] == make_value(0, 1, 8) != odf_walk.oracle[0]

    def test_frames_differ(self, odf_walk):
        assert odf_walk.frames["X"] != odf_walk.frames["Y"]

    def test_default_engine_is_coherent(self):
        w = shared_table_migration(Engine.DEFAULT)
        assert w.violations == [] and w.dump == w.oracle
        assert w.table()[3][1] != SHARED_TABLE_ROWS[3][1]

    def test_without_overwrite_translation_is_still_stale(self):
        w = shared_table_migration(overwrite=False)
        assert len(w.violations) == 1


class TestAsyncMigration:
    def test_rows_match_published_table(self, async_walk):
        assert async_walk.table() == ASYNC_ROWS

    def test_no_violation_and_migrated_value(self, async_walk):
        assert async_walk.violations == [] and async_walk.detector == []
        assert async_walk.dump == async_walk.oracle

    def test_migration_is_not_synced(self, async_walk):
        assert async_walk.extra["syncs_during_migration"] == 0


class TestRandomCases:
    def test_case_is_deterministic(self):
        assert random_case(17) == random_case(17)

    @pytest.mark.parametrize("seed", range(12))
    def test_small_batch(self, seed):
        res = run_random_case(random_case(seed))
        assert res.consistency() in ("pass", "n/a")
        assert res.violations == []
