# coding: utf-8

# # A page migration while page tables are shared
#
# The parent and child both have key 0's page cached in their TLBs.  The OS
# then migrates that page for the parent.  With shared PTE tables the child's
# entry is never found, so its cached translation goes stale.  With private
# tables (and the Async lock during migration) it doesn't.

from forksim.fork_engines import Engine
from forksim.scenarios import async_migration, shared_table_migration


def show(walk):
    print(f"{'step':<5}{'operation':<30}{'P tlb':<8}{'P pte':<8}{'C tlb':<8}{'C pte':<8}")
    for row in walk.table():
        print(f"{row[0]:<5}{row[1]:<30}" + "".join(f"{c:<8}" for c in row[2:]))
    print("coherence violations:", walk.violations)
    print("dump matches fork-time contents:", walk.dump == walk.oracle)
    print()


# ## Shared tables (ODF)

odf = shared_table_migration(Engine.ODF)
show(odf)

# The frame the child still points at was freed and handed straight back out
# when the parent overwrote key 0, so the child's dump holds the parent's new
# bytes rather than the value at fork time.

print("child dumped:", odf.dump[0].hex(), " expected:", odf.oracle[0].hex())
print()

# ## Same script, private tables

show(shared_table_migration(Engine.DEFAULT))

# ## Async-fork, migration before the child has copied the table

asy = async_migration()
show(asy)
print("proactive syncs caused by the migration:", asy.extra["syncs_during_migration"])
