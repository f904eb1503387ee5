"""Recompute the relative-gain summary for the stored benchmark rows.

Each row's multi-task gain is rebuilt from the raw metric values and the
single-task references, then set next to the value that was reported.
"""

from bridgenet.reference_tables import TABLES, recompute

for table in TABLES.values():
    print(f"== {table.name}  (single-task reference: {table.reference})")
    for label, got, reported in recompute(table):
        flag = "" if abs(got - reported) <= 0.01 else "   <-- differs"
        print(f"  {label:28s} recomputed {got:+6.2f}   reported {reported:+6.2f}{flag}")
    print()

# Per-task gains for one row.
row = TABLES["nyud-task-sets"].rows[0]
print(row.report(TABLES["nyud-task-sets"].reference).format_table())
