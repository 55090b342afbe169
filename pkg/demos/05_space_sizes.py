# coding: utf-8

# # How much smaller is the invariant input space?
#
# With n distinguishable positions and m identical objects, an ordered encoding
# sees n!/(n-m)! inputs while a set encoding sees C(n, m). The ratio is exactly
# m!, computed here with Python integers so nothing overflows.

from exchangeable.analysis import format_space_report, space_sizes

print(format_space_report(space_sizes(5, 2)))
print()
print(f"{'m':>3} {'ordered':>24} {'invariant':>16} {'ratio':>10}")
for m in range(1, 11):
    r = space_sizes(30, m)
    print(f"{m:>3} {r.ordered_size:>24} {r.invariant_size:>16} {r.ratio:>10}")
