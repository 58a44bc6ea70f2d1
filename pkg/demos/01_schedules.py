"""Walk through the two hand-designed square-size schedules.

Both schedules pick the fraction p of image area that the next square
covers, halving p at fixed fractions of the query budget.  The standard
schedule (sa) starts at p0 = 0.3 and spreads its eight halvings over the
actual budget; the aggressive variant (aa) starts at p0 = 0.8 but halves
against a fixed virtual budget of 10000 queries, so a 5000-query run only
ever sees six of the breakpoints.

Run:  python demos/01_schedules.py
"""

import numpy as np

from metasquare.proposal import (aa_schedule, halving_count, p_to_size,
                                 sa_schedule, schedule_table)


def main():
    print("p(t) for the standard schedule, p0 = 0.3")
    header = f"{'t/T':>8s}" + "".join(f"{f'T={T}':>12s}" for T in (500, 1000, 5000, 10000))
    print(header)
    for frac in (0.0, 0.001, 0.005, 0.02, 0.1, 0.2, 0.4, 0.6, 0.8, 0.999):
        row = f"{frac:8.3f}"
        for T in (500, 1000, 5000, 10000):
            row += f"{sa_schedule(int(frac * T), T):12.6f}"
        print(row)

    print("\nhalvings used by each schedule on a 5000-query run")
    sa_halvings = {halving_count(t, 5000) for t in range(5000)}
    aa_ps = {aa_schedule(t) for t in range(5000)}
    print(f"  sa: {sorted(sa_halvings)} (all eight breakpoints fire)")
    print(f"  aa: {len(aa_ps)} distinct p values, final p = {aa_schedule(4999):.6f}"
          f" = 0.8 / 2^6  (virtual budget 10000 leaves two breakpoints unused)")

    # the attack quantizes p into an integer square side for the image at hand
    print("\nsquare side on a 16x16 image over a 1000-query run")
    print(f"{'t':>6s} {'sa side':>8s} {'aa side':>8s}")
    for t in (0, 1, 5, 20, 100, 200, 400, 600, 800, 999):
        sa_side = p_to_size(sa_schedule(t, 1000), 16, 16)
        aa_side = p_to_size(aa_schedule(t), 16, 16)
        print(f"{t:6d} {sa_side:8d} {aa_side:8d}")

    # schedule_table bundles the same rows for CSV dumps and plots
    table = schedule_table("sa", 1000, 16, 16)
    sizes = np.array([row[2] for row in table])
    print(f"\nschedule_table('sa', 1000, 16, 16): sides from {sizes.max()} down "
          f"to {sizes.min()}, {len(np.unique(sizes))} distinct values")


if __name__ == "__main__":
    main()
