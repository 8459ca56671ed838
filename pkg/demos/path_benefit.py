"""
What the path term adds
=======================

The same grid, with half the rule facts held out, is trained twice per seed:
once with the path term (lambda = 0.01), and once without it (lambda = 0),
which leaves only the triple term. Held-out
facts are reachable from train facts through two-step paths, so the
path term should help the ranking.

Ten runs of about five seconds each.
"""

import statistics

from optranse import experiments as X

with_paths, without = X.path_benefit(range(5))
print(f"{'seed':<6}{'lambda=0.01':>12}{'lambda=0':>10}")
for seed, (a, b) in enumerate(zip(with_paths, without)):
    print(f"{seed:<6}{a:>11.1f}%{b:>9.1f}%")
print(f"{'median':<6}{statistics.median(with_paths):>11.1f}%{statistics.median(without):>9.1f}%")
