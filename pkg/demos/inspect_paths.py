"""
Reading one prediction
======================

Lists the paths kept for a single pair, their reliability and confidence,
the energy of each path and which branch gives the final energy. The CLI
``optranse paths`` subcommand prints the same breakdown.
"""

import numpy as np

from optranse import model as M
from optranse.kg import add_reverse_relations, build_graph
from optranse.paths import build_path_stats, filtered_path_set

rows = [
    ("anna", "born_in", "lyon"),
    ("lyon", "city_of", "france"),
    ("anna", "nationality", "france"),
    ("marc", "born_in", "gent"),
    ("gent", "city_of", "belgium"),
    ("marc", "nationality", "belgium"),
    ("lea", "born_in", "lyon"),
]
g = add_reverse_relations(build_graph(rows))
stats = build_path_stats(g, 2)
h, r, t = g.triple("lea", "nationality", "france")
paths = filtered_path_set(g, stats, h, r, t, 2)
for inst in paths.instances():
    labels = [g.relations.resolve(x) for x in inst.path]
    print(f"{' -> '.join(labels):<35} Pr(p|h,t)={inst.reliability:.3f}  Pr(r|p)={inst.confidence:.3f}")

###############################################################################
# An untrained model still shows how the pieces combine: the direct energy
# competes with the best path of each length and the minimum wins.

params = M.init_params(g.n_entities, g.n_relations, 8, np.random.default_rng(0))
cache = M.refresh_transition_cache(params)
b = M.final_energy(params, cache, h, r, t, paths, 2)
print(f"direct {b.direct:.3f}")
for step, (energy, path) in sorted(b.per_step.items()):
    print(f"step {step}: best {[g.relations.resolve(x) for x in path]} at {energy:.3f}")
print(f"final {b.final:.3f} from {b.winner}")
