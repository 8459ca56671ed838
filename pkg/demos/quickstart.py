"""
Quickstart: from triples to ranked predictions
==============================================

Builds a small graph in memory, mines its relation paths, trains for a
few hundred epochs and ranks the held-out facts.
"""

from optranse.evaluator import evaluate
from optranse.kg import add_reverse_relations, build_graph
from optranse.paths import build_eval_table, build_path_stats, build_train_table
from optranse.trainer import TrainConfig, Trainer

# a family tree: parent_of followed by parent_of gives grandparent_of
people = [f"p{i}" for i in range(31)]
train, test = [], []
for i in range(15):
    for child in (2 * i + 1, 2 * i + 2):
        train.append((people[i], "parent_of", people[child]))
for i in range(7):
    for child in (2 * i + 1, 2 * i + 2):
        for grandchild in (2 * child + 1, 2 * child + 2):
            fact = (people[i], "grandparent_of", people[grandchild])
            (test if (i + grandchild) % 4 == 0 else train).append(fact)

graph = add_reverse_relations(build_graph(train, test=test))
print(graph.report)

###############################################################################
# Path statistics are computed once over the train split. Training uses
# one path set per train triple; evaluation needs one per candidate pair.

stats = build_path_stats(graph, max_steps=2)
train_table = build_train_table(graph, stats, 2)
eval_table = build_eval_table(graph, stats, graph.test, 2)

###############################################################################
# Train. The warm start fits the triple term alone before paths join in.

cfg = TrainConfig(dim=10, lr=0.01, margin=4.0, step_margins=(4.0, 4.0), epochs=200, warm_start_epochs=50, batch_size=32, seed=0)
trainer = Trainer(graph, train_table, cfg)
trainer.fit()
losses = [e.triple_loss + e.path_loss + e.penalty for e in trainer.report.epochs]
print(f"mean loss: first epoch {losses[0]:.3f}, last epoch {losses[-1]:.3f}")

###############################################################################
# Rank every held-out fact against all entities, on both sides.

report = evaluate(trainer.params, trainer.cache, graph, eval_table)
print(report.to_text())
