"""Order-preserving relation-path embeddings for knowledge-graph completion."""

from .kg import KnowledgeGraph, add_reverse_relations, build_graph, load_dataset, load_triples
from .model import ModelParams, final_energy, init_params, path_energy, refresh_transition_cache, triple_energy
from .paths import PathSet, PathStats, build_path_stats, filtered_path_set
from .trainer import TrainConfig, Trainer
from .evaluator import EvalReport, evaluate

__version__ = "0.1.0"
