"""Soft-logic link prediction over drug--disease knowledge graphs."""

__version__ = "0.1.0"

from .kg import (
    Atom,
    EntityRef,
    Kind,
    KnowledgeGraph,
    Lexicon,
    build_narratives_graph,
    filter_high_degree_drugs,
    load_graph,
    merge_graphs,
    save_graph,
)
from .rules import RuleSchema, RuleSet, default_rule_templates, parse_rules, validate
from .ground import GroundedModel, GroundRule, distance_to_satisfaction, ground, grounding_counts
from .infer import AdmmConfig, map_inference, objective
from .learn import LearnConfig, WeightReport, init_weights, learn_weights, pseudo_log_likelihood
from .annotate import WorkerResponse, aggregate_labels, agreement_stats
from .evaluation import (
    ExperimentConfig,
    pr_auc,
    run_experiment,
    sample_disjoint_subgraphs,
    split_evidence,
)

__all__ = [
    "Atom", "EntityRef", "Kind", "KnowledgeGraph", "Lexicon",
    "build_narratives_graph", "filter_high_degree_drugs", "load_graph",
    "merge_graphs", "save_graph",
    "RuleSchema", "RuleSet", "default_rule_templates", "parse_rules", "validate",
    "GroundedModel", "GroundRule", "distance_to_satisfaction", "ground",
    "grounding_counts",
    "AdmmConfig", "map_inference", "objective",
    "LearnConfig", "WeightReport", "init_weights", "learn_weights",
    "pseudo_log_likelihood",
    "WorkerResponse", "aggregate_labels", "agreement_stats",
    "ExperimentConfig", "pr_auc", "run_experiment", "sample_disjoint_subgraphs",
    "split_evidence",
]
