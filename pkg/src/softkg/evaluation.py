"""Experimental protocol: subgraph sampling, evidence splits, PR-AUC,
and the multi-run experiment driver.

Each run samples two disease-disjoint subgraphs (train/test), hides a
fixed fraction of treats edges as prediction targets, reveals a
ratio-dependent share of the rest as evidence, learns weights on the
train side, runs MAP inference on the test side, and scores the hidden
edges by their consensus truth values. Results are averaged over runs
per evidence ratio and model variant.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict
from typing import Mapping, Optional, Sequence

import numpy as np

from .ground import ground
from .infer import AdmmConfig, map_inference
from .kg import (
    CRF_TREATS,
    EntityRef,
    Kind,
    KnowledgeGraph,
    TREATS,
    canonical_id,
    merge_graphs,
)
from .learn import LearnConfig, init_weights, learn_weights
from .rules import default_rule_templates

logger = logging.getLogger(__name__)

VARIANT_PARTS = ("crf", "ontologies", "narratives")
TEXT_ONLY = "text_only"


class SplitError(Exception):
    pass


class ExperimentError(Exception):
    pass


def derive_seed(master: int, *path: int) -> np.random.SeedSequence:
    """Named RNG stream: one master seed, a fixed spawn key per purpose,
    so every consumer sees the same stream regardless of scheduling."""
    return np.random.SeedSequence(master, spawn_key=tuple(path))


# ---------------------------------------------------------------------------
# Subgraph sampling and evidence splits
# ---------------------------------------------------------------------------

def _universe_pairs(g: KnowledgeGraph) -> dict[tuple[EntityRef, EntityRef], Optional[float]]:
    return g.treats_universe()


def _induced_subgraph(g: KnowledgeGraph, diseases: set[EntityRef]) -> KnowledgeGraph:
    """Subgraph over the given diseases, their adjacent drugs, and the
    treats edges between them; attribute and narrative atoms incident to
    included entities are carried along."""
    universe = _universe_pairs(g)
    drugs = {d for (d, dis) in universe if dis in diseases}
    included = drugs | diseases

    sub = KnowledgeGraph(g.signatures)
    for ref in included:
        sub.add_node(ref)
    for atom in g.observed_atoms():
        pred = atom.predicate
        if pred == TREATS:
            if atom.args[1] in diseases:
                sub.add_observed(pred, atom.args, atom.value)
        elif pred == CRF_TREATS:
            if atom.args[0] in drugs and atom.args[1] in diseases:
                sub.add_node(atom.args[0])
                sub.add_node(atom.args[1])
                sub.add_observed(pred, atom.args, atom.value)
        else:
            if atom.args[0] in included:
                for ref in atom.args:
                    sub.add_node(ref)
                sub.add_observed(pred, atom.args, atom.value)
    for (pred, args), gold in g.target_atoms(TREATS):
        if args[1] in diseases:
            sub.add_target(pred, args, gold)
    return sub


def sample_disjoint_subgraphs(g: KnowledgeGraph, seed) -> tuple[KnowledgeGraph, KnowledgeGraph]:
    """Partition the diseases carrying treats edges into two random
    halves and induce one subgraph per half. The halves share no disease
    nodes and no treats edges; drugs may appear on both sides."""
    universe = _universe_pairs(g)
    diseases = sorted({dis for (_, dis) in universe})
    if len(diseases) < 2:
        raise SplitError("need at least 2 diseases with treats edges to split")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(diseases))
    half = len(diseases) // 2
    first = {diseases[i] for i in perm[:half]}
    second = {diseases[i] for i in perm[half:]}
    return _induced_subgraph(g, first), _induced_subgraph(g, second)


@dataclass
class SplitPart:
    """One subgraph after the evidence split: hidden targets carry their
    gold values, revealed edges stay observed, leftovers are dropped from
    the universe (or closed to 0 under the ``negative`` policy)."""

    graph: KnowledgeGraph
    observed: list[tuple[str, str]]
    targets: dict[tuple[str, str], float]
    removed: list[tuple[str, str]]


def split_evidence(sub: KnowledgeGraph, evidence_ratio: float,
                   prediction_fraction: float, seed,
                   leftover: str = "remove") -> SplitPart:
    """Hide ``prediction_fraction`` of the treats edges as targets and
    reveal ``evidence_ratio`` of all edges as observations."""
    if not 0.0 <= evidence_ratio <= 1.0 - prediction_fraction + 1e-12:
        raise SplitError(
            f"evidence ratio {evidence_ratio} + prediction fraction "
            f"{prediction_fraction} exceeds 1"
        )
    if leftover not in ("remove", "negative"):
        raise ValueError(f"unknown leftover policy {leftover!r}")
    universe = _universe_pairs(sub)
    pairs = sorted(universe)
    values = []
    for pair in pairs:
        v = universe[pair]
        if v is None:
            raise SplitError(f"pair {pair[0].id}/{pair[1].id} has no gold value")
        values.append(v)

    n = len(pairs)
    n_pred = int(n * prediction_fraction + 0.5)
    if n_pred < 1:
        raise SplitError("too few treats edges for a nonempty prediction set")
    n_obs = min(int(n * evidence_ratio + 0.5), n - n_pred)

    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    pred_idx = set(perm[:n_pred].tolist())
    obs_idx = set(perm[n_pred:n_pred + n_obs].tolist())

    out = KnowledgeGraph(sub.signatures)
    for ref in sub.nodes:
        out.add_node(ref)
    for atom in sub.observed_atoms():
        if atom.predicate != TREATS:
            out.add_observed(atom.predicate, atom.args, atom.value)

    observed: list[tuple[str, str]] = []
    targets: dict[tuple[str, str], float] = {}
    removed: list[tuple[str, str]] = []
    for i, (pair, value) in enumerate(zip(pairs, values)):
        args = pair
        ids = (pair[0].id, pair[1].id)
        if i in pred_idx:
            out.add_target(TREATS, args, gold=value)
            targets[ids] = value
        elif i in obs_idx:
            out.add_observed(TREATS, args, value)
            observed.append(ids)
        elif leftover == "negative":
            out.add_observed(TREATS, args, 0.0)
            removed.append(ids)
        else:
            removed.append(ids)
    return SplitPart(out, observed, targets, removed)


# ---------------------------------------------------------------------------
# Precision-recall metrics
# ---------------------------------------------------------------------------

def pr_curve(scores: Sequence[float], labels: Sequence[int],
             ) -> tuple[np.ndarray, np.ndarray]:
    """Precision/recall points swept over the distinct scores in
    descending order; tied scores share one threshold."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=float)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be equal-length vectors")
    total_pos = labels.sum()
    if total_pos < 1:
        raise ValueError("need at least one positive label")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    lab = labels[order]
    last_of_group = np.nonzero(np.diff(s))[0]
    cut = np.append(last_of_group, len(s) - 1)
    tp = np.cumsum(lab)[cut]
    fp = np.cumsum(1.0 - lab)[cut]
    precision = tp / (tp + fp)
    recall = tp / total_pos
    return recall, precision


def pr_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Area under the precision-recall curve by the step-wise sum
    ``sum_i (R_i - R_{i-1}) * P_i`` (no interpolation)."""
    recall, precision = pr_curve(scores, labels)
    prev = np.concatenate(([0.0], recall[:-1]))
    return float(np.sum((recall - prev) * precision))


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Rank-based ROC AUC; debug metric only, the headline metric for
    this imbalanced task is PR-AUC."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=float)
    pos = scores[labels > 0.5]
    neg = scores[labels <= 0.5]
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("need both classes for ROC")
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return float(wins / (len(pos) * len(neg)))


# ---------------------------------------------------------------------------
# Experiment driver
# ---------------------------------------------------------------------------

def parse_variant(name: str) -> tuple[bool, frozenset[str]]:
    """Return (uses_crf, graph selectors). ``text_only`` maps to the bare
    sequence-tagger baseline."""
    if name == TEXT_ONLY:
        return True, frozenset()
    parts = [p.strip() for p in name.split("+") if p.strip()]
    if not parts or any(p not in VARIANT_PARTS for p in parts) or len(set(parts)) != len(parts):
        raise ExperimentError(f"unknown variant {name!r}")
    return "crf" in parts, frozenset(p for p in parts if p != "crf")


@dataclass
class ExperimentConfig:
    variants: list[str]
    evidence_ratios: list[float]
    runs: int = 100
    prediction_fraction: float = 0.25
    seed: int = 0
    leftover: str = "remove"
    squared_hinge: bool = True
    jobs: int = 1
    admm: AdmmConfig = field(default_factory=AdmmConfig)
    learn: LearnConfig = field(default_factory=LearnConfig)

    def __post_init__(self):
        if self.runs < 1:
            raise ValueError("runs must be >= 1")
        if not self.variants:
            raise ValueError("no variants requested")
        if not self.evidence_ratios:
            raise ValueError("no evidence ratios requested")
        if not 0.0 < self.prediction_fraction <= 1.0:
            raise ValueError("prediction fraction must be in (0, 1]")
        for r in self.evidence_ratios:
            if not 0.0 <= r <= 1.0 - self.prediction_fraction + 1e-12:
                raise ValueError(
                    f"evidence ratio {r} incompatible with prediction fraction "
                    f"{self.prediction_fraction}"
                )
        for v in self.variants:
            parse_variant(v)


@dataclass
class RunRecord:
    run: int
    variant: str
    evidence_ratio: float
    auc: Optional[float] = None
    n_targets: int = 0
    n_positive: int = 0
    admm_iterations: int = 0
    admm_converged: bool = True
    relative_weights: dict[str, Optional[float]] = field(default_factory=dict)
    error: Optional[str] = None
    scores: Optional[list[float]] = None
    labels: Optional[list[int]] = None

    def to_json_dict(self) -> dict:
        d = asdict(self)
        d.pop("scores")
        d.pop("labels")
        return d


@dataclass
class SummaryRow:
    variant: str
    evidence_ratio: float
    mean_auc: float
    std_auc: float
    runs: int


@dataclass
class ExperimentResult:
    records: list[RunRecord]
    config: ExperimentConfig

    def summary(self) -> list[SummaryRow]:
        rows = []
        keys = sorted({(r.variant, r.evidence_ratio) for r in self.records})
        for variant, ratio in keys:
            aucs = [r.auc for r in self.records
                    if r.variant == variant and r.evidence_ratio == ratio
                    and r.auc is not None]
            if not aucs:
                continue
            mean = float(np.mean(aucs))
            std = float(np.std(aucs, ddof=1)) if len(aucs) > 1 else 0.0
            rows.append(SummaryRow(variant, ratio, mean, std, len(aucs)))
        return rows

    def mean_auc(self, variant: str, ratio: float) -> float:
        for row in self.summary():
            if row.variant == variant and math.isclose(row.evidence_ratio, ratio):
                return row.mean_auc
        raise KeyError((variant, ratio))

    def failures(self) -> list[RunRecord]:
        return [r for r in self.records if r.error is not None]

    def pooled_curve(self, variant: str, ratio: float) -> tuple[np.ndarray, np.ndarray]:
        scores: list[float] = []
        labels: list[int] = []
        for r in self.records:
            if (r.variant == variant and math.isclose(r.evidence_ratio, ratio)
                    and r.auc is not None and r.scores is not None):
                scores.extend(r.scores)
                labels.extend(r.labels or [])
        return pr_curve(scores, labels)


def prepare_experiment_graph(graphs: Mapping[str, KnowledgeGraph],
                             crf_scores: Optional[Mapping[tuple[str, str], float]] = None,
                             ) -> KnowledgeGraph:
    """Merge the evidence graphs and fold CRF predictions in as observed
    CRF_treats atoms."""
    known = [g for name, g in sorted(graphs.items())]
    if not known:
        raise ExperimentError("no input graphs")
    merged = known[0]
    for g in known[1:]:
        merged = merge_graphs(merged, g)
    if crf_scores:
        combined = KnowledgeGraph(merged.signatures)
        combined = merge_graphs(combined, merged)
        for (d, dis), score in sorted(crf_scores.items()):
            dref = combined.add_node(EntityRef(Kind.DRUG, canonical_id(d)))
            disref = combined.add_node(EntityRef(Kind.DISEASE, canonical_id(dis)))
            combined.add_observed(CRF_TREATS, (dref, disref), float(score))
        return combined
    return merged


def _evaluate_variant(variant: str, train: SplitPart, test: SplitPart,
                      cfg: ExperimentConfig) -> RunRecord:
    use_crf, parts = parse_variant(variant)
    record = RunRecord(run=-1, variant=variant, evidence_ratio=-1.0)

    test_pairs = sorted(test.targets)
    labels = [1 if test.targets[p] >= 0.5 else 0 for p in test_pairs]
    record.n_targets = len(test_pairs)
    record.n_positive = sum(labels)

    if variant == TEXT_ONLY:
        g = test.graph
        scores = []
        for d, dis in test_pairs:
            args = (EntityRef(Kind.DRUG, d), EntityRef(Kind.DISEASE, dis))
            value = g.observed_value(CRF_TREATS, args)
            scores.append(float(value) if value is not None else 0.0)
    else:
        rules = default_rule_templates(parts, include_crf=use_crf,
                                       squared=cfg.squared_hinge)
        train_model = ground(rules, train.graph)
        train_model.set_weights(init_weights(train_model))
        gold = train_model.gold_assignment()
        report = learn_weights(train_model, gold, cfg.learn)

        test_model = ground(rules, test.graph)
        test_model.set_weights(report.learned)
        y, diag = map_inference(test_model, cfg.admm)
        record.admm_iterations = diag.iterations
        record.admm_converged = diag.converged
        record.relative_weights = report.relative
        idx = {
            (key[1][0].id, key[1][1].id): i
            for key, i in test_model.var_index.items()
        }
        scores = [float(y[idx[p]]) for p in test_pairs]

    record.scores = scores
    record.labels = labels
    record.auc = pr_auc(scores, labels)
    return record


def _execute_run(graph: KnowledgeGraph, cfg: ExperimentConfig, run: int) -> list[RunRecord]:
    records: list[RunRecord] = []
    try:
        train_sub, test_sub = sample_disjoint_subgraphs(
            graph, derive_seed(cfg.seed, run, 0))
    except SplitError as exc:
        logger.warning("run %d failed to split: %s", run, exc)
        for ratio in cfg.evidence_ratios:
            for variant in cfg.variants:
                records.append(RunRecord(run, variant, ratio, error=str(exc)))
        return records

    for ridx, ratio in enumerate(cfg.evidence_ratios):
        try:
            train = split_evidence(train_sub, ratio, cfg.prediction_fraction,
                                   derive_seed(cfg.seed, run, 1, ridx, 0), cfg.leftover)
            test = split_evidence(test_sub, ratio, cfg.prediction_fraction,
                                  derive_seed(cfg.seed, run, 1, ridx, 1), cfg.leftover)
        except SplitError as exc:
            logger.warning("run %d ratio %s failed to split: %s", run, ratio, exc)
            for variant in cfg.variants:
                records.append(RunRecord(run, variant, ratio, error=str(exc)))
            continue
        for variant in cfg.variants:
            try:
                rec = _evaluate_variant(variant, train, test, cfg)
                rec.run = run
                rec.evidence_ratio = ratio
            except (SplitError, ValueError) as exc:
                logger.warning("run %d ratio %s variant %s failed: %s",
                               run, ratio, variant, exc)
                rec = RunRecord(run, variant, ratio, error=str(exc))
            records.append(rec)
    return records


_WORKER_STATE: dict = {}


def _pool_init(graph: KnowledgeGraph, cfg: ExperimentConfig) -> None:
    _WORKER_STATE["graph"] = graph
    _WORKER_STATE["cfg"] = cfg


def _pool_run(run: int) -> list[RunRecord]:
    return _execute_run(_WORKER_STATE["graph"], _WORKER_STATE["cfg"], run)


def run_experiment(graphs: Mapping[str, KnowledgeGraph],
                   cfg: ExperimentConfig,
                   crf_scores: Optional[Mapping[tuple[str, str], float]] = None,
                   ) -> ExperimentResult:
    """Run the full experiment matrix.

    ``graphs`` maps graph selectors ("ontologies"/"narratives") to loaded
    graphs; at least one graph must carry the gold treats edges. CRF
    predictions are required by ``text_only`` and every ``crf+`` variant.
    Failed runs are recorded with their error and excluded from summary
    statistics.
    """
    needed_graphs: set[str] = set()
    needs_crf = False
    for v in cfg.variants:
        use_crf, parts = parse_variant(v)
        needed_graphs |= parts
        needs_crf = needs_crf or use_crf
    missing = needed_graphs - set(graphs)
    if missing:
        raise ExperimentError(f"variants need missing graph(s): {sorted(missing)}")
    if needs_crf and not crf_scores:
        raise ExperimentError("variants need CRF predictions but none were given")

    merged = prepare_experiment_graph(graphs, crf_scores)
    if not merged.treats_universe():
        raise ExperimentError("input graphs carry no treats edges")

    records: list[RunRecord] = []
    if cfg.jobs > 1 and cfg.runs > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs, initializer=_pool_init,
                                 initargs=(merged, cfg)) as pool:
            for batch in pool.map(_pool_run, range(cfg.runs)):
                records.extend(batch)
    else:
        for run in range(cfg.runs):
            records.extend(_execute_run(merged, cfg, run))

    records.sort(key=lambda r: (r.run, r.evidence_ratio, r.variant))
    n_failed = sum(1 for r in records if r.error is not None)
    if n_failed:
        logger.warning("%d of %d evaluations failed and were excluded",
                       n_failed, len(records))
    return ExperimentResult(records, cfg)
