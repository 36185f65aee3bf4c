"""Synthetic block-structured benchmark graphs.

Drugs are grouped by a shared pharmacologic class and diseases by a
shared finding site; a drug treats exactly the diseases whose block its
class points at, so drugs sharing a class treat the same diseases and
diseases sharing a site are treated by the same drugs. A noisy synthetic
sequence-tagger prediction accompanies every annotated pair. Used by the
test-suite and handy for demos; no external data required.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kg import (
    EntityRef,
    Kind,
    KnowledgeGraph,
    TREATS,
    default_signatures,
)

DRUG_CLASS_RELATION = "has_pharmclass"
DISEASE_SITE_RELATION = "has_finding_site"


@dataclass
class PlantedData:
    graph: KnowledgeGraph
    crf_scores: dict[tuple[str, str], float]
    gold: dict[tuple[str, str], int]
    positive_rate: float


def planted_graph(n_drugs: int = 60,
                  n_diseases: int = 60,
                  n_attributes: int = 8,
                  pairs_per_drug: int = 15,
                  blocks_per_drug: int = 2,
                  crf_true_positive: float = 0.8,
                  crf_false_positive: float = 0.1,
                  seed: int = 0) -> PlantedData:
    """Build a planted-block benchmark graph.

    Drug ``i`` belongs to class ``i % n_attributes`` and treats the
    diseases whose site block lies within ``blocks_per_drug`` consecutive
    blocks starting at its class, giving a base positive rate of roughly
    ``blocks_per_drug / n_attributes``. Each drug is annotated against
    ``pairs_per_drug`` random diseases; those pairs form the treats
    universe, observed at their gold values.
    """
    if pairs_per_drug > n_diseases:
        raise ValueError("pairs_per_drug cannot exceed n_diseases")
    rng = np.random.default_rng(seed)
    g = KnowledgeGraph(default_signatures())

    drugs = [g.add_node(EntityRef(Kind.DRUG, f"drug{i:03d}")) for i in range(n_drugs)]
    diseases = [g.add_node(EntityRef(Kind.DISEASE, f"disease{j:03d}"))
                for j in range(n_diseases)]
    classes = [g.add_node(EntityRef(Kind.ATTRIBUTE, f"pclass{c}"))
               for c in range(n_attributes)]
    sites = [g.add_node(EntityRef(Kind.ATTRIBUTE, f"site{b}"))
             for b in range(n_attributes)]

    for i, ref in enumerate(drugs):
        g.add_observed(DRUG_CLASS_RELATION, (ref, classes[i % n_attributes]), 1.0)
    for j, ref in enumerate(diseases):
        g.add_observed(DISEASE_SITE_RELATION, (ref, sites[j % n_attributes]), 1.0)

    def is_positive(i: int, j: int) -> bool:
        offset = (j - i) % n_attributes
        return offset < blocks_per_drug

    gold: dict[tuple[str, str], int] = {}
    crf: dict[tuple[str, str], float] = {}
    n_pos = 0
    for i, drug_ref in enumerate(drugs):
        chosen = rng.choice(n_diseases, size=pairs_per_drug, replace=False)
        for j in sorted(chosen.tolist()):
            disease_ref = diseases[j]
            label = 1 if is_positive(i, j) else 0
            n_pos += label
            g.add_observed(TREATS, (drug_ref, disease_ref), float(label))
            ids = (drug_ref.id, disease_ref.id)
            gold[ids] = label
            fired = rng.random() < (crf_true_positive if label else crf_false_positive)
            if fired:
                crf[ids] = 1.0

    return PlantedData(
        graph=g,
        crf_scores=crf,
        gold=gold,
        positive_rate=n_pos / max(1, len(gold)),
    )
