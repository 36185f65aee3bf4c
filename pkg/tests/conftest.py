"""Shared fixtures: tiny hand-checkable graphs, model builders, and an
independent grid-search oracle for convex MAP objectives."""

from __future__ import annotations

import numpy as np
import pytest

from softkg.ground import GroundedModel, GroundRule
from softkg.kg import KnowledgeGraph, attribute, disease, drug
from softkg.rules import Literal, RuleSchema, RuleSet, Variable


@pytest.fixture
def shared_class_graph() -> KnowledgeGraph:
    """Two drugs sharing a pharmacologic class; one observed treats edge,
    one target. The smallest graph where rule 3a fires."""
    g = KnowledgeGraph()
    m = g.add_node(drug("medrol"))
    b = g.add_node(drug("baycadron"))
    derm = g.add_node(disease("dermatitis"))
    x = g.add_node(attribute("corticosteroid"))
    g.add_observed("has_pharmclass", (m, x), 1.0)
    g.add_observed("has_pharmclass", (b, x), 1.0)
    g.add_observed("treats", (b, derm), 1.0)
    g.add_target("treats", (m, derm))
    return g


def lit(pred: str, *names: str, neg: bool = False) -> Literal:
    return Literal(pred, tuple(Variable(n) for n in names), neg)


def make_model(potentials, n_vars: int, weights=None, squared: bool = True,
               gold=None) -> GroundedModel:
    """Assemble a GroundedModel directly from (schema_id, {var: coef}, c0)
    triples, bypassing grounding; used to test inference and learning in
    isolation."""
    schema_ids = []
    seen = set()
    for sid, _, _ in potentials:
        if sid not in seen:
            seen.add(sid)
            schema_ids.append(sid)
    schemas = RuleSet([
        RuleSchema(id=sid, weight=1.0 if weights is None else weights.get(sid, 1.0),
                   body=(), head=lit("treats", "D", "Dis"), source="prior",
                   squared=squared)
        for sid in schema_ids
    ])
    variables = [("treats", (f"v{i}",)) for i in range(n_vars)]
    model = GroundedModel(schemas, variables,
                          list(gold) if gold is not None else [None] * n_vars)
    for sid, coeffs, const in potentials:
        items = tuple(sorted(coeffs.items()))
        model.add_rule(GroundRule(
            schema_id=sid,
            var_indices=tuple(j for j, _ in items),
            coefficients=tuple(float(c) for _, c in items),
            constant=float(const),
            exponent=2 if squared else 1,
        ))
    return model


def objective_on_points(model: GroundedModel, pts: np.ndarray) -> np.ndarray:
    """Objective at many assignments at once, evaluated rule by rule
    straight from the ground-rule list (independent of the compiled
    solver path)."""
    total = np.zeros(len(pts))
    weights = model.weights
    for r in model.rules:
        s = np.full(len(pts), r.constant)
        for j, c in zip(r.var_indices, r.coefficients):
            s += c * pts[:, j]
        d = np.maximum(0.0, s)
        total += weights[r.schema_id] * (d * d if r.exponent == 2 else d)
    return total


def grid_search(model: GroundedModel,
                stages=((0.02, None), (0.002, 0.05), (0.0005, 0.005)),
                ) -> tuple[np.ndarray, float]:
    """Refining grid search over the unit box; final resolution 5e-4.

    Sound for convex objectives: each stage re-grids a shrinking window
    around the incumbent minimum.
    """
    n = model.n_variables
    best = np.full(n, 0.5)
    radius = 0.5
    for step, rad in stages:
        radius = rad if rad is not None else radius
        axes = [
            np.arange(max(0.0, best[i] - radius),
                      min(1.0, best[i] + radius) + step / 2, step)
            for i in range(n)
        ]
        grids = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([g.ravel() for g in grids], axis=1)
        vals = objective_on_points(model, pts)
        best = pts[int(np.argmin(vals))]
    return best, float(objective_on_points(model, best[None, :])[0])
