"""Weight initialization and voted-perceptron learning.

Initial weights balance the evidence sources: within a source every
schema with groundings gets the same total contribution (weight times
grounding count), and sources in turn contribute equally. Learning
ascends the pseudo-log-likelihood of the gold assignment: per-variable
conditional densities are integrated by composite Simpson quadrature on
[0, 1], the per-schema gradient is the gap between expected and observed
distances, updates are projected onto nonnegative weights, and the final
weights average the per-epoch vectors.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Union

import numpy as np

from .ground import GroundedModel, _segment_sum

logger = logging.getLogger(__name__)


class LearningError(Exception):
    pass


@dataclass
class LearnConfig:
    iterations: int = 10
    step: float = 1.0
    quadrature_points: int = 151

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.step < 0:
            raise ValueError("step must be nonnegative")
        q = self.quadrature_points
        if q < 3 or q % 2 == 0:
            raise ValueError("quadrature_points must be odd and >= 3")


# ---------------------------------------------------------------------------
# Initial weights
# ---------------------------------------------------------------------------

def init_weights(model: GroundedModel,
                 sources: Optional[Mapping[str, str]] = None) -> dict[str, float]:
    """Grounding-balanced initial weights.

    For every source with at least one grounded schema, unit mass is
    split equally over its grounded schemas and each schema's share is
    divided by its grounding count, so ``w_s * n_s`` sums to the same
    total for every active source. Schemas without groundings get weight
    zero and do not dilute their source's mass.
    """
    sources = dict(sources) if sources is not None else dict(model.sources)
    missing = [s for s in model.schema_ids if s not in sources]
    if missing:
        raise LearningError(f"schemas without a source tag: {missing}")
    active_per_source: dict[str, int] = {}
    for sid in model.schema_ids:
        if model.counts[sid] > 0:
            src = sources[sid]
            active_per_source[src] = active_per_source.get(src, 0) + 1
    if not active_per_source:
        raise LearningError("model has no groundings at all")
    out = {}
    for sid in model.schema_ids:
        n = model.counts[sid]
        if n == 0:
            out[sid] = 0.0
        else:
            out[sid] = 1.0 / (active_per_source[sources[sid]] * n)
    return out


# ---------------------------------------------------------------------------
# Quadrature machinery for per-variable conditionals
# ---------------------------------------------------------------------------

def _simpson_weights(q: int) -> np.ndarray:
    h = 1.0 / (q - 1)
    w = np.ones(q)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return w * (h / 3.0)


@dataclass
class _Conditionals:
    """Everything the PLL and its gradient need, given fixed weights."""

    pll: float
    grad: np.ndarray  # per schema, d PLL / d w_s


def _conditional_pass(model: GroundedModel, y_obs: np.ndarray, q: int,
                      want_grad: bool) -> _Conditionals:
    c = model.compiled()
    n_schemas = len(model.schema_ids)
    if c.n_rules == 0:
        return _Conditionals(0.0, np.zeros(n_schemas))

    w_rule = model.rule_weights()
    if not np.all(np.isfinite(w_rule)):
        raise LearningError("non-finite weight")

    grid = np.linspace(0.0, 1.0, q)
    simps = _simpson_weights(q)
    V, L = c.n_vars, len(c.idx)
    rep = np.repeat

    s_obs = _segment_sum(c.coef * y_obs[c.idx], c.ptr) + c.const
    d_gold = np.maximum(0.0, s_obs)
    dp_gold = np.where(c.exponent == 2, d_gold * d_gold, d_gold)
    if not np.all(np.isfinite(dp_gold)):
        raise LearningError("non-finite energy at the gold assignment")

    # per-incidence hinge d(t) = max(0, a t + b): slope from the rule's
    # coefficient on that variable, intercept from all other terms
    a = c.coef
    b = rep(s_obs, c.seg_len) - c.coef * y_obs[c.idx]
    p2 = rep(c.exponent == 2, c.seg_len)
    w_inc = rep(w_rule, c.seg_len)

    chunk = max(1, 4_000_000 // q)

    # pass 1: conditional energies E[i, t]
    E = np.zeros((V, q))
    for lo in range(0, L, chunk):
        hi = min(L, lo + chunk)
        D = np.maximum(0.0, np.outer(a[lo:hi], grid) + b[lo:hi, None])
        Dp = np.where(p2[lo:hi, None], D * D, D)
        WDp = w_inc[lo:hi, None] * Dp
        for k in range(q):
            E[:, k] += np.bincount(c.idx[lo:hi], weights=WDp[:, k], minlength=V)

    shift = E.min(axis=1)
    P = np.exp(-(E - shift[:, None]))
    Z = P @ simps
    if not np.all(Z > 0.0):
        raise LearningError("degenerate conditional normalizer")

    e_gold = np.bincount(c.idx, weights=w_inc * rep(dp_gold, c.seg_len), minlength=V)
    pll = float(np.sum(-(e_gold - shift) - np.log(Z)))

    grad = np.zeros(n_schemas)
    if want_grad:
        schema_inc = rep(c.schema_idx, c.seg_len)
        dp_gold_inc = rep(dp_gold, c.seg_len)
        for lo in range(0, L, chunk):
            hi = min(L, lo + chunk)
            D = np.maximum(0.0, np.outer(a[lo:hi], grid) + b[lo:hi, None])
            Dp = np.where(p2[lo:hi, None], D * D, D)
            rows = c.idx[lo:hi]
            numer = (Dp * P[rows]) @ simps
            expect = numer / Z[rows]
            contrib = expect - dp_gold_inc[lo:hi]
            grad += np.bincount(schema_inc[lo:hi], weights=contrib,
                                minlength=n_schemas)
    return _Conditionals(pll, grad)


def _check_assignment(model: GroundedModel, y_obs) -> np.ndarray:
    y = np.asarray(y_obs, dtype=float)
    if y.shape != (model.n_variables,):
        raise LearningError(
            f"gold assignment shape {y.shape} does not match "
            f"{model.n_variables} variables"
        )
    if np.any((y < 0) | (y > 1)):
        raise LearningError("gold assignment outside [0, 1]")
    return y


def pseudo_log_likelihood(model: GroundedModel, y_obs, q: int = 151) -> float:
    """Sum over variables of the log conditional density of the gold
    value given all other variables at gold, normalized on [0, 1] by
    Simpson quadrature. Variables touched by no potential contribute 0."""
    if q < 3 or q % 2 == 0:
        raise ValueError("quadrature points must be odd and >= 3")
    y = _check_assignment(model, y_obs)
    return _conditional_pass(model, y, q, want_grad=False).pll


def pll_gradient(model: GroundedModel, y_obs, q: int = 151) -> dict[str, float]:
    """Per-schema gradient of the pseudo-log-likelihood with respect to
    the schema weight: expected minus observed total distance."""
    if q < 3 or q % 2 == 0:
        raise ValueError("quadrature points must be odd and >= 3")
    y = _check_assignment(model, y_obs)
    grad = _conditional_pass(model, y, q, want_grad=True).grad
    return {sid: float(g) for sid, g in zip(model.schema_ids, grad)}


# ---------------------------------------------------------------------------
# Voted perceptron
# ---------------------------------------------------------------------------

@dataclass
class WeightRow:
    schema_id: str
    source: str
    initial: float
    learned: float
    relative: Optional[float]  # learned / initial; None when initial == 0
    groundings: int


@dataclass
class WeightReport:
    rows: list[WeightRow] = field(default_factory=list)

    @property
    def learned(self) -> dict[str, float]:
        return {r.schema_id: r.learned for r in self.rows}

    @property
    def relative(self) -> dict[str, Optional[float]]:
        return {r.schema_id: r.relative for r in self.rows}

    def to_tsv(self, path: Union[str, Path]) -> None:
        with Path(path).open("w", encoding="utf-8") as fh:
            fh.write("rule\trelative_weight\tgroundings\n")
            for r in self.rows:
                rel = "-" if r.relative is None else f"{r.relative:.4f}"
                fh.write(f"{r.schema_id}\t{rel}\t{r.groundings}\n")


def learn_weights(model: GroundedModel, y_obs, cfg: Optional[LearnConfig] = None,
                  ) -> WeightReport:
    """Voted-perceptron ascent on the pseudo-log-likelihood.

    Starting from the model's current weights, each epoch takes one
    projected gradient step per schema, with the gradient normalized by
    the schema's grounding count so the step size is comparable across
    schemas of very different sizes. The reported learned weights are
    the average of the per-epoch weight vectors. The model's own weights
    are left untouched.
    """
    cfg = cfg or LearnConfig()
    y = _check_assignment(model, y_obs)

    initial = dict(model.weights)
    counts = model.counts
    current = dict(initial)
    history: list[dict[str, float]] = []

    saved = dict(model.weights)
    try:
        for _ in range(cfg.iterations):
            model.set_weights(current)
            grads = pll_gradient(model, y, cfg.quadrature_points)
            for sid in model.schema_ids:
                n = counts[sid]
                if n == 0:
                    continue
                current[sid] = max(0.0, current[sid] + cfg.step * grads[sid] / n)
            history.append(dict(current))
    finally:
        model.set_weights(saved)

    learned = {}
    for sid in model.schema_ids:
        values = [h[sid] for h in history]
        # exact when an epoch never moves a weight (e.g. step 0)
        learned[sid] = values[0] if all(v == values[0] for v in values) \
            else float(np.mean(values))
    rows = []
    for sid in model.schema_ids:
        w0 = initial[sid]
        w1 = learned[sid]
        rows.append(WeightRow(
            schema_id=sid,
            source=model.sources[sid],
            initial=w0,
            learned=w1,
            relative=(w1 / w0) if w0 > 0 else None,
            groundings=counts[sid],
        ))
    return WeightReport(rows)
