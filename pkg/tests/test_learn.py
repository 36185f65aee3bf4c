"""Weight initialization, pseudo-likelihood, and voted-perceptron tests."""

from __future__ import annotations

import math

import numpy as np
import pytest
from scipy.integrate import quad

from conftest import make_model
from softkg.ground import ground
from softkg.learn import (
    LearnConfig,
    LearningError,
    init_weights,
    learn_weights,
    pll_gradient,
    pseudo_log_likelihood,
)
from softkg.rules import default_rule_templates


class TestInitWeights:
    def test_equal_contribution_example(self):
        m = make_model([("A1", {0: 1.0}, 0.0), ("A2", {0: 1.0}, 0.1),
                        ("B1", {0: -1.0}, 1.0)], 1)
        m.counts = {"A1": 10, "A2": 30, "B1": 20}
        m.sources = {"A1": "crf", "A2": "crf", "B1": "prior"}
        w = init_weights(m)
        assert w["A1"] == pytest.approx(0.05)
        assert w["A2"] == pytest.approx(1 / 60)
        assert w["B1"] == pytest.approx(0.05)

    def test_single_schema_mass_one(self):
        m = make_model([("only", {0: 1.0}, 0.0)], 1)
        m.counts = {"only": 7}
        w = init_weights(m)
        assert w["only"] == pytest.approx(1 / 7)

    def test_zero_grounding_schema_excluded(self):
        m = make_model([("a", {0: 1.0}, 0.0), ("b", {0: -1.0}, 1.0)], 1)
        m.counts = {"a": 4, "b": 0}
        m.sources = {"a": "ontologies", "b": "ontologies"}
        w = init_weights(m)
        assert w["b"] == 0.0
        assert w["a"] == pytest.approx(1 / 4)  # b does not dilute the source

    def test_per_source_contribution_equal(self):
        m = make_model([(s, {0: 1.0}, 0.0) for s in ("a", "b", "c", "d")], 1)
        m.counts = {"a": 3, "b": 11, "c": 7, "d": 5}
        m.sources = {"a": "crf", "b": "crf", "c": "narratives", "d": "prior"}
        w = init_weights(m)
        per_source = {}
        for sid, src in m.sources.items():
            per_source[src] = per_source.get(src, 0.0) + w[sid] * m.counts[sid]
        totals = list(per_source.values())
        assert all(abs(t - totals[0]) < 1e-9 for t in totals)

    def test_no_groundings_at_all_rejected(self):
        m = make_model([("a", {0: 1.0}, 0.0)], 1)
        m.counts = {"a": 0}
        with pytest.raises(LearningError):
            init_weights(m)


class TestPseudoLogLikelihood:
    def test_untouched_variable_contributes_zero(self):
        m = make_model([("neg", {0: 1.0}, 0.0)], 2, gold=[0.0, 1.0])
        with_iso = pseudo_log_likelihood(m, [0.0, 1.0])
        alone = pseudo_log_likelihood(make_model([("neg", {0: 1.0}, 0.0)], 1), [0.0])
        assert with_iso == pytest.approx(alone, abs=1e-12)

    def test_negative_prior_matches_quadrature_oracle(self):
        m = make_model([("neg", {0: 1.0}, 0.0)], 1)
        z, _ = quad(lambda t: math.exp(-t * t), 0.0, 1.0)
        assert pseudo_log_likelihood(m, [0.0], q=151) == pytest.approx(
            -math.log(z), abs=1e-9)

    def test_doubling_weights_direction(self):
        # gold violates the rule: doubling the weight lowers the PLL
        m = make_model([("neg", {0: 1.0}, 0.0)], 1)
        base = pseudo_log_likelihood(m, [1.0])
        m.set_weights({"neg": 2.0})
        assert pseudo_log_likelihood(m, [1.0]) < base
        # gold is the strict mode: doubling raises the PLL
        m.set_weights({"neg": 1.0})
        base = pseudo_log_likelihood(m, [0.0])
        m.set_weights({"neg": 2.0})
        assert pseudo_log_likelihood(m, [0.0]) > base

    def test_even_quadrature_rejected(self):
        m = make_model([("neg", {0: 1.0}, 0.0)], 1)
        with pytest.raises(ValueError):
            pseudo_log_likelihood(m, [0.0], q=100)

    def test_gold_shape_checked(self):
        m = make_model([("neg", {0: 1.0}, 0.0)], 1)
        with pytest.raises(LearningError):
            pseudo_log_likelihood(m, [0.0, 0.0])


def _mixed_fixture():
    """Three variables, four schemas, mixed structure for gradient checks."""
    pots = [
        ("prior_neg", {0: 1.0}, 0.0), ("prior_neg", {1: 1.0}, 0.0),
        ("prior_neg", {2: 1.0}, 0.0),
        ("prior_pos", {0: -1.0}, 1.0), ("prior_pos", {1: -1.0}, 1.0),
        ("link", {0: 1.0, 1: -1.0}, 0.0), ("link", {1: 1.0, 2: -1.0}, 0.0),
        ("push", {2: -1.0}, 0.7),
    ]
    weights = {"prior_neg": 0.8, "prior_pos": 0.6, "link": 1.3, "push": 0.9}
    m = make_model(pots, 3, weights=weights)
    m.counts = {"prior_neg": 3, "prior_pos": 2, "link": 2, "push": 1}
    return m


class TestGradient:
    def test_matches_finite_differences(self):
        m = _mixed_fixture()
        gold = np.array([0.9, 0.3, 0.5])
        grads = pll_gradient(m, gold, q=151)
        h = 1e-6
        for sid in m.schema_ids:
            w0 = m.weights[sid]
            m.set_weights({sid: w0 + h})
            up = pseudo_log_likelihood(m, gold, q=151)
            m.set_weights({sid: w0 - h})
            dn = pseudo_log_likelihood(m, gold, q=151)
            m.set_weights({sid: w0})
            fd = (up - dn) / (2 * h)
            assert grads[sid] == pytest.approx(fd, rel=1e-4, abs=1e-7), sid

    def test_quadrature_convergence(self):
        m = _mixed_fixture()
        gold = np.array([1.0, 0.0, 1.0])
        g1 = pll_gradient(m, gold, q=151)
        g2 = pll_gradient(m, gold, q=301)
        for sid in m.schema_ids:
            assert abs(g1[sid] - g2[sid]) < 1e-4

    def test_expectation_matches_monte_carlo(self):
        # single variable, single rule: E[d^2] via self-normalized
        # importance sampling with uniform proposals
        m = make_model([("neg", {0: 1.0}, 0.0)], 1, weights={"neg": 1.0})
        gold = np.array([0.0])
        e_quad = pll_gradient(m, gold, q=301)["neg"]  # d(gold) = 0
        rng = np.random.default_rng(0)
        t = rng.uniform(0.0, 1.0, size=1_000_000)
        w = np.exp(-t * t)
        e_mc = float(np.sum(t * t * w) / np.sum(w))
        assert abs(e_quad - e_mc) < 1e-3


class TestLearnWeights:
    def test_step_zero_is_noop(self):
        m = _mixed_fixture()
        report = learn_weights(m, [1.0, 0.0, 1.0], LearnConfig(iterations=3, step=0.0))
        for row in report.rows:
            assert row.learned == row.initial
            assert row.relative == pytest.approx(1.0)

    def test_flat_linear_fixture_is_stationary(self):
        # equal-weight opposing linear hinges cancel: uniform conditional,
        # gradient exactly zero at the (flat) mode
        pots = [("up", {0: -1.0}, 1.0), ("down", {0: 1.0}, 0.0)]
        m = make_model(pots, 1, squared=False)
        grads = pll_gradient(m, [0.5])
        assert grads["up"] == pytest.approx(0.0, abs=1e-9)
        assert grads["down"] == pytest.approx(0.0, abs=1e-9)
        report = learn_weights(m, [0.5], LearnConfig(iterations=4, step=1.0))
        for row in report.rows:
            assert row.learned == pytest.approx(row.initial, abs=1e-9)

    def test_agreeing_rule_gains_disagreeing_loses(self, shared_class_graph):
        rs = default_rule_templates({"ontologies"}, include_crf=False)
        model = ground(rs, shared_class_graph)
        model.set_weights(init_weights(model))
        report = learn_weights(model, [1.0], LearnConfig(iterations=5))
        rel = report.relative
        assert rel["sim_drug_has_pharmclass_pos"] > 1.0
        assert rel["prior_neg"] < 1.0

    def test_weights_stay_nonnegative(self):
        # gold violates prior_pos maximally; a large step must project to 0
        m = make_model([("prior_pos", {0: -1.0}, 1.0), ("prior_neg", {0: 1.0}, 0.0)], 1)
        report = learn_weights(m, [0.0], LearnConfig(iterations=6, step=25.0))
        assert all(row.learned >= 0.0 for row in report.rows)
        assert report.learned["prior_pos"] == 0.0

    def test_single_epoch_matches_manual_update(self):
        m = _mixed_fixture()
        gold = np.array([1.0, 0.0, 1.0])
        grads = pll_gradient(m, gold, q=151)
        expected = {
            sid: max(0.0, m.weights[sid] + 1.0 * grads[sid] / m.counts[sid])
            for sid in m.schema_ids
        }
        report = learn_weights(m, gold, LearnConfig(iterations=1))
        for sid, w in report.learned.items():
            assert w == pytest.approx(expected[sid], rel=1e-12)

    def test_voted_average_of_epochs(self):
        m = _mixed_fixture()
        gold = np.array([1.0, 0.0, 1.0])
        saved = dict(m.weights)
        current = dict(saved)
        history = []
        for _ in range(3):
            m.set_weights(current)
            grads = pll_gradient(m, gold, q=151)
            for sid in m.schema_ids:
                current[sid] = max(
                    0.0, current[sid] + grads[sid] / m.counts[sid])
            history.append(dict(current))
        m.set_weights(saved)
        report = learn_weights(m, gold, LearnConfig(iterations=3))
        for sid in m.schema_ids:
            manual = np.mean([h[sid] for h in history])
            assert report.learned[sid] == pytest.approx(manual, rel=1e-12)

    def test_deterministic(self):
        m = _mixed_fixture()
        gold = np.array([0.2, 0.8, 0.5])
        r1 = learn_weights(m, gold, LearnConfig(iterations=4))
        r2 = learn_weights(m, gold, LearnConfig(iterations=4))
        assert r1.learned == r2.learned

    def test_model_weights_untouched(self):
        m = _mixed_fixture()
        before = dict(m.weights)
        learn_weights(m, [1.0, 0.0, 1.0], LearnConfig(iterations=2))
        assert m.weights == before

    def test_relative_none_for_zero_initial(self):
        m = make_model([("a", {0: 1.0}, 0.0), ("b", {0: -1.0}, 1.0)], 1,
                       weights={"a": 1.0, "b": 0.0})
        m.counts = {"a": 1, "b": 0}
        report = learn_weights(m, [0.0], LearnConfig(iterations=1))
        assert report.relative["b"] is None

    def test_report_tsv(self, tmp_path):
        m = _mixed_fixture()
        report = learn_weights(m, [1.0, 0.0, 1.0], LearnConfig(iterations=2))
        out = tmp_path / "weights.tsv"
        report.to_tsv(out)
        lines = out.read_text().splitlines()
        assert lines[0] == "rule\trelative_weight\tgroundings"
        assert len(lines) == 1 + len(m.schema_ids)
