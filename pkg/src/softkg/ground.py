"""Rule grounding: instantiate schemas against a graph as hinge potentials.

Each valid variable binding of a schema becomes one ground rule encoding
the Lukasiewicz distance to satisfaction of the implication
``b1 & ... & bk -> h`` as ``max(0, c.y + c0)`` over the target variables,
where observed atoms contribute constants and closed-world predicates
treat absent atoms as false. Bindings whose hinge is identically zero on
the unit box, or that touch no target variable, are excluded from the
model and tallied separately.

Enumeration joins literals through per-argument hash indices rather than
scanning the full cross product, so large narrative graphs stay tractable.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .kg import AtomKey, EntityRef, Kind, KnowledgeGraph, TREATS, canonical_id
from .rules import Constant, Literal, RuleSchema, RuleSet, Variable, validate

logger = logging.getLogger(__name__)

_FORM_TOL = 1e-12


class GroundingError(Exception):
    pass


# ---------------------------------------------------------------------------
# Lukasiewicz encoding
# ---------------------------------------------------------------------------

def implication_form(body: Sequence[tuple[Union[int, float], bool]],
                     head: tuple[Union[int, float], bool],
                     ) -> tuple[dict[int, float], float]:
    """Linear form of the implication's distance to satisfaction.

    Terms are ``(var_index_or_value, negated)``: an ``int`` names a target
    variable, a ``float`` is an observed truth value. Returns coefficients
    over variable indices and the constant of ``max(0, c.y + c0)``, i.e.
    ``max(0, sum_i v(b_i) - (k - 1) - v(h))`` with ``v(!a) = 1 - v(a)``.
    """
    coeffs: dict[int, float] = {}
    const = 0.0

    def accumulate(term: tuple[Union[int, float], bool], sign: float) -> None:
        nonlocal const
        value, negated = term
        if negated:
            sign, offset = -sign, sign
        else:
            offset = 0.0
        const += offset
        if isinstance(value, bool):
            raise TypeError("term value must be an int variable index or float constant")
        if isinstance(value, int):
            coeffs[value] = coeffs.get(value, 0.0) + sign
        else:
            const += sign * value

    for term in body:
        accumulate(term, 1.0)
    const -= len(body) - 1
    accumulate(head, -1.0)
    coeffs = {j: c for j, c in coeffs.items() if abs(c) > _FORM_TOL}
    return coeffs, const


@dataclass(frozen=True)
class GroundRule:
    """One hinge potential: ``w_schema * max(0, c.y + c0) ** exponent``."""

    schema_id: str
    var_indices: tuple[int, ...]
    coefficients: tuple[float, ...]
    constant: float
    exponent: int
    binding: tuple[str, ...] = field(default=(), compare=False)


def distance_to_satisfaction(rule: GroundRule, y: Sequence[float]) -> float:
    """``max(0, c.y + c0)`` for one ground rule (exponent not applied)."""
    y = np.asarray(y, dtype=float)
    if rule.var_indices and max(rule.var_indices) >= y.shape[0]:
        raise ValueError(
            f"assignment has {y.shape[0]} entries, rule references "
            f"variable {max(rule.var_indices)}"
        )
    total = rule.constant
    for j, c in zip(rule.var_indices, rule.coefficients):
        total += c * y[j]
    return max(0.0, total)


# ---------------------------------------------------------------------------
# Grounded model
# ---------------------------------------------------------------------------

@dataclass
class _Compiled:
    """Flattened arrays for vectorized inference/learning; one entry per
    (rule, variable) incidence in ``idx``/``coef``."""

    n_vars: int
    idx: np.ndarray        # int64 (L,)
    coef: np.ndarray       # float64 (L,)
    ptr: np.ndarray        # int64 (R+1,) rule offsets into idx/coef
    const: np.ndarray      # float64 (R,)
    exponent: np.ndarray   # int64 (R,)
    schema_idx: np.ndarray  # int64 (R,)
    cnorm2: np.ndarray     # float64 (R,)
    seg_len: np.ndarray    # int64 (R,)
    copy_count: np.ndarray  # int64 (n_vars,)

    @property
    def n_rules(self) -> int:
        return len(self.const)


class GroundedModel:
    """The grounded HL-MRF: target variables, ground hinge potentials,
    per-schema weights and grounding counts."""

    def __init__(self, ruleset: RuleSet, variables: list[AtomKey],
                 gold: list[Optional[float]]):
        self.ruleset = ruleset
        self.variables = variables
        self.var_index: dict[AtomKey, int] = {k: i for i, k in enumerate(variables)}
        self.gold = gold
        self.rules: list[GroundRule] = []
        self.schema_ids: list[str] = [s.id for s in ruleset]
        self.weights: dict[str, float] = {s.id: s.weight for s in ruleset}
        self.counts: dict[str, int] = {s.id: 0 for s in ruleset}
        self.inactive_counts: dict[str, int] = {s.id: 0 for s in ruleset}
        self.exponents: dict[str, int] = {s.id: s.exponent for s in ruleset}
        self.sources: dict[str, str] = {s.id: s.source for s in ruleset}
        self._compiled: Optional[_Compiled] = None

    @property
    def n_variables(self) -> int:
        return len(self.variables)

    @property
    def n_rules(self) -> int:
        return len(self.rules)

    def add_rule(self, rule: GroundRule) -> None:
        self.rules.append(rule)
        self.counts[rule.schema_id] += 1
        self._compiled = None

    def gold_assignment(self) -> np.ndarray:
        if any(v is None for v in self.gold):
            raise GroundingError("model has targets without gold values")
        return np.asarray(self.gold, dtype=float)

    def set_weights(self, weights: dict[str, float]) -> None:
        for sid, w in weights.items():
            if sid not in self.weights:
                raise KeyError(f"unknown schema id {sid!r}")
            self.weights[sid] = w

    def weight_vector(self) -> np.ndarray:
        return np.array([self.weights[s] for s in self.schema_ids], dtype=float)

    def rule_weights(self) -> np.ndarray:
        c = self.compiled()
        return self.weight_vector()[c.schema_idx]

    def compiled(self) -> _Compiled:
        if self._compiled is None:
            self._compiled = self._compile()
        return self._compiled

    def _compile(self) -> _Compiled:
        idx: list[int] = []
        coef: list[float] = []
        ptr = [0]
        const = []
        exponent = []
        schema_pos = {sid: i for i, sid in enumerate(self.schema_ids)}
        schema_idx = []
        for r in self.rules:
            idx.extend(r.var_indices)
            coef.extend(r.coefficients)
            ptr.append(len(idx))
            const.append(r.constant)
            exponent.append(r.exponent)
            schema_idx.append(schema_pos[r.schema_id])
        idx_a = np.asarray(idx, dtype=np.int64)
        coef_a = np.asarray(coef, dtype=float)
        ptr_a = np.asarray(ptr, dtype=np.int64)
        seg_len = np.diff(ptr_a)
        cnorm2 = _segment_sum(coef_a * coef_a, ptr_a)
        copy_count = np.bincount(idx_a, minlength=self.n_variables).astype(np.int64)
        return _Compiled(
            n_vars=self.n_variables,
            idx=idx_a, coef=coef_a, ptr=ptr_a,
            const=np.asarray(const, dtype=float),
            exponent=np.asarray(exponent, dtype=np.int64),
            schema_idx=np.asarray(schema_idx, dtype=np.int64),
            cnorm2=cnorm2, seg_len=seg_len, copy_count=copy_count,
        )


def _segment_sum(values: np.ndarray, ptr: np.ndarray) -> np.ndarray:
    """Per-rule sums of a flattened per-incidence array."""
    csum = np.concatenate(([0.0], np.cumsum(values)))
    return csum[ptr[1:]] - csum[ptr[:-1]]


def grounding_counts(model: GroundedModel) -> dict[str, int]:
    """Active grounding count per schema (duplicates and trivially
    satisfied instantiations excluded)."""
    return dict(model.counts)


def dump_groundings(model: GroundedModel, path: Union[str, Path]) -> None:
    """Debug TSV: schema id, bound constants, linear form."""
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write("schema_id\tconstants\tcoefficients\n")
        for r in model.rules:
            terms = ",".join(
                f"{j}:{c:g}" for j, c in zip(r.var_indices, r.coefficients)
            )
            fh.write(f"{r.schema_id}\t{';'.join(r.binding)}\t{terms};c0={r.constant:g}\n")


# ---------------------------------------------------------------------------
# Enumeration
# ---------------------------------------------------------------------------

@dataclass
class _ClosedIndex:
    atoms: list[tuple[tuple[EntityRef, ...], float]]
    by_pos: list[dict[EntityRef, list[int]]]


@dataclass
class _UniverseEntry:
    args: tuple[EntityRef, EntityRef]
    value: Optional[float]   # observed truth value, None for targets
    var: Optional[int]       # variable index, None for observed


def _join_order(literals: list[Literal]) -> list[Literal]:
    """Greedy most-constrained-first ordering, simulated once up front:
    repeatedly pick the literal sharing the most already-bound variables
    (constants count as bound, declaration order breaks ties)."""
    pending = list(literals)
    bound: set[str] = set()
    out: list[Literal] = []
    while pending:
        def score(lit: Literal) -> int:
            return sum(
                1 for a in lit.args
                if isinstance(a, Constant) or a.name in bound
            )
        best = max(pending, key=score)  # max is stable: first wins ties
        pending.remove(best)
        out.append(best)
        bound.update(v.name for v in best.variables())
    return out


class _Grounder:
    def __init__(self, g: KnowledgeGraph, model: GroundedModel):
        self.g = g
        self.model = model
        self._closed: dict[str, _ClosedIndex] = {}
        self._universe: list[_UniverseEntry] = []
        self._universe_by_args: dict[tuple[EntityRef, EntityRef], _UniverseEntry] = {}
        self._universe_by_pos: list[dict[EntityRef, list[int]]] = [{}, {}]
        self._build_universe()

    def _build_universe(self) -> None:
        entries = []
        for atom in self.g.observed_atoms(TREATS):
            entries.append(_UniverseEntry((atom.args[0], atom.args[1]), atom.value, None))
        for key, var_idx in self.model.var_index.items():
            pred, args = key
            entries.append(_UniverseEntry((args[0], args[1]), None, var_idx))
        entries.sort(key=lambda e: e.args)
        self._universe = entries
        for i, e in enumerate(entries):
            self._universe_by_args[e.args] = e
            for pos in (0, 1):
                self._universe_by_pos[pos].setdefault(e.args[pos], []).append(i)

    def closed_index(self, predicate: str) -> _ClosedIndex:
        idx = self._closed.get(predicate)
        if idx is None:
            atoms = sorted(
                ((a.args, a.value) for a in self.g.observed_atoms(predicate)),
                key=lambda t: t[0],
            )
            by_pos: list[dict[EntityRef, list[int]]] = [
                {} for _ in range(self.g.signatures[predicate].arity)
            ]
            for i, (args, _) in enumerate(atoms):
                for pos, arg in enumerate(args):
                    by_pos[pos].setdefault(arg, []).append(i)
            idx = _ClosedIndex(atoms, by_pos)
            self._closed[predicate] = idx
        return idx

    # -- join -----------------------------------------------------------

    def ground_schema(self, schema: RuleSchema) -> None:
        # positive literals and the head drive the join; negated literals
        # are evaluated once the join has bound their variables, with
        # absent atoms closed to false (so the negated literal holds)
        head_open = not self.g.signatures[schema.head.predicate].closed
        join: list[Literal] = [lit for lit in schema.body if not lit.negated]
        if head_open:
            join.append(schema.head)
        order = _join_order(join)
        joined = {v.name for lit in order for v in lit.variables()}
        loose = sorted({
            v.name
            for lit in list(schema.body) + [schema.head]
            for v in lit.variables()
            if v.name not in joined
        })
        if loose:
            raise GroundingError(
                f"rule {schema.id}: variable(s) {', '.join(loose)} "
                "cannot be bound by any positive literal"
            )
        var_kinds = self._variable_kinds(schema)
        seen_forms: set[tuple] = set()
        self._extend(schema, order, 0, {}, var_kinds, seen_forms)

    def _variable_kinds(self, schema: RuleSchema) -> dict[str, frozenset[Kind]]:
        """Admissible kinds per variable, narrowed across every literal;
        prunes bindings that a later literal would reject anyway."""
        kinds: dict[str, frozenset[Kind]] = {}
        for lit in list(schema.body) + [schema.head]:
            sig = self.g.signatures[lit.predicate]
            for term, allowed in zip(lit.args, sig.arg_kinds):
                if isinstance(term, Variable):
                    prev = kinds.get(term.name)
                    kinds[term.name] = allowed if prev is None else (prev & allowed)
        return kinds

    def _extend(self, schema: RuleSchema, order: list[Literal], depth: int,
                binding: dict[str, EntityRef],
                var_kinds: dict[str, frozenset[Kind]], seen_forms: set) -> None:
        if depth == len(order):
            self._emit(schema, binding, seen_forms)
            return
        lit = order[depth]
        for args in self._candidates(lit, binding):
            added: list[str] = []
            ok = True
            for term, arg in zip(lit.args, args):
                if isinstance(term, Constant):
                    if arg.id != term.value:
                        ok = False
                        break
                else:
                    prev = binding.get(term.name)
                    if prev is None:
                        if arg.kind not in var_kinds[term.name]:
                            ok = False
                            break
                        binding[term.name] = arg
                        added.append(term.name)
                    elif prev != arg:
                        ok = False
                        break
            if ok and self._inequalities_hold(schema, binding, partial=True):
                self._extend(schema, order, depth + 1, binding, var_kinds, seen_forms)
            for name in added:
                del binding[name]

    def _inequalities_hold(self, schema: RuleSchema, binding: dict[str, EntityRef],
                           partial: bool) -> bool:
        for a, b in schema.inequalities:
            ra, rb = binding.get(a), binding.get(b)
            if ra is None or rb is None:
                if partial:
                    continue
                return False
            if ra == rb:
                return False
        return True

    def _candidates(self, lit: Literal, binding: dict[str, EntityRef],
                    ) -> Iterable[tuple[EntityRef, ...]]:
        bound: list[tuple[int, EntityRef]] = []
        for pos, term in enumerate(lit.args):
            if isinstance(term, Constant):
                ref = self._resolve_constant(lit, pos, term)
                if ref is None:
                    return
                bound.append((pos, ref))
            elif term.name in binding:
                bound.append((pos, binding[term.name]))

        closed = self.g.signatures[lit.predicate].closed
        if closed:
            index = self.closed_index(lit.predicate)
            rows: Iterable[int]
            if bound:
                pos, ref = bound[0]
                rows = index.by_pos[pos].get(ref, ())
            else:
                rows = range(len(index.atoms))
            for i in rows:
                args, value = index.atoms[i]
                if value <= 0.0:
                    continue  # closed-world false; cannot satisfy a positive literal
                if all(args[p] == r for p, r in bound):
                    yield args
        else:
            if len(bound) == 2:  # positions appear in order, open predicates are binary
                entry = self._universe_by_args.get((bound[0][1], bound[1][1]))
                if entry is not None:
                    yield entry.args
                return
            if len(bound) == 1:
                pos, ref = bound[0]
                rows = self._universe_by_pos[pos].get(ref, ())
            else:
                rows = range(len(self._universe))
            for i in rows:
                yield self._universe[i].args

    def _resolve_constant(self, lit: Literal, pos: int, term: Constant) -> Optional[EntityRef]:
        allowed = self.g.signatures[lit.predicate].arg_kinds[pos]
        for kind in sorted(allowed):
            ref = EntityRef(kind, term.value)
            if self.g.has_node(ref):
                return ref
        return None

    # -- emission ---------------------------------------------------------

    def _literal_term(self, lit: Literal, binding: dict[str, EntityRef],
                      is_head: bool = False,
                      ) -> Optional[tuple[Union[int, float], bool]]:
        """Bound literal as an implication_form term, or None to skip the
        binding (closed literal with truth 0, or open pair outside the
        universe)."""
        resolved = []
        for pos, t in enumerate(lit.args):
            if isinstance(t, Variable):
                resolved.append(binding[t.name])
            else:
                ref = self._resolve_constant(lit, pos, t)
                if ref is None:
                    raise GroundingError(
                        f"constant {t.value!r} names no node in the graph"
                    )
                resolved.append(ref)
        args = tuple(resolved)
        if self.g.signatures[lit.predicate].closed:
            value = self.g.observed_value(lit.predicate, args)
            truth = 0.0 if value is None else value
            literal_truth = 1.0 - truth if lit.negated else truth
            if literal_truth <= 0.0:
                return None
            return (truth, lit.negated)
        entry = self._universe_by_args.get(args)  # open predicates are binary here
        if entry is None:
            if lit.negated and not is_head:
                # closed-world complement: pairs outside the universe count
                # as false, so the negated body literal is fully true
                return (0.0, True)
            return None
        if entry.var is not None:
            return (entry.var, lit.negated)
        return (float(entry.value), lit.negated)

    def _emit(self, schema: RuleSchema, binding: dict[str, EntityRef],
              seen_forms: set) -> None:
        if not self._inequalities_hold(schema, binding, partial=False):
            return

        body_terms = []
        for lit in schema.body:
            term = self._literal_term(lit, binding)
            if term is None:
                return
            body_terms.append(term)
        head_term = self._literal_term(schema.head, binding, is_head=True)
        if head_term is None:
            return
        coeffs, const = implication_form(body_terms, head_term)

        if not coeffs:
            self.model.inactive_counts[schema.id] += 1
            return
        reachable = sum(max(c, 0.0) for c in coeffs.values()) + const
        if reachable <= _FORM_TOL:
            self.model.inactive_counts[schema.id] += 1
            return

        items = tuple(sorted(coeffs.items()))
        form_key = (items, round(const, 12))
        if form_key in seen_forms:
            return
        seen_forms.add(form_key)
        bound_desc = tuple(
            f"{name}={binding[name].id}" for name in sorted(binding)
        )
        self.model.add_rule(GroundRule(
            schema_id=schema.id,
            var_indices=tuple(j for j, _ in items),
            coefficients=tuple(c for _, c in items),
            constant=const,
            exponent=schema.exponent,
            binding=bound_desc,
        ))


def ground(rs: RuleSet, g: KnowledgeGraph,
           targets: Optional[Iterable[tuple[str, str]]] = None) -> GroundedModel:
    """Ground every schema in ``rs`` against ``g``.

    ``targets`` selects the drug--disease pairs to expose as inference
    variables (ids or EntityRef pairs); by default every target declared
    on the graph. All selected pairs become variables, indexed in sorted
    order, whether or not any rule touches them.
    """
    diagnostics = validate(rs, g)
    if diagnostics:
        raise GroundingError(
            "rule set does not validate: " + "; ".join(str(d) for d in diagnostics)
        )

    declared = {key: gold for key, gold in g.target_atoms(TREATS)}
    if targets is None:
        selected = declared
    else:
        selected = {}
        for pair in targets:
            a, b = pair
            if isinstance(a, EntityRef):
                key: AtomKey = (TREATS, (a, b))
            else:
                key = (TREATS, (EntityRef(next(iter(g.signatures[TREATS].arg_kinds[0])),
                                          canonical_id(a)),
                                EntityRef(next(iter(g.signatures[TREATS].arg_kinds[1])),
                                          canonical_id(b))))
            if key not in declared:
                raise GroundingError(
                    f"target {key[1][0].id} -> {key[1][1].id} is not declared on the graph"
                )
            selected[key] = declared[key]
    if not selected:
        raise GroundingError("target set is empty")

    ordered = sorted(selected)
    model = GroundedModel(rs, ordered, [selected[k] for k in ordered])
    grounder = _Grounder(g, model)
    for schema in rs:
        grounder.ground_schema(schema)
    logger.debug("grounded %d rules over %d variables", model.n_rules, model.n_variables)
    return model
