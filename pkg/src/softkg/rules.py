"""Weighted first-order rule schemas and their concrete syntax.

A rule is ``weight [source] @id: body -> head`` where the body is a
``&``-joined list of literals and ``(X != Y)`` inequality constraints,
and literals are ``!``-negatable predicate applications. Bare identifiers
in argument position are variables; quoted strings are entity constants.
An empty body (``-> head``) is a prior. Source tags and the ``@id`` tag
are optional; sources default by vocabulary, ids by position.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable, Iterator, Optional, Sequence, Union

from .kg import (
    CRF_TREATS,
    DISEASE_RELATIONS,
    DRUG_RELATIONS,
    Kind,
    KnowledgeGraph,
    MENTIONED_IN,
    TREATS,
    canonical_id,
)

SOURCES = ("crf", "ontologies", "narratives", "prior")

_SOURCE_ALIASES = {
    "crf": "crf",
    "ont": "ontologies",
    "ontologies": "ontologies",
    "narr": "narratives",
    "narratives": "narratives",
    "prior": "prior",
}


class RuleParseError(Exception):
    """Syntax error in a rules file; message is line-anchored."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True, order=True)
class Variable:
    name: str


@dataclass(frozen=True, order=True)
class Constant:
    value: str


Term = Union[Variable, Constant]


@dataclass(frozen=True)
class Literal:
    predicate: str
    args: tuple[Term, ...]
    negated: bool = False

    def variables(self) -> list[Variable]:
        return [a for a in self.args if isinstance(a, Variable)]

    def render(self) -> str:
        parts = []
        for a in self.args:
            parts.append(a.name if isinstance(a, Variable) else f"'{a.value}'")
        neg = "!" if self.negated else ""
        return f"{neg}{self.predicate}({', '.join(parts)})"


@dataclass(frozen=True)
class RuleSchema:
    """A weighted implication; grounding turns each instantiation into a
    hinge potential with exponent 1 (linear) or 2 (squared)."""

    id: str
    weight: float
    body: tuple[Literal, ...]
    head: Literal
    inequalities: tuple[tuple[str, str], ...] = ()
    squared: bool = True
    source: str = "prior"
    learnable: bool = True

    def __post_init__(self):
        if self.weight < 0:
            raise ValueError(f"rule {self.id}: negative weight {self.weight}")
        if self.source not in SOURCES:
            raise ValueError(f"rule {self.id}: unknown source {self.source!r}")
        body_vars = {v.name for lit in self.body for v in lit.variables()}
        if self.body:
            missing = [v.name for v in self.head.variables() if v.name not in body_vars]
            if missing:
                raise ValueError(
                    f"rule {self.id}: head variable(s) {', '.join(missing)} not in body"
                )
        for a, b in self.inequalities:
            if a not in body_vars or b not in body_vars:
                raise ValueError(
                    f"rule {self.id}: inequality over unknown variable ({a} != {b})"
                )

    @property
    def exponent(self) -> int:
        return 2 if self.squared else 1

    @property
    def is_prior(self) -> bool:
        return not self.body

    def render(self) -> str:
        body = " & ".join(
            [lit.render() for lit in self.body]
            + [f"({a} != {b})" for a, b in self.inequalities]
        )
        prefix = f"{self.weight:g} [{self.source}] @{self.id}:"
        if body:
            return f"{prefix} {body} -> {self.head.render()}"
        return f"{prefix} -> {self.head.render()}"


class RuleSet:
    """Ordered collection of schemas with unique ids."""

    def __init__(self, schemas: Iterable[RuleSchema]):
        self.schemas: list[RuleSchema] = list(schemas)
        seen = set()
        for s in self.schemas:
            if s.id in seen:
                raise ValueError(f"duplicate rule id {s.id!r}")
            seen.add(s.id)
        self._by_id = {s.id: s for s in self.schemas}

    def __iter__(self) -> Iterator[RuleSchema]:
        return iter(self.schemas)

    def __len__(self) -> int:
        return len(self.schemas)

    def __getitem__(self, rule_id: str) -> RuleSchema:
        return self._by_id[rule_id]

    def __contains__(self, rule_id: str) -> bool:
        return rule_id in self._by_id

    def sources(self) -> dict[str, str]:
        return {s.id: s.source for s in self.schemas}

    def render(self) -> str:
        return render_rules(self)


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"""\s*(?:
        (?P<number>\d+(?:\.\d+)?(?:[eE][+-]?\d+)?)
      | (?P<arrow>->)
      | (?P<neq>!=)
      | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
      | (?P<string>'[^']*'|"[^"]*")
      | (?P<punct>[()\[\]:,&!@])
    )""",
    re.VERBOSE,
)


def _tokens(line: str, lineno: int) -> list[tuple[str, str]]:
    out = []
    pos = 0
    while pos < len(line):
        if line[pos:].strip() == "":
            break
        m = _TOKEN_RE.match(line, pos)
        if m is None:
            raise RuleParseError(lineno, f"unexpected character {line[pos:].strip()[0]!r}")
        pos = m.end()
        kind = m.lastgroup
        assert kind is not None
        out.append((kind, m.group(kind)))
    return out


class _Parser:
    def __init__(self, toks: list[tuple[str, str]], lineno: int):
        self.toks = toks
        self.i = 0
        self.lineno = lineno

    def peek(self) -> Optional[tuple[str, str]]:
        return self.toks[self.i] if self.i < len(self.toks) else None

    def next(self) -> tuple[str, str]:
        tok = self.peek()
        if tok is None:
            raise RuleParseError(self.lineno, "unexpected end of rule")
        self.i += 1
        return tok

    def expect(self, kind: str, value: Optional[str] = None) -> str:
        tok = self.next()
        if tok[0] != kind or (value is not None and tok[1] != value):
            want = value if value is not None else kind
            raise RuleParseError(self.lineno, f"expected {want!r}, got {tok[1]!r}")
        return tok[1]

    def at(self, kind: str, value: Optional[str] = None) -> bool:
        tok = self.peek()
        return tok is not None and tok[0] == kind and (value is None or tok[1] == value)

    def literal(self) -> Literal:
        negated = False
        if self.at("punct", "!"):
            self.next()
            negated = True
        pred = self.expect("ident")
        self.expect("punct", "(")
        args: list[Term] = [self.term()]
        while self.at("punct", ","):
            self.next()
            args.append(self.term())
        self.expect("punct", ")")
        return Literal(pred, tuple(args), negated)

    def term(self) -> Term:
        tok = self.next()
        if tok[0] == "ident":
            return Variable(tok[1])
        if tok[0] == "string":
            return Constant(canonical_id(tok[1][1:-1]))
        raise RuleParseError(self.lineno, f"expected argument, got {tok[1]!r}")


def _parse_rule_line(line: str, lineno: int, ordinal: int, squared: bool) -> RuleSchema:
    p = _Parser(_tokens(line, lineno), lineno)
    weight = float(p.expect("number"))
    source: Optional[str] = None
    rule_id = f"r{ordinal}"
    if p.at("punct", "["):
        p.next()
        raw = p.expect("ident")
        source = _SOURCE_ALIASES.get(raw.lower())
        if source is None:
            raise RuleParseError(lineno, f"unknown source tag {raw!r}")
        p.expect("punct", "]")
    if p.at("punct", "@"):
        p.next()
        rule_id = p.expect("ident")
    p.expect("punct", ":")

    body: list[Literal] = []
    inequalities: list[tuple[str, str]] = []
    while not p.at("arrow"):
        if p.at("punct", "("):
            p.next()
            a = p.expect("ident")
            p.expect("neq")
            b = p.expect("ident")
            p.expect("punct", ")")
            inequalities.append((a, b))
        else:
            body.append(p.literal())
        if p.at("punct", "&"):
            p.next()
        elif not p.at("arrow"):
            tok = p.peek()
            got = tok[1] if tok else "end of rule"
            raise RuleParseError(lineno, f"expected '&' or '->', got {got!r}")
    p.expect("arrow")
    head = p.literal()
    if p.peek() is not None:
        raise RuleParseError(lineno, f"trailing tokens after head: {p.peek()[1]!r}")

    schema = RuleSchema(
        id=rule_id,
        weight=weight,
        body=tuple(body),
        head=head,
        inequalities=tuple(inequalities),
        squared=squared,
        source=source if source is not None else _infer_source(body, head),
    )
    return schema


def _infer_source(body: Sequence[Literal], head: Literal) -> str:
    preds = {lit.predicate for lit in body} | {head.predicate}
    if not body:
        return "prior"
    if CRF_TREATS in preds:
        return "crf"
    if MENTIONED_IN in preds:
        return "narratives"
    return "ontologies"


def parse_rules(text: str, squared: bool = True) -> RuleSet:
    """Parse a rules file into a :class:`RuleSet`, preserving order.

    ``squared`` selects the hinge exponent applied to every parsed rule
    (the syntax does not carry it).
    """
    schemas = []
    ordinal = 0
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        ordinal += 1
        try:
            schemas.append(_parse_rule_line(line, lineno, ordinal, squared))
        except ValueError as exc:
            if isinstance(exc, RuleParseError):
                raise
            raise RuleParseError(lineno, str(exc)) from exc
    return RuleSet(schemas)


def render_rules(rs: RuleSet) -> str:
    """Pretty-print a rule set; parses back to an identical schema list
    (modulo the hinge exponent, which the caller re-supplies)."""
    return "\n".join(s.render() for s in rs) + "\n"


# ---------------------------------------------------------------------------
# Validation against a graph's predicate signatures
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Diagnostic:
    rule_id: str
    message: str

    def __str__(self) -> str:
        return f"{self.rule_id}: {self.message}"


def validate(rs: RuleSet, g: KnowledgeGraph) -> list[Diagnostic]:
    """Check every schema against the graph's predicate signatures.

    Returns diagnostics (empty means valid): unknown predicates, arity
    mismatches, and variables whose admissible kinds conflict across
    literals.
    """
    out: list[Diagnostic] = []
    for schema in rs:
        var_kinds: dict[str, frozenset[Kind]] = {}
        ok = True
        for lit in list(schema.body) + [schema.head]:
            sig = g.signatures.get(lit.predicate)
            if sig is None:
                out.append(Diagnostic(schema.id, f"unknown predicate {lit.predicate!r}"))
                ok = False
                continue
            if len(lit.args) != sig.arity:
                out.append(Diagnostic(
                    schema.id,
                    f"{lit.predicate} expects {sig.arity} arguments, got {len(lit.args)}",
                ))
                ok = False
                continue
            for arg, allowed in zip(lit.args, sig.arg_kinds):
                if isinstance(arg, Variable):
                    prior = var_kinds.get(arg.name)
                    narrowed = allowed if prior is None else (prior & allowed)
                    if not narrowed:
                        out.append(Diagnostic(
                            schema.id,
                            f"variable {arg.name} has conflicting kinds across literals",
                        ))
                        ok = False
                    else:
                        var_kinds[arg.name] = narrowed
        if ok and not schema.is_prior:
            bound = {v.name for lit in schema.body for v in lit.variables()}
            for v in schema.head.variables():
                if v.name not in bound:
                    out.append(Diagnostic(schema.id, f"head variable {v.name} unbound"))
    return out


# ---------------------------------------------------------------------------
# The default rule templates
# ---------------------------------------------------------------------------

def _lit(pred: str, *names: str, negated: bool = False) -> Literal:
    return Literal(pred, tuple(Variable(n) for n in names), negated)


def default_rule_templates(graphs: Iterable[str] = (),
                           include_crf: bool = True,
                           squared: bool = True,
                           weight: float = 1.0) -> RuleSet:
    """The stock rule set over the requested evidence sources.

    ``graphs`` is a subset of {"ontologies", "narratives"}; ``include_crf``
    adds the pair of agree-with-the-sequence-tagger rules. The two priors
    are always emitted. With both graphs and the CRF this yields 22
    schemas: 2 priors + 2 CRF + 14 ontology (2 rule shapes x 3 disease
    relations + 2 shapes x 4 drug relations) + 4 narrative.
    """
    graphs = set(graphs)
    unknown = graphs - {"ontologies", "narratives"}
    if unknown:
        raise ValueError(f"unknown graph selector(s): {sorted(unknown)}")
    if not graphs and not include_crf:
        raise ValueError("need at least one evidence source")

    def schema(**kw) -> RuleSchema:
        return RuleSchema(weight=weight, squared=squared, **kw)

    out = [
        schema(id="prior_pos", body=(), head=_lit(TREATS, "D", "Dis"), source="prior"),
        schema(id="prior_neg", body=(), head=_lit(TREATS, "D", "Dis", negated=True),
               source="prior"),
    ]
    if include_crf:
        out.append(schema(
            id="crf_pos", source="crf",
            body=(_lit(CRF_TREATS, "D", "Dis"),),
            head=_lit(TREATS, "D", "Dis"),
        ))
        out.append(schema(
            id="crf_neg", source="crf",
            body=(_lit(CRF_TREATS, "D", "Dis", negated=True),),
            head=_lit(TREATS, "D", "Dis", negated=True),
        ))

    def disease_pair(rel: str, source: str) -> list[RuleSchema]:
        shared = (_lit(rel, "S1", "X"), _lit(rel, "S2", "X"))
        return [
            schema(id=f"sim_disease_{rel}_pos", source=source,
                   body=shared + (_lit(TREATS, "D", "S1"),),
                   inequalities=(("S1", "S2"),),
                   head=_lit(TREATS, "D", "S2")),
            schema(id=f"sim_disease_{rel}_neg", source=source,
                   body=shared + (_lit(TREATS, "D", "S1", negated=True),),
                   inequalities=(("S1", "S2"),),
                   head=_lit(TREATS, "D", "S2", negated=True)),
        ]

    def drug_pair(rel: str, source: str) -> list[RuleSchema]:
        shared = (_lit(rel, "D1", "X"), _lit(rel, "D2", "X"))
        return [
            schema(id=f"sim_drug_{rel}_pos", source=source,
                   body=shared + (_lit(TREATS, "D1", "Dis"),),
                   inequalities=(("D1", "D2"),),
                   head=_lit(TREATS, "D2", "Dis")),
            schema(id=f"sim_drug_{rel}_neg", source=source,
                   body=shared + (_lit(TREATS, "D1", "Dis", negated=True),),
                   inequalities=(("D1", "D2"),),
                   head=_lit(TREATS, "D2", "Dis", negated=True)),
        ]

    if "ontologies" in graphs:
        for rel in DISEASE_RELATIONS:
            out.extend(disease_pair(rel, "ontologies"))
        for rel in DRUG_RELATIONS:
            out.extend(drug_pair(rel, "ontologies"))
    if "narratives" in graphs:
        out.extend(disease_pair(MENTIONED_IN, "narratives"))
        out.extend(drug_pair(MENTIONED_IN, "narratives"))
    return RuleSet(out)
