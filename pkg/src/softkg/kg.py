"""Typed drug--disease knowledge graph.

Data model for the graphs the inference engine runs over: typed entities
(drugs, diseases, attribute values, clinical narratives), observed atoms
under a per-predicate signature, and open target atoms awaiting inference.
Also provides TSV ingestion/serialization, narrative-text mention
extraction via lexicon matching, degree-based drug filtering, and graph
merging.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Optional, Sequence, Union

logger = logging.getLogger(__name__)

VALUE_TOL = 1e-9

TREATS = "treats"
CRF_TREATS = "CRF_treats"
MENTIONED_IN = "is_mentioned_in"
DISEASE_RELATIONS = ("has_associated_morphology", "has_course", "has_finding_site")
DRUG_RELATIONS = ("has_route", "has_substance", "has_doseform", "has_pharmclass")


class GraphError(Exception):
    """Structural violation while building or combining graphs."""


class GraphParseError(GraphError):
    """Malformed input file; message carries file and line number."""

    def __init__(self, source: str, line: int, message: str):
        super().__init__(f"{source}:{line}: {message}")
        self.source = source
        self.line = line


class Kind(str, Enum):
    """Node categories."""

    DRUG = "drug"
    DISEASE = "disease"
    ATTRIBUTE = "attribute"
    NARRATIVE = "narrative"


def canonical_id(raw: str) -> str:
    """Case-folded, whitespace-normalized entity identifier."""
    return re.sub(r"\s+", " ", raw.strip()).casefold()


@dataclass(frozen=True, order=True)
class EntityRef:
    """A typed node; identity is the (kind, id) pair."""

    kind: Kind
    id: str

    def __post_init__(self):
        if not self.id:
            raise GraphError("entity id must be nonempty")
        # refs are dict keys on every hot path; hash once
        object.__setattr__(self, "_hash", hash((self.kind, self.id)))

    def __hash__(self):
        return self._hash


def drug(id: str) -> EntityRef:
    return EntityRef(Kind.DRUG, canonical_id(id))


def disease(id: str) -> EntityRef:
    return EntityRef(Kind.DISEASE, canonical_id(id))


def attribute(id: str) -> EntityRef:
    return EntityRef(Kind.ATTRIBUTE, canonical_id(id))


def narrative(id: str) -> EntityRef:
    return EntityRef(Kind.NARRATIVE, canonical_id(id))


@dataclass(frozen=True)
class Atom:
    """A predicate applied to entities, with a truth value in [0, 1]."""

    predicate: str
    args: tuple[EntityRef, ...]
    value: float

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise GraphError(
                f"atom value {self.value!r} for {self.predicate} outside [0, 1]"
            )


AtomKey = tuple[str, tuple[EntityRef, ...]]


@dataclass(frozen=True)
class PredicateSignature:
    """Declared arity and argument kinds; closed predicates obey the
    closed-world assumption (absent atoms are false)."""

    name: str
    arg_kinds: tuple[frozenset[Kind], ...]
    closed: bool = True

    @property
    def arity(self) -> int:
        return len(self.arg_kinds)


def _sig(name: str, kinds: Sequence[Union[Kind, Iterable[Kind]]], closed: bool = True) -> PredicateSignature:
    resolved = tuple(
        frozenset([k]) if isinstance(k, Kind) else frozenset(k) for k in kinds
    )
    return PredicateSignature(name, resolved, closed)


def default_signatures() -> dict[str, PredicateSignature]:
    """Signature table covering the full default rule vocabulary."""
    sigs = [
        _sig(TREATS, [Kind.DRUG, Kind.DISEASE], closed=False),
        _sig(CRF_TREATS, [Kind.DRUG, Kind.DISEASE]),
        _sig(MENTIONED_IN, [[Kind.DRUG, Kind.DISEASE], Kind.NARRATIVE]),
    ]
    sigs += [_sig(p, [Kind.DISEASE, Kind.ATTRIBUTE]) for p in DISEASE_RELATIONS]
    sigs += [_sig(p, [Kind.DRUG, Kind.ATTRIBUTE]) for p in DRUG_RELATIONS]
    return {s.name: s for s in sigs}


class KnowledgeGraph:
    """Typed nodes plus observed and target atoms.

    Graphs are built once by the loaders/builders in this module and
    treated as immutable afterwards; they can be shared freely across
    parallel experiment runs.
    """

    def __init__(self, signatures: Optional[Mapping[str, PredicateSignature]] = None):
        self.signatures: dict[str, PredicateSignature] = dict(
            signatures if signatures is not None else default_signatures()
        )
        self._nodes: dict[EntityRef, None] = {}
        self._ids: dict[str, set[Kind]] = {}
        self._observed: dict[AtomKey, float] = {}
        self._targets: dict[AtomKey, Optional[float]] = {}

    # -- nodes ---------------------------------------------------------

    def add_node(self, ref: EntityRef) -> EntityRef:
        if ref not in self._nodes:
            self._nodes[ref] = None
            self._ids.setdefault(ref.id, set()).add(ref.kind)
        return ref

    def has_node(self, ref: EntityRef) -> bool:
        return ref in self._nodes

    @property
    def nodes(self) -> list[EntityRef]:
        return list(self._nodes)

    def nodes_of_kind(self, kind: Kind) -> list[EntityRef]:
        return [n for n in self._nodes if n.kind == kind]

    def _resolve_arg(self, raw_id: str, allowed: frozenset[Kind]) -> EntityRef:
        """Find or create the node a TSV edge endpoint refers to.

        Prefers an already-registered node of an allowed kind. Otherwise
        the node is auto-registered when the position admits a single
        kind; an id known only under a disallowed kind is a mismatch.
        """
        cid = canonical_id(raw_id)
        known = self._ids.get(cid, set())
        fitting = sorted(k for k in known if k in allowed)
        if fitting:
            return EntityRef(fitting[0], cid)
        if known:
            raise GraphError(
                f"kind mismatch: {cid!r} is {'/'.join(sorted(k.value for k in known))}, "
                f"expected {'/'.join(sorted(k.value for k in allowed))}"
            )
        if len(allowed) == 1:
            return self.add_node(EntityRef(next(iter(allowed)), cid))
        raise GraphError(
            f"cannot infer kind of undeclared node {cid!r}; add an explicit node row"
        )

    # -- atoms ---------------------------------------------------------

    def _check_atom(self, predicate: str, args: tuple[EntityRef, ...]) -> None:
        sig = self.signatures.get(predicate)
        if sig is None:
            raise GraphError(f"unknown predicate {predicate!r}")
        if len(args) != sig.arity:
            raise GraphError(
                f"{predicate} expects {sig.arity} arguments, got {len(args)}"
            )
        for pos, (arg, allowed) in enumerate(zip(args, sig.arg_kinds)):
            if arg.kind not in allowed:
                raise GraphError(
                    f"kind mismatch: argument {pos + 1} of {predicate} is "
                    f"{arg.kind.value}, expected "
                    f"{'/'.join(sorted(k.value for k in allowed))}"
                )
            if arg not in self._nodes:
                raise GraphError(f"argument {arg.id!r} is not a registered node")

    def add_observed(self, predicate: str, args: Sequence[EntityRef], value: float) -> None:
        args = tuple(args)
        self._check_atom(predicate, args)
        key = (predicate, args)
        if key in self._targets:
            raise GraphError(f"atom {_fmt_key(key)} is already a target")
        prior = self._observed.get(key)
        if prior is not None:
            if abs(prior - value) > VALUE_TOL:
                raise GraphError(
                    f"contradictory duplicate atom {_fmt_key(key)}: "
                    f"{prior} vs {value}"
                )
            return
        Atom(predicate, args, value)  # range check
        self._observed[key] = value

    def add_target(self, predicate: str, args: Sequence[EntityRef],
                   gold: Optional[float] = None) -> None:
        args = tuple(args)
        self._check_atom(predicate, args)
        sig = self.signatures[predicate]
        if sig.closed:
            raise GraphError(f"cannot declare targets for closed predicate {predicate}")
        key = (predicate, args)
        if key in self._observed:
            raise GraphError(f"target {_fmt_key(key)} is already observed")
        prior = self._targets.get(key, _MISSING)
        if prior is not _MISSING:
            if _gold_conflict(prior, gold):
                raise GraphError(f"contradictory gold for target {_fmt_key(key)}")
            if gold is not None:
                self._targets[key] = gold
            return
        if gold is not None and not 0.0 <= gold <= 1.0:
            raise GraphError(f"gold value {gold} outside [0, 1]")
        self._targets[key] = gold

    def observed_value(self, predicate: str, args: tuple[EntityRef, ...]) -> Optional[float]:
        return self._observed.get((predicate, args))

    def is_target(self, predicate: str, args: tuple[EntityRef, ...]) -> bool:
        return (predicate, args) in self._targets

    def observed_atoms(self, predicate: Optional[str] = None) -> Iterator[Atom]:
        for (pred, args), value in self._observed.items():
            if predicate is None or pred == predicate:
                yield Atom(pred, args, value)

    def target_atoms(self, predicate: Optional[str] = None) -> Iterator[tuple[AtomKey, Optional[float]]]:
        for key, gold in self._targets.items():
            if predicate is None or key[0] == predicate:
                yield key, gold

    @property
    def n_observed(self) -> int:
        return len(self._observed)

    @property
    def n_targets(self) -> int:
        return len(self._targets)

    # -- treats helpers --------------------------------------------------

    def treats_universe(self) -> dict[tuple[EntityRef, EntityRef], Optional[float]]:
        """All drug--disease pairs the model may reason about: observed
        treats atoms (with their value) plus declared targets (gold or
        None). Pairs absent from this map are outside the universe."""
        out: dict[tuple[EntityRef, EntityRef], Optional[float]] = {}
        for (pred, args), value in self._observed.items():
            if pred == TREATS:
                out[(args[0], args[1])] = value
        for (pred, args), gold in self._targets.items():
            if pred == TREATS:
                out[(args[0], args[1])] = gold
        return out

    def drug_degree(self, ref: EntityRef) -> int:
        """Number of distinct diseases among this drug's treats atoms
        (observed or target)."""
        seen = set()
        for pred, args in list(self._observed) + list(self._targets):
            if pred == TREATS and args[0] == ref:
                seen.add(args[1])
        return len(seen)


_MISSING = object()


def _gold_conflict(a: Optional[float], b: Optional[float]) -> bool:
    return a is not None and b is not None and abs(a - b) > VALUE_TOL


def _fmt_key(key: AtomKey) -> str:
    pred, args = key
    return f"{pred}({', '.join(a.id for a in args)})"


# ---------------------------------------------------------------------------
# TSV ingestion / serialization
# ---------------------------------------------------------------------------

_KIND_TOKENS = {k.value: k for k in Kind}


def load_graph(path: Union[str, Path],
               signatures: Optional[Mapping[str, PredicateSignature]] = None) -> KnowledgeGraph:
    """Load a graph-TSV file.

    One record per line: ``node<TAB>kind<TAB>id`` or
    ``edge<TAB>predicate<TAB>arg1<TAB>arg2<TAB>value``; ``#`` starts a
    comment. Raises :class:`GraphParseError` with a line number on any
    malformed row, signature violation, or contradictory duplicate.
    """
    path = Path(path)
    g = KnowledgeGraph(signatures)
    with path.open("r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            fields = line.split("\t")
            try:
                _load_row(g, fields)
            except GraphError as exc:
                raise GraphParseError(str(path), lineno, str(exc)) from exc
    return g


def _load_row(g: KnowledgeGraph, fields: list[str]) -> None:
    tag = fields[0].strip()
    if tag == "node":
        if len(fields) != 3:
            raise GraphError(f"node row needs 3 fields, got {len(fields)}")
        kind = _KIND_TOKENS.get(fields[1].strip().lower())
        if kind is None:
            raise GraphError(f"unknown node kind {fields[1]!r}")
        g.add_node(EntityRef(kind, canonical_id(fields[2])))
    elif tag == "edge":
        if len(fields) != 5:
            raise GraphError(f"edge row needs 5 fields, got {len(fields)}")
        predicate = fields[1].strip()
        sig = g.signatures.get(predicate)
        if sig is None:
            raise GraphError(f"unknown predicate {predicate!r}")
        if sig.arity != 2:
            raise GraphError(f"predicate {predicate} is not binary")
        try:
            value = float(fields[4])
        except ValueError:
            raise GraphError(f"bad value {fields[4]!r}") from None
        args = (
            g._resolve_arg(fields[2], sig.arg_kinds[0]),
            g._resolve_arg(fields[3], sig.arg_kinds[1]),
        )
        g.add_observed(predicate, args, value)
    else:
        raise GraphError(f"unknown row tag {tag!r}")


def save_graph(g: KnowledgeGraph, path: Union[str, Path]) -> None:
    """Write the node set and observed atoms back out as graph-TSV.

    ``load_graph(save_graph(g))`` reproduces the node set and observed
    atom multiset exactly. Targets are not part of the format; use
    :func:`save_targets`.
    """
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for ref in sorted(g.nodes):
            fh.write(f"node\t{ref.kind.value}\t{ref.id}\n")
        atoms = sorted(g.observed_atoms(), key=lambda a: (a.predicate, a.args))
        for atom in atoms:
            arg1, arg2 = atom.args
            fh.write(f"edge\t{atom.predicate}\t{arg1.id}\t{arg2.id}\t{atom.value:g}\n")


def load_targets(path: Union[str, Path]) -> list[tuple[str, str, Optional[float]]]:
    """Read a targets TSV: ``drug_id<TAB>disease_id[<TAB>gold]`` per line,
    ``#`` comments allowed."""
    path = Path(path)
    out: list[tuple[str, str, Optional[float]]] = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) not in (2, 3):
                raise GraphParseError(str(path), lineno,
                                      f"target row needs 2 or 3 fields, got {len(fields)}")
            gold: Optional[float] = None
            if len(fields) == 3 and fields[2].strip():
                try:
                    gold = float(fields[2])
                except ValueError:
                    raise GraphParseError(str(path), lineno,
                                          f"bad gold value {fields[2]!r}") from None
            out.append((canonical_id(fields[0]), canonical_id(fields[1]), gold))
    return out


def save_targets(pairs: Iterable[tuple[str, str, Optional[float]]],
                 path: Union[str, Path]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for d, dis, gold in pairs:
            if gold is None:
                fh.write(f"{d}\t{dis}\n")
            else:
                fh.write(f"{d}\t{dis}\t{gold:g}\n")


def declare_targets(g: KnowledgeGraph,
                    pairs: Iterable[tuple[str, str, Optional[float]]]) -> None:
    """Register drug--disease treats targets on a loaded graph."""
    for drug_id, disease_id, gold in pairs:
        args = (
            g._resolve_arg(drug_id, g.signatures[TREATS].arg_kinds[0]),
            g._resolve_arg(disease_id, g.signatures[TREATS].arg_kinds[1]),
        )
        g.add_target(TREATS, args, gold)


# ---------------------------------------------------------------------------
# Lexicon matching over clinical narratives
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def _tokenize(text: str) -> tuple[str, ...]:
    """Lowercase, punctuation-stripped, whitespace-split tokens."""
    return tuple(_TOKEN_RE.findall(text.casefold()))


@dataclass
class Lexicon:
    """Surface phrases mapped to entities; matching is case-insensitive
    and token-boundary anchored."""

    entries: dict[tuple[str, ...], EntityRef] = field(default_factory=dict)

    def add(self, phrase: str, ref: EntityRef) -> None:
        tokens = _tokenize(phrase)
        if not tokens:
            raise GraphError(f"lexicon phrase {phrase!r} is empty after normalization")
        if tokens in self.entries and self.entries[tokens] != ref:
            raise GraphError(f"duplicate lexicon phrase {' '.join(tokens)!r}")
        self.entries[tokens] = ref

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, EntityRef]]) -> "Lexicon":
        lex = cls()
        for phrase, ref in pairs:
            lex.add(phrase, ref)
        return lex

    @classmethod
    def from_file(cls, path: Union[str, Path], kind: Optional[Kind] = None) -> "Lexicon":
        """Read ``phrase<TAB>kind<TAB>id`` rows; ``kind`` restricts the
        accepted entity kind."""
        path = Path(path)
        lex = cls()
        with path.open("r", encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.rstrip("\n")
                if not line.strip() or line.lstrip().startswith("#"):
                    continue
                fields = line.split("\t")
                if len(fields) != 3:
                    raise GraphParseError(str(path), lineno,
                                          f"lexicon row needs 3 fields, got {len(fields)}")
                row_kind = _KIND_TOKENS.get(fields[1].strip().lower())
                if row_kind is None:
                    raise GraphParseError(str(path), lineno,
                                          f"unknown kind {fields[1]!r}")
                if kind is not None and row_kind != kind:
                    raise GraphParseError(str(path), lineno,
                                          f"expected {kind.value} entries, got {row_kind.value}")
                try:
                    lex.add(fields[0], EntityRef(row_kind, canonical_id(fields[2])))
                except GraphError as exc:
                    raise GraphParseError(str(path), lineno, str(exc)) from exc
        return lex

    @property
    def max_len(self) -> int:
        return max((len(t) for t in self.entries), default=0)


def match_phrases(tokens: Sequence[str], lexicons: Sequence[Lexicon]) -> list[EntityRef]:
    """Greedy left-to-right longest matching of lexicon phrases against a
    token sequence; matches never overlap. Returns matched entities in
    span order (an entity may repeat if mentioned more than once)."""
    max_len = max((lex.max_len for lex in lexicons), default=0)
    hits: list[EntityRef] = []
    i = 0
    n = len(tokens)
    while i < n:
        matched = 0
        for length in range(min(max_len, n - i), 0, -1):
            span = tuple(tokens[i:i + length])
            span_hits = [lex.entries[span] for lex in lexicons if span in lex.entries]
            if span_hits:
                hits.extend(span_hits)
                matched = length
                break
        i += matched if matched else 1
    return hits


def load_narratives(path: Union[str, Path]) -> list[tuple[str, str]]:
    """Read ``id<TAB>text`` rows (tabs are forbidden inside the text)."""
    path = Path(path)
    out = []
    seen = set()
    with path.open("r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) != 2:
                raise GraphParseError(str(path), lineno,
                                      f"narrative row needs 2 fields, got {len(fields)}")
            nid = canonical_id(fields[0])
            if nid in seen:
                raise GraphParseError(str(path), lineno, f"duplicate narrative id {nid!r}")
            seen.add(nid)
            out.append((nid, fields[1]))
    return out


def build_narratives_graph(texts: Sequence[tuple[str, str]],
                           drug_lexicon: Lexicon,
                           disease_lexicon: Lexicon,
                           signatures: Optional[Mapping[str, PredicateSignature]] = None,
                           ) -> KnowledgeGraph:
    """Build the narratives graph from raw texts.

    Each text with at least one lexicon match becomes a narrative node
    with ``is_mentioned_in(entity, narrative)`` atoms (value 1.0) for
    every matched drug or disease, deduplicated within the text. Texts
    with no matches are skipped; the skip count is logged.
    """
    ids = [nid for nid, _ in texts]
    if len(set(ids)) != len(ids):
        raise GraphError("narrative ids must be unique")
    g = KnowledgeGraph(signatures)
    skipped = 0
    for nid, text in texts:
        mentions = match_phrases(_tokenize(text), (drug_lexicon, disease_lexicon))
        unique = sorted(set(mentions))
        if not unique:
            skipped += 1
            continue
        narr = g.add_node(EntityRef(Kind.NARRATIVE, canonical_id(nid)))
        for ref in unique:
            g.add_node(ref)
            g.add_observed(MENTIONED_IN, (ref, narr), 1.0)
    if skipped:
        logger.info("narratives with no lexicon match skipped: %d of %d",
                    skipped, len(texts))
    return g


# ---------------------------------------------------------------------------
# Filtering and merging
# ---------------------------------------------------------------------------

@dataclass
class DrugFilterReport:
    """What :func:`filter_high_degree_drugs` removed (drug id, treats
    degree) and which explicitly listed ids were absent."""

    removed: list[tuple[str, int]] = field(default_factory=list)
    missing: list[str] = field(default_factory=list)


def filter_high_degree_drugs(g: KnowledgeGraph,
                             max_degree: Optional[int] = None,
                             drugs: Optional[Iterable[str]] = None,
                             ) -> tuple[KnowledgeGraph, DrugFilterReport]:
    """Drop drug nodes whose treats degree exceeds ``max_degree``, or the
    explicitly listed drugs, together with all their incident atoms.

    Exactly one of ``max_degree`` / ``drugs`` must be given. Disease,
    attribute, and narrative nodes are never removed.
    """
    if (max_degree is None) == (drugs is None):
        raise ValueError("pass exactly one of max_degree or drugs")
    report = DrugFilterReport()
    doomed: set[EntityRef] = set()
    if max_degree is not None:
        if max_degree < 1:
            raise ValueError("max_degree must be >= 1")
        for ref in g.nodes_of_kind(Kind.DRUG):
            deg = g.drug_degree(ref)
            if deg > max_degree:
                doomed.add(ref)
                report.removed.append((ref.id, deg))
    else:
        wanted = {canonical_id(d) for d in drugs or ()}
        known = {ref.id: ref for ref in g.nodes_of_kind(Kind.DRUG)}
        for did in sorted(wanted):
            ref = known.get(did)
            if ref is None:
                report.missing.append(did)
            else:
                doomed.add(ref)
                report.removed.append((ref.id, g.drug_degree(ref)))
    report.removed.sort()

    out = KnowledgeGraph(g.signatures)
    for ref in g.nodes:
        if ref not in doomed:
            out.add_node(ref)
    for atom in g.observed_atoms():
        if not any(a in doomed for a in atom.args):
            out.add_observed(atom.predicate, atom.args, atom.value)
    for (pred, args), gold in g.target_atoms():
        if not any(a in doomed for a in args):
            out.add_target(pred, args, gold)
    return out, report


def merge_graphs(g1: KnowledgeGraph, g2: KnowledgeGraph) -> KnowledgeGraph:
    """Union of nodes and atoms; identical (kind, id) pairs unify.

    Signatures must agree on shared predicate symbols. Duplicate atoms
    with equal values dedupe silently; a value difference above 1e-9 is
    a hard error.
    """
    for name, sig in g1.signatures.items():
        other = g2.signatures.get(name)
        if other is not None and other != sig:
            raise GraphError(f"signature mismatch for predicate {name}")
    merged_sigs = dict(g1.signatures)
    merged_sigs.update(g2.signatures)
    out = KnowledgeGraph(merged_sigs)
    for g in (g1, g2):
        for ref in g.nodes:
            out.add_node(ref)
    for g in (g1, g2):
        for atom in g.observed_atoms():
            out.add_observed(atom.predicate, atom.args, atom.value)
    for g in (g1, g2):
        for (pred, args), gold in g.target_atoms():
            out.add_target(pred, args, gold)
    return out
