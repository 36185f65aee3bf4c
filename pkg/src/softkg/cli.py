"""Command-line entry point.

Subcommands cover the full pipeline: ``aggregate`` crowd labels,
``build-narratives`` from raw texts, ``filter-drugs``, ``ground`` /
``infer`` / ``learn`` over graph + rules + targets files, and
``experiment`` for the multi-run evaluation matrix driven by a TOML
config. Exit codes: 0 success, 1 empty or degenerate input, 2 parse or
validation failure, 3 numerical failure under ``--strict``.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path
from typing import Optional, Sequence

try:
    import tomllib  # py >= 3.11
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from . import __version__
from .annotate import (
    AnnotationError,
    aggregate_labels,
    agreement_stats,
    agreement_tsv,
    read_responses_csv,
)
from .evaluation import (
    ExperimentConfig,
    ExperimentError,
    run_experiment,
)
from .ground import GroundingError, dump_groundings, ground
from .infer import AdmmConfig, InferenceError, map_inference
from .kg import (
    GraphError,
    GraphParseError,
    KnowledgeGraph,
    Kind,
    Lexicon,
    build_narratives_graph,
    declare_targets,
    filter_high_degree_drugs,
    load_graph,
    load_narratives,
    load_targets,
    merge_graphs,
    save_graph,
)
from .learn import LearnConfig, LearningError, init_weights, learn_weights
from .rules import RuleParseError, parse_rules, validate

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_EMPTY = 1
EXIT_INVALID = 2
EXIT_NUMERIC = 3


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_INVALID):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# Shared input plumbing
# ---------------------------------------------------------------------------

def _load_graphs(paths: Sequence[str]) -> KnowledgeGraph:
    if not paths:
        raise CliError("at least one --graph file is required")
    graphs = [load_graph(p) for p in paths]
    merged = graphs[0]
    for g in graphs[1:]:
        merged = merge_graphs(merged, g)
    return merged


def _load_rules(path: str, hinge: str):
    text = Path(path).read_text(encoding="utf-8")
    return parse_rules(text, squared=(hinge == "squared"))


def _read_crf_csv(path: str) -> dict[tuple[str, str], float]:
    out: dict[tuple[str, str], float] = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 3:
                raise CliError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            if lineno == 1 and row[2].strip().casefold() == "score":
                continue
            try:
                score = float(row[2])
            except ValueError:
                raise CliError(f"{path}:{lineno}: bad score {row[2]!r}") from None
            if not 0.0 <= score <= 1.0:
                raise CliError(f"{path}:{lineno}: score {score} outside [0, 1]")
            out[(row[0].strip().casefold(), row[1].strip().casefold())] = score
    return out


def _prepared_model(args) -> tuple:
    """Common ground/infer/learn front half: load, validate, ground."""
    g = _load_graphs(args.graph)
    rules = _load_rules(args.rules, args.hinge)
    diagnostics = validate(rules, g)
    if diagnostics:
        for d in diagnostics:
            print(f"error: {d}", file=sys.stderr)
        raise CliError("rule set does not validate against the graph")
    pairs = load_targets(args.targets)
    if not pairs:
        raise CliError("targets file is empty", EXIT_EMPTY)
    declare_targets(g, pairs)
    model = ground(rules, g)
    return g, rules, model


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_aggregate(args) -> int:
    responses = read_responses_csv(args.responses)
    if not responses:
        print("error: no responses in input", file=sys.stderr)
        return EXIT_EMPTY
    result = aggregate_labels(responses, max_iters=args.max_iters, tol=args.tol)
    result.to_json(args.output)
    rows = agreement_stats(responses, result)
    tsv_path = args.agreement_tsv or str(Path(args.output).with_suffix(".agreement.tsv"))
    agreement_tsv(rows, tsv_path)
    for row in rows:
        agr = "-" if row.agreement is None else f"{row.agreement:.1f}"
        print(f"{row.label}\t{row.items}\t{agr}")
    return EXIT_OK


def cmd_build_narratives(args) -> int:
    texts = load_narratives(args.narratives)
    drug_lex = Lexicon.from_file(args.drug_lexicon, kind=Kind.DRUG)
    disease_lex = Lexicon.from_file(args.disease_lexicon, kind=Kind.DISEASE)
    g = build_narratives_graph(texts, drug_lex, disease_lex)
    save_graph(g, args.output)
    matched = len(g.nodes_of_kind(Kind.NARRATIVE))
    print(f"narratives matched: {matched} of {len(texts)}; atoms: {g.n_observed}")
    return EXIT_OK


def cmd_filter_drugs(args) -> int:
    g = load_graph(args.graph)
    drugs: Optional[list[str]] = None
    if args.drugs:
        drugs = [d.strip() for d in args.drugs.split(",") if d.strip()]
    elif args.drugs_file:
        drugs = [
            line.strip() for line in Path(args.drugs_file).read_text(encoding="utf-8").splitlines()
            if line.strip() and not line.startswith("#")
        ]
    if (args.max_degree is None) == (drugs is None):
        raise CliError("pass exactly one of --max-degree or --drugs/--drugs-file")
    filtered, report = filter_high_degree_drugs(g, max_degree=args.max_degree, drugs=drugs)
    save_graph(filtered, args.output)
    for drug_id, degree in report.removed:
        print(f"removed\t{drug_id}\tdegree={degree}")
    for drug_id in report.missing:
        print(f"missing\t{drug_id}")
    print(f"kept {len(filtered.nodes)} nodes, {filtered.n_observed} atoms")
    return EXIT_OK


def cmd_ground(args) -> int:
    _, _, model = _prepared_model(args)
    dump_groundings(model, args.output)
    for sid in model.schema_ids:
        print(f"{sid}\t{model.counts[sid]}\t(inactive {model.inactive_counts[sid]})")
    print(f"{model.n_rules} ground rules over {model.n_variables} variables")
    return EXIT_OK


def cmd_infer(args) -> int:
    _, _, model = _prepared_model(args)
    cfg = AdmmConfig(rho=args.rho, init_value=args.init_value,
                     abs_tol=args.abs_tol, rel_tol=args.rel_tol,
                     max_iters=args.max_iters)
    y, diag = map_inference(model, cfg)
    with open(args.output, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["drug", "disease", "score"])
        for key, i in sorted(model.var_index.items()):
            _, (dref, disref) = key
            writer.writerow([dref.id, disref.id, f"{y[i]:.6f}"])
    if args.diagnostics:
        with open(args.diagnostics, "w", encoding="utf-8") as fh:
            json.dump(diag.as_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
    print(f"converged={diag.converged} iterations={diag.iterations} "
          f"objective={diag.objective:.6g}")
    if args.strict and not diag.converged:
        print("error: inference did not converge (strict mode)", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_learn(args) -> int:
    _, _, model = _prepared_model(args)
    try:
        gold = model.gold_assignment()
    except GroundingError:
        raise CliError("targets file must carry gold values for learning") from None
    model.set_weights(init_weights(model))
    cfg = LearnConfig(iterations=args.iterations, step=args.step,
                      quadrature_points=args.quadrature_points)
    report = learn_weights(model, gold, cfg)
    report.to_tsv(args.output)
    for row in report.rows:
        rel = "-" if row.relative is None else f"{row.relative:.4f}"
        print(f"{row.schema_id}\t{rel}\t{row.groundings}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Experiment command
# ---------------------------------------------------------------------------

def _load_experiment_config(path: str, args) -> tuple[ExperimentConfig, dict, dict]:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise CliError(f"cannot read config {path}: {exc}") from exc

    inputs = raw.get("inputs", {})
    exp = raw.get("experiment", {})
    admm_raw = raw.get("admm", {})
    learn_raw = raw.get("learn", {})
    try:
        admm = AdmmConfig(**admm_raw)
        learn_cfg = LearnConfig(**learn_raw)
        hinge = args.hinge or exp.get("hinge", "squared")
        if hinge not in ("squared", "linear"):
            raise ValueError(f"unknown hinge {hinge!r}")
        jobs = args.jobs if args.jobs is not None else int(exp.get("jobs", os.cpu_count() or 1))
        if args.deterministic:
            jobs = 1
        cfg = ExperimentConfig(
            variants=list(exp.get("variants", [])),
            evidence_ratios=[float(r) for r in exp.get("evidence_ratios", [])],
            runs=int(exp.get("runs", 100)),
            prediction_fraction=float(exp.get("prediction_fraction", 0.25)),
            seed=args.seed if args.seed is not None else int(exp.get("seed", 0)),
            leftover=args.leftover or exp.get("leftover", "remove"),
            squared_hinge=(hinge == "squared"),
            jobs=max(1, jobs),
            admm=admm,
            learn=learn_cfg,
        )
    except (TypeError, ValueError, ExperimentError) as exc:
        raise CliError(f"bad experiment config: {exc}") from exc

    resolved = {
        "experiment": {
            "variants": cfg.variants,
            "evidence_ratios": cfg.evidence_ratios,
            "runs": cfg.runs,
            "prediction_fraction": cfg.prediction_fraction,
            "seed": cfg.seed,
            "leftover": cfg.leftover,
            "hinge": "squared" if cfg.squared_hinge else "linear",
            "jobs": cfg.jobs,
        },
        "admm": asdict(cfg.admm),
        "learn": asdict(cfg.learn),
        "inputs": {k: str(v) for k, v in inputs.items()},
    }
    return cfg, inputs, resolved


def cmd_experiment(args) -> int:
    cfg, inputs, resolved = _load_experiment_config(args.config, args)

    graphs: dict[str, KnowledgeGraph] = {}
    for name in ("ontologies", "narratives"):
        if name in inputs:
            graphs[name] = load_graph(inputs[name])
    crf_scores = None
    if "crf" in inputs:
        crf_scores = _read_crf_csv(inputs["crf"])
    if not graphs and crf_scores is None:
        raise CliError("config lists no input graphs or CRF predictions")
    if not graphs:
        raise CliError("experiment needs at least one graph with treats edges")

    outdir = Path(args.output)
    outdir.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    try:
        result = run_experiment(graphs, cfg, crf_scores)
    except ExperimentError as exc:
        raise CliError(str(exc)) from exc
    wall = time.perf_counter() - started

    summary_path = outdir / "summary.csv"
    with summary_path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "evidence_ratio", "mean_auc", "std_auc", "runs"])
        for row in result.summary():
            writer.writerow([
                row.variant, f"{row.evidence_ratio:g}",
                f"{row.mean_auc:.6f}", f"{row.std_auc:.6f}", row.runs,
            ])

    with (outdir / "runs.jsonl").open("w", encoding="utf-8") as fh:
        for rec in result.records:
            fh.write(json.dumps(rec.to_json_dict(), sort_keys=True) + "\n")

    with (outdir / "pr_curves.csv").open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "evidence_ratio", "recall", "precision"])
        for row in result.summary():
            recall, precision = result.pooled_curve(row.variant, row.evidence_ratio)
            for r, p in zip(recall, precision):
                writer.writerow([row.variant, f"{row.evidence_ratio:g}",
                                 f"{r:.6f}", f"{p:.6f}"])

    manifest = {
        "tool": "softkg",
        "version": __version__,
        "command": "experiment",
        "config_path": str(args.config),
        "config": resolved,
        "seed": cfg.seed,
        "inputs": {
            name: {"path": str(path), "sha256": _sha256(str(path))}
            for name, path in sorted(inputs.items())
        },
        "wall_time_s": wall,
        "failed_evaluations": len(result.failures()),
    }
    with (outdir / "manifest.json").open("w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")

    for row in result.summary():
        print(f"{row.variant}\t{row.evidence_ratio:g}\t{row.mean_auc:.4f}"
              f"\t±{row.std_auc:.4f}\t({row.runs} runs)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser wiring
# ---------------------------------------------------------------------------

def _add_model_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--graph", action="append", default=[], metavar="TSV",
                   help="graph file; repeat to merge several")
    p.add_argument("--rules", required=True, metavar="FILE")
    p.add_argument("--targets", required=True, metavar="TSV",
                   help="drug<TAB>disease[<TAB>gold] rows")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="softkg",
        description="Soft-logic link prediction over drug-disease knowledge graphs",
    )
    parser.add_argument("--version", action="version", version=f"softkg {__version__}")
    parser.add_argument("--seed", type=int, default=None, help="override the RNG seed")
    parser.add_argument("--jobs", type=int, default=None,
                        help="parallel experiment runs (default: config or cores)")
    parser.add_argument("--deterministic", action="store_true",
                        help="force sequential execution")
    parser.add_argument("--hinge", choices=["linear", "squared"], default=None,
                        help="hinge exponent for all rules (default squared)")
    parser.add_argument("--leftover", choices=["remove", "negative"], default=None,
                        help="policy for edges neither observed nor predicted")
    parser.add_argument("-v", "--verbose", action="store_true")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("aggregate", help="Dawid-Skene aggregation of worker labels")
    p.add_argument("responses", help="worker_id,item_id,label CSV")
    p.add_argument("output", help="result JSON path")
    p.add_argument("--agreement-tsv", default=None)
    p.add_argument("--max-iters", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-6)
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("build-narratives", help="extract mention edges from texts")
    p.add_argument("narratives", help="id<TAB>text file")
    p.add_argument("--drug-lexicon", required=True)
    p.add_argument("--disease-lexicon", required=True)
    p.add_argument("-o", "--output", required=True, help="output graph TSV")
    p.set_defaults(func=cmd_build_narratives)

    p = sub.add_parser("filter-drugs", help="drop high-degree drugs")
    p.add_argument("graph")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--max-degree", type=int, default=None)
    p.add_argument("--drugs", default=None, help="comma-separated drug ids")
    p.add_argument("--drugs-file", default=None)
    p.set_defaults(func=cmd_filter_drugs)

    p = sub.add_parser("ground", help="ground rules and dump the potentials")
    _add_model_args(p)
    p.add_argument("-o", "--output", required=True, help="grounding dump TSV")
    p.set_defaults(func=cmd_ground)

    p = sub.add_parser("infer", help="MAP inference over the targets")
    _add_model_args(p)
    p.add_argument("-o", "--output", required=True, help="drug,disease,score CSV")
    p.add_argument("--diagnostics", default=None, help="solver diagnostics JSON")
    p.add_argument("--rho", type=float, default=1.0)
    p.add_argument("--init-value", type=float, default=0.25, dest="init_value")
    p.add_argument("--abs-tol", type=float, default=1e-6, dest="abs_tol")
    p.add_argument("--rel-tol", type=float, default=1e-6, dest="rel_tol")
    p.add_argument("--max-iters", type=int, default=25_000, dest="max_iters")
    p.add_argument("--strict", action="store_true",
                   help="exit 3 when inference fails to converge")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("learn", help="voted-perceptron weight learning")
    _add_model_args(p)
    p.add_argument("-o", "--output", required=True, help="weight report TSV")
    p.add_argument("--iterations", type=int, default=10)
    p.add_argument("--step", type=float, default=1.0)
    p.add_argument("--quadrature-points", type=int, default=151,
                   dest="quadrature_points")
    p.set_defaults(func=cmd_learn)

    p = sub.add_parser("experiment", help="run the evaluation matrix from a config")
    p.add_argument("config", help="TOML config file")
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.set_defaults(func=cmd_experiment)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.hinge is None:
        args.hinge = "squared"
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (GraphParseError, RuleParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (GraphError, GroundingError, AnnotationError, LearningError,
            InferenceError, ExperimentError) as exc:
        message = str(exc)
        print(f"error: {message}", file=sys.stderr)
        if "empty" in message or "no responses" in message:
            return EXIT_EMPTY
        return EXIT_INVALID
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
