"""Crowd-label aggregation with the Dawid-Skene worker-confusion model.

Multiple workers assign one of six drug--disease relation labels to each
item; EM alternates between re-estimating a row-stochastic confusion
matrix per worker (plus class priors) and recomputing per-item label
posteriors, starting from majority vote. Additive smoothing keeps
degenerate workers from locking the posteriors.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

logger = logging.getLogger(__name__)

LABELS = (
    "Prevents",
    "Treats",
    "TreatsOutcomes",
    "NotEstablished",
    "NotRecommended",
    "Other",
)
_LABEL_INDEX = {lab: i for i, lab in enumerate(LABELS)}
_NORMALIZED = {lab.casefold(): lab for lab in LABELS}

N_LABELS = len(LABELS)
DEFAULT_SMOOTHING = 0.01


class AnnotationError(Exception):
    pass


def normalize_label(raw: str) -> str:
    """Map a label string onto the canonical six-way set; spaces,
    underscores, and hyphens are ignored, case is folded."""
    key = "".join(ch for ch in raw.casefold() if ch.isalnum())
    canon = _NORMALIZED.get(key)
    if canon is None:
        raise AnnotationError(f"unknown label {raw!r}")
    return canon


@dataclass(frozen=True)
class WorkerResponse:
    worker_id: str
    item_id: str
    label: str

    def __post_init__(self):
        if self.label not in _LABEL_INDEX:
            raise AnnotationError(f"unknown label {self.label!r}")


@dataclass
class AggregationResult:
    items: list[str]
    workers: list[str]
    posteriors: dict[str, tuple[float, ...]]
    inferred: dict[str, str]
    confusion: dict[str, tuple[tuple[float, ...], ...]]
    priors: tuple[float, ...]
    iterations: int
    converged: bool
    log_likelihood: list[float] = field(default_factory=list)

    def to_json(self, path: Union[str, Path]) -> None:
        payload = {
            "labels": list(LABELS),
            "priors": list(self.priors),
            "iterations": self.iterations,
            "converged": self.converged,
            "log_likelihood": self.log_likelihood,
            "posteriors": {i: list(p) for i, p in self.posteriors.items()},
            "inferred": dict(self.inferred),
            "confusion": {w: [list(row) for row in m] for w, m in self.confusion.items()},
        }
        with Path(path).open("w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")


def aggregate_labels(responses: Sequence[WorkerResponse],
                     max_iters: int = 100,
                     tol: float = 1e-6,
                     smoothing: float = DEFAULT_SMOOTHING) -> AggregationResult:
    """Dawid-Skene EM over worker responses.

    Posteriors start from per-item vote fractions; each iteration
    re-estimates class priors and per-worker confusion matrices with
    additive smoothing, then recomputes the posteriors. Stops when the
    largest posterior change drops below ``tol``.
    """
    if not responses:
        raise AnnotationError("no responses to aggregate")
    items = sorted({r.item_id for r in responses})
    workers = sorted({r.worker_id for r in responses})
    item_idx = {it: i for i, it in enumerate(items)}
    worker_idx = {w: i for i, w in enumerate(workers)}
    n_items, n_workers = len(items), len(workers)

    resp_item = np.array([item_idx[r.item_id] for r in responses])
    resp_worker = np.array([worker_idx[r.worker_id] for r in responses])
    resp_label = np.array([_LABEL_INDEX[r.label] for r in responses])

    # majority-vote initialization (soft: normalized vote counts)
    T = np.zeros((n_items, N_LABELS))
    np.add.at(T, (resp_item, resp_label), 1.0)
    T /= T.sum(axis=1, keepdims=True)

    priors = np.full(N_LABELS, 1.0 / N_LABELS)
    theta = np.zeros((n_workers, N_LABELS, N_LABELS))
    ll_trace: list[float] = []
    converged = False
    iterations = 0

    for iterations in range(1, max_iters + 1):
        # M-step
        priors = T.sum(axis=0) + smoothing
        priors /= priors.sum()
        counts = np.zeros((n_workers, N_LABELS, N_LABELS))
        np.add.at(counts, (resp_worker, slice(None), resp_label), T[resp_item])
        counts += smoothing
        theta = counts / counts.sum(axis=2, keepdims=True)

        # E-step in log space
        log_post = np.tile(np.log(priors), (n_items, 1))
        np.add.at(log_post, resp_item, np.log(theta[resp_worker, :, resp_label]))
        shift = log_post.max(axis=1, keepdims=True)
        ll_trace.append(float(
            np.sum(shift[:, 0] + np.log(np.exp(log_post - shift).sum(axis=1)))
        ))
        T_new = np.exp(log_post - shift)
        T_new /= T_new.sum(axis=1, keepdims=True)

        delta = float(np.abs(T_new - T).max())
        T = T_new
        if delta < tol:
            converged = True
            break

    inferred = {it: LABELS[int(np.argmax(T[i]))] for it, i in item_idx.items()}
    return AggregationResult(
        items=items,
        workers=workers,
        posteriors={it: tuple(float(v) for v in T[i]) for it, i in item_idx.items()},
        inferred=inferred,
        confusion={
            w: tuple(tuple(float(v) for v in row) for row in theta[j])
            for w, j in worker_idx.items()
        },
        priors=tuple(float(v) for v in priors),
        iterations=iterations,
        converged=converged,
        log_likelihood=ll_trace,
    )


# ---------------------------------------------------------------------------
# Agreement statistics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AgreementRow:
    label: str
    items: int
    agreement: Optional[float]  # mean % of responses matching the inferred label


def agreement_stats(responses: Sequence[WorkerResponse],
                    result: AggregationResult) -> list[AgreementRow]:
    """Per-class item counts and mean worker agreement (in percent) with
    the inferred labels."""
    by_item: dict[str, list[str]] = {}
    for r in responses:
        by_item.setdefault(r.item_id, []).append(r.label)
    unknown = sorted(set(by_item) - set(result.inferred))
    if unknown:
        raise AnnotationError(f"responses mention items missing from the result: {unknown[:3]}")

    fractions: dict[str, list[float]] = {lab: [] for lab in LABELS}
    for item, labels in by_item.items():
        inferred = result.inferred[item]
        frac = sum(1 for lab in labels if lab == inferred) / len(labels)
        fractions[inferred].append(frac)

    rows = []
    for lab in LABELS:
        fr = fractions[lab]
        rows.append(AgreementRow(
            label=lab,
            items=len(fr),
            agreement=(100.0 * float(np.mean(fr))) if fr else None,
        ))
    return rows


def agreement_tsv(rows: Iterable[AgreementRow], path: Union[str, Path]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write("label\titems\tagreement\n")
        for row in rows:
            agr = "-" if row.agreement is None else f"{row.agreement:.1f}"
            fh.write(f"{row.label}\t{row.items}\t{agr}\n")


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------

def read_responses_csv(path: Union[str, Path]) -> list[WorkerResponse]:
    """Read ``worker_id,item_id,label`` rows; a header row is skipped if
    present. Label strings are normalized onto the canonical set."""
    path = Path(path)
    out: list[WorkerResponse] = []
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 3:
                raise AnnotationError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            worker, item, label = (f.strip() for f in row)
            if lineno == 1 and label.casefold() == "label":
                continue
            try:
                out.append(WorkerResponse(worker, item, normalize_label(label)))
            except AnnotationError as exc:
                raise AnnotationError(f"{path}:{lineno}: {exc}") from None
    return out
