"""Scoring extracted findings against gold annotations.

Findings of one report are aligned with a minimum-cost assignment where the
cost of a (gold, predicted) pair is the number of scored fields on which they
disagree.  Per-field counts are then summed over the corpus (micro average).
"""

from __future__ import annotations

import csv
import io
import json
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Hashable, Sequence

from .errors import IoFailure, LengthMismatch
from .schema import EVALUATED_FIELDS, NUMERIC_TOLERANCE, LesionFinding, canonicalize_value

DUMMY_COST = 10.0
_EPS = 1e-9


# ---------------------------------------------------------------------------
# Field agreement and cost matrix
# ---------------------------------------------------------------------------

def field_value(finding: LesionFinding, name: str, full_size: bool = False) -> Any:
    value = getattr(finding, name)
    if value is None:
        return None
    if name == "lesion_size_mm":
        return tuple(value) if full_size else max(value)
    if name == "suv":
        return float(value)
    return canonicalize_value(name, value)


def values_agree(name: str, a: Any, b: Any) -> bool:
    if a is None or b is None:
        return a is None and b is None
    if name == "suv" or (name == "lesion_size_mm" and not isinstance(a, tuple)):
        return abs(float(a) - float(b)) <= NUMERIC_TOLERANCE + _EPS
    if isinstance(a, tuple):
        return len(a) == len(b) and all(abs(x - y) <= NUMERIC_TOLERANCE + _EPS for x, y in zip(a, b))
    return a == b


def disagreements(gold: LesionFinding, pred: LesionFinding, fields: Sequence[str] = EVALUATED_FIELDS,
                  full_size: bool = False) -> int:
    return sum(
        not values_agree(name, field_value(gold, name, full_size), field_value(pred, name, full_size))
        for name in fields
    )


def cost_matrix(gold: Sequence[LesionFinding], pred: Sequence[LesionFinding],
                fields: Sequence[str] = EVALUATED_FIELDS, full_size: bool = False) -> list[list[float]]:
    return [[float(disagreements(g, p, fields, full_size)) for p in pred] for g in gold]


# ---------------------------------------------------------------------------
# Assignment
# ---------------------------------------------------------------------------

def solve_assignment(cost: Sequence[Sequence[float]]) -> list[int]:
    """Minimum-cost perfect assignment of a square matrix; ``result[row] = column``.

    Shortest augmenting path with row/column potentials, O(n^3).
    """
    n = len(cost)
    if any(len(row) != n for row in cost):
        raise ValueError("assignment matrix must be square")
    if n == 0:
        return []
    inf = math.inf
    u = [0.0] * (n + 1)
    v = [0.0] * (n + 1)
    owner = [0] * (n + 1)  # owner[col] = row (1-based), 0 = free
    way = [0] * (n + 1)
    for row in range(1, n + 1):
        owner[0] = row
        col0 = 0
        minv = [inf] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[col0] = True
            row0 = owner[col0]
            delta = inf
            col1 = 0
            costs = cost[row0 - 1]
            for col in range(1, n + 1):
                if used[col]:
                    continue
                reduced = costs[col - 1] - u[row0] - v[col]
                if reduced < minv[col]:
                    minv[col] = reduced
                    way[col] = col0
                if minv[col] < delta:
                    delta = minv[col]
                    col1 = col
            for col in range(n + 1):
                if used[col]:
                    u[owner[col]] += delta
                    v[col] -= delta
                else:
                    minv[col] -= delta
            col0 = col1
            if owner[col0] == 0:
                break
        while col0:
            col1 = way[col0]
            owner[col0] = owner[col1]
            col0 = col1
    assignment = [0] * n
    for col in range(1, n + 1):
        assignment[owner[col] - 1] = col - 1
    return assignment


@dataclass
class MatchResult:
    pairs: list[tuple[int, int]]
    unmatched_gold: list[int]
    unmatched_pred: list[int]
    total_cost: float

    def to_record(self) -> dict:
        return {
            "pairs": [list(p) for p in self.pairs],
            "unmatched_gold": self.unmatched_gold,
            "unmatched_pred": self.unmatched_pred,
            "total_cost": self.total_cost,
        }


def match_cost_matrix(cost: Sequence[Sequence[float]], dummy_cost: float = DUMMY_COST) -> MatchResult:
    """Align rows (gold) with columns (predictions); the rectangular matrix is padded with ``dummy_cost``."""
    n_gold = len(cost)
    n_pred = len(cost[0]) if n_gold else 0
    if any(len(row) != n_pred for row in cost):
        raise ValueError("cost matrix rows differ in length")
    size = max(n_gold, n_pred)
    square = [
        [float(cost[i][j]) if i < n_gold and j < n_pred else dummy_cost for j in range(size)]
        for i in range(size)
    ]
    assignment = solve_assignment(square)
    pairs = [(i, j) for i, j in enumerate(assignment) if i < n_gold and j < n_pred]
    matched_pred = {j for _, j in pairs}
    return MatchResult(
        pairs=pairs,
        unmatched_gold=[i for i in range(n_gold) if i >= size or assignment[i] >= n_pred],
        unmatched_pred=[j for j in range(n_pred) if j not in matched_pred],
        total_cost=float(sum(cost[i][j] for i, j in pairs)),
    )


def hungarian_match(gold: Sequence[LesionFinding], pred: Sequence[LesionFinding],
                    fields: Sequence[str] = EVALUATED_FIELDS, full_size: bool = False) -> MatchResult:
    if not gold or not pred:
        return MatchResult([], list(range(len(gold))), list(range(len(pred))), 0.0)
    return match_cost_matrix(cost_matrix(gold, pred, fields, full_size))


# ---------------------------------------------------------------------------
# Micro metrics
# ---------------------------------------------------------------------------

@dataclass
class FieldMetrics:
    field_name: str
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    @property
    def undefined(self) -> bool:
        """Nothing to score: the field is absent from every gold and predicted finding."""
        return self.tp + self.fp + self.fn == 0

    def to_record(self) -> dict:
        return {
            "tp": self.tp, "fp": self.fp, "fn": self.fn,
            "precision": self.precision, "recall": self.recall, "f1": self.f1,
            "undefined": self.undefined,
        }


@dataclass
class ReportAlignment:
    report_id: str
    gold: list[LesionFinding]
    pred: list[LesionFinding]
    match: MatchResult


def align_report(report_id: str, gold: Sequence[LesionFinding], pred: Sequence[LesionFinding],
                 full_size: bool = False) -> ReportAlignment:
    return ReportAlignment(report_id, list(gold), list(pred), hungarian_match(gold, pred, full_size=full_size))


def field_micro_metrics(alignments: Sequence[ReportAlignment], field_name: str,
                        full_size: bool = False) -> FieldMetrics:
    """Summed counts over all reports.

    A matched pair that disagrees counts as one false positive and one false
    negative; values on unmatched findings count against precision (predicted)
    or recall (gold).
    """
    m = FieldMetrics(field_name)
    for a in alignments:
        for i, j in a.match.pairs:
            g = field_value(a.gold[i], field_name, full_size)
            p = field_value(a.pred[j], field_name, full_size)
            if g is not None and p is not None:
                if values_agree(field_name, g, p):
                    m.tp += 1
                else:
                    m.fp += 1
                    m.fn += 1
            elif p is not None:
                m.fp += 1
            elif g is not None:
                m.fn += 1
        m.fp += sum(field_value(a.pred[j], field_name) is not None for j in a.match.unmatched_pred)
        m.fn += sum(field_value(a.gold[i], field_name) is not None for i in a.match.unmatched_gold)
    return m


@dataclass
class EvaluationReport:
    metrics: dict[str, FieldMetrics]
    alignments: list[ReportAlignment] = field(default_factory=list)

    def to_record(self) -> dict:
        return {
            "fields": {name: m.to_record() for name, m in self.metrics.items()},
            "matches": [{"report_id": a.report_id, **a.match.to_record()} for a in self.alignments],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_record(), indent=2, ensure_ascii=False) + "\n"


def evaluate(gold: dict[str, Sequence[LesionFinding]], pred: dict[str, Sequence[LesionFinding]],
             fields: Sequence[str] = EVALUATED_FIELDS, full_size: bool = False) -> EvaluationReport:
    """Align every report present in either mapping and compute micro metrics per field."""
    order = list(gold) + [rid for rid in pred if rid not in gold]
    alignments = [align_report(rid, gold.get(rid, []), pred.get(rid, []), full_size) for rid in order]
    metrics = {name: field_micro_metrics(alignments, name, full_size) for name in fields}
    return EvaluationReport(metrics, alignments)


# ---------------------------------------------------------------------------
# Agreement
# ---------------------------------------------------------------------------

def cohens_kappa(labels_a: Sequence[Hashable], labels_b: Sequence[Hashable]) -> float:
    if len(labels_a) != len(labels_b):
        raise LengthMismatch(f"label lists differ in length: {len(labels_a)} vs {len(labels_b)}")
    n = len(labels_a)
    if n == 0:
        raise LengthMismatch("need at least one paired label")
    observed = sum(a == b for a, b in zip(labels_a, labels_b)) / n
    count_a, count_b = Counter(labels_a), Counter(labels_b)
    expected = sum(count_a[c] * count_b[c] for c in count_a) / (n * n)
    if expected == 1.0:
        return 1.0
    return (observed - expected) / (1.0 - expected)


# ---------------------------------------------------------------------------
# Retriever top-k grid search
# ---------------------------------------------------------------------------

@dataclass
class GridResult:
    rows: list[tuple[int, int, float]]

    @property
    def best(self) -> tuple[int, int, float]:
        # Highest F1; ties go to the lexicographically smallest (k_related, k_irrelevant).
        return min(self.rows, key=lambda r: (-r[2], r[0], r[1]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["k_related", "k_irrelevant", "f1"])
        for kr, ki, f1 in self.rows:
            writer.writerow([kr, ki, f"{f1:.6f}"])
        return buf.getvalue()

    def save(self, path: str | Path) -> None:
        try:
            Path(path).write_text(self.to_csv(), encoding="utf-8")
        except OSError as exc:
            raise IoFailure(f"cannot write {path}: {exc}") from exc


def grid_search_topk(train, base, kb, cfg, gateway, embedder, k_related_range: Sequence[int],
                     k_irrelevant_range: Sequence[int], target_field: str = "lesion_size_mm") -> GridResult:
    """Run the pipeline over the training set for every (k_related, k_irrelevant) and score one field.

    Every cell starts from the same rule base.
    """
    from .pipeline import run_pipeline

    gold = {ex.report.report_id: list(ex.gold_findings) for ex in train}
    reports = [ex.report for ex in train]
    rows = []
    for kr in k_related_range:
        for ki in k_irrelevant_range:
            cell_cfg = replace(cfg, retrieval=replace(cfg.retrieval, k_related=kr, k_irrelevant=ki))
            run = run_pipeline(reports, base, kb, cell_cfg, gateway, embedder, train=train)
            pred = {r.report_id: r.findings for r in run.results}
            f1 = evaluate(gold, pred, fields=[target_field]).metrics[target_field].f1
            rows.append((kr, ki, f1))
    return GridResult(rows)
