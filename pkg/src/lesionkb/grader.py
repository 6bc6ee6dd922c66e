"""Knowledge grading: align retrieved rules with external knowledge, keep the helpful ones.

For each of ``iterations`` rounds:

1. every rule in the working set is checked for truthfulness against the
   external chunks retrieved for it.  A rule scoring strictly below the
   truthfulness threshold is removed from the rule base and replaced by a
   realigned rule (same polarity), which is added to the base and carried on
   in its place.  Survivors accumulate in the aligned set.
2. every rule in the aligned set is scored for helpfulness against the
   report; those strictly below the helpfulness threshold leave the set.

The aligned set is keyed by rule id.  From the second round on, the working
set is the current aligned set, so a rule dropped as unhelpful stays dropped.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from .gateway import Gateway, GenerationRequest
from .jsonl import write_jsonl
from .parsing import HELPFULNESS_SCALE, RULES, TRUTHFULNESS_SCALE, parse_structured
from .prompts import GRADER, RULE_REALIGN, format_chunks
from .retrieval import Embedder, RetrievalConfig, embed_rules, retrieve_external
from .schema import ClinicalReport
from .store import ExternalKB, Rule, RuleBase, add_rules, remove_rule

KEPT = "kept"
REALIGNED = "realigned"
DROPPED_UNHELPFUL = "dropped_unhelpful"


@dataclass(frozen=True)
class GraderConfig:
    iterations: int = 3
    truthfulness_threshold: int = 2
    helpfulness_threshold: int = 4
    temperature: float = 0.0

    def __post_init__(self) -> None:
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not TRUTHFULNESS_SCALE[0] <= self.truthfulness_threshold <= TRUTHFULNESS_SCALE[1]:
            raise ValueError("truthfulness_threshold must lie in 1..3")
        if not HELPFULNESS_SCALE[0] <= self.helpfulness_threshold <= HELPFULNESS_SCALE[1]:
            raise ValueError("helpfulness_threshold must lie in 1..5")


@dataclass
class GradeRecord:
    report_id: str
    rule_id: str
    iteration: int
    truthfulness: Optional[int] = None
    helpfulness: Optional[int] = None
    disposition: str = KEPT
    external_chunk_ids: list[str] = field(default_factory=list)
    replacement_id: Optional[str] = None
    retained: bool = False

    def to_record(self) -> dict:
        return asdict(self)


@dataclass
class GradeOutcome:
    aligned: list[Rule]
    base: RuleBase
    audit: list[GradeRecord]


def _rule_json(rule: Rule) -> str:
    return json.dumps(rule.as_prompt_json(), ensure_ascii=False)


class KnowledgeGrader:
    def __init__(self, gateway: Gateway, embedder: Embedder, retrieval: RetrievalConfig = RetrievalConfig(),
                 cfg: GraderConfig = GraderConfig()):
        self.gateway = gateway
        self.embedder = embedder
        self.retrieval = retrieval
        self.cfg = cfg

    def truthfulness_score(self, rule: Rule, chunks: Sequence) -> int:
        slots = {"rule": _rule_json(rule), "external_knowledge": format_chunks(chunks)}
        request = GenerationRequest(GRADER, slots, temperature=self.cfg.temperature)
        return self.gateway.score(request, TRUTHFULNESS_SCALE)

    def helpfulness_score(self, rule: Rule, report: ClinicalReport) -> int:
        slots = {"rule": _rule_json(rule), "input_query": report.text}
        request = GenerationRequest(GRADER, slots, temperature=self.cfg.temperature)
        return self.gateway.score(request, HELPFULNESS_SCALE)

    def realign(self, rule: Rule, chunks: Sequence) -> Rule:
        slots = {"rule": _rule_json(rule), "external_knowledge": format_chunks(chunks)}
        raw = self.gateway.generate(GenerationRequest(RULE_REALIGN, slots, temperature=self.cfg.temperature))
        revised = parse_structured(raw, RULES)[0]
        # The replacement keeps the polarity of the rule it replaces.
        return Rule.create(rule.polarity, revised["pattern"], revised["rule"])

    def grade_and_align(self, report: ClinicalReport, retrieved: Sequence[Rule], base: RuleBase,
                        kb: ExternalKB) -> GradeOutcome:
        """Grade ``retrieved`` for ``report``; ``base`` itself is never mutated.

        If anything raises midway the caller still holds the untouched entry
        base, which is the abort-and-restore behaviour.
        """
        cfg = self.cfg
        aligned: dict[str, Rule] = {}
        audit: list[GradeRecord] = []
        working = list(retrieved)
        for iteration in range(1, cfg.iterations + 1):
            if iteration > 1:
                working = list(aligned.values())
            by_successor: dict[str, list[GradeRecord]] = {}
            for rule in working:
                chunks = retrieve_external(rule, kb, self.retrieval)
                record = GradeRecord(report.report_id, rule.rule_id, iteration,
                                     external_chunk_ids=[c.chunk_id for c in chunks])
                record.truthfulness = self.truthfulness_score(rule, chunks)
                successor = rule
                if record.truthfulness < cfg.truthfulness_threshold:
                    if rule.rule_id in base:
                        base = remove_rule(base, rule.rule_id)
                    candidate = self.realign(rule, chunks)
                    existing = base.find_key(candidate.key)
                    if existing is not None:
                        successor = existing
                    else:
                        successor = embed_rules([candidate], self.embedder)[0]
                        base = add_rules(base, [successor])
                    if successor.embedding is None:
                        successor = embed_rules([successor], self.embedder)[0]
                    record.disposition = REALIGNED
                    record.replacement_id = successor.rule_id
                    aligned = _swap(aligned, rule.rule_id, successor)
                else:
                    aligned.setdefault(rule.rule_id, rule)
                by_successor.setdefault(successor.rule_id, []).append(record)
                audit.append(record)
            for rule_id, rule in list(aligned.items()):
                helpfulness = self.helpfulness_score(rule, report)
                keep = helpfulness >= cfg.helpfulness_threshold
                if not keep:
                    del aligned[rule_id]
                for record in by_successor.get(rule_id, []):
                    record.helpfulness = helpfulness
                    record.retained = keep
                    if not keep and record.disposition == KEPT:
                        record.disposition = DROPPED_UNHELPFUL
        return GradeOutcome(list(aligned.values()), base, audit)


def _swap(aligned: dict[str, Rule], old_id: str, new: Rule) -> dict[str, Rule]:
    """Put ``new`` where ``old_id`` sat (or at the end), keeping the set free of duplicates."""
    out: dict[str, Rule] = {}
    placed = False
    for rule_id, rule in aligned.items():
        if rule_id == old_id:
            if new.rule_id not in out:
                out[new.rule_id] = new
            placed = True
        elif rule_id == new.rule_id:
            if new.rule_id not in out:
                out[rule_id] = new
        else:
            out[rule_id] = rule
    if not placed and new.rule_id not in out:
        out[new.rule_id] = new
    return out


def save_audit(records: Sequence[GradeRecord], path: str | Path) -> None:
    write_jsonl(path, (r.to_record() for r in records))
