"""Internal knowledge base construction: annotated reports -> references -> rules."""

from __future__ import annotations

import json
import logging
import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

from .errors import DataError, FormatViolation
from .gateway import Gateway, GenerationRequest
from .jsonl import iter_jsonl, write_jsonl
from .parsing import REFERENCES, RULES, parse_structured
from .prompts import RULE_GENERATOR_DIALOGUE
from .retrieval import Embedder, embed_rule_base
from .schema import ClinicalReport, LesionFinding, finding_from_record, finding_to_record, report_from_record, report_to_record
from .store import LUNG_IRRELEVANT, LUNG_RELATED, Rule, RuleBase, add_rules

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RuleGenConfig:
    temperature: float = 0.9
    top_p: float = 1.0


@dataclass(frozen=True)
class Reference:
    source_text: str
    explanation: str
    polarity: str

    def __post_init__(self) -> None:
        if not self.source_text.strip():
            raise ValueError("reference source_text must be non-empty")


@dataclass(frozen=True)
class TrainingExample:
    report: ClinicalReport
    gold_findings: tuple[LesionFinding, ...] = ()

    @property
    def num_findings(self) -> int:
        return len(self.gold_findings)


class ReferenceList(list):
    """References plus the dialogue that produced them, so rule extrapolation can continue it."""

    def __init__(self, refs: Sequence[Reference] = (), dialogue: Optional[dict[str, str]] = None):
        super().__init__(refs)
        self.dialogue = dialogue


def _request(slots: dict[str, str], cfg: RuleGenConfig) -> GenerationRequest:
    return GenerationRequest(RULE_GENERATOR_DIALOGUE, dict(slots), temperature=cfg.temperature, top_p=cfg.top_p)


def generate_references(example: TrainingExample, gateway: Gateway, cfg: RuleGenConfig = RuleGenConfig(),
                        ) -> ReferenceList:
    """Run the count -> explanation -> classification turns of the rule-generator dialogue."""
    slots = {"text": example.report.text}
    slots["lesion_number"] = gateway.generate(_request(slots, cfg))
    slots["detailed_explanations"] = gateway.generate(_request(slots, cfg))
    slots["num_findings"] = str(example.num_findings)
    slots["references"] = gateway.generate(_request(slots, cfg))
    parsed = parse_structured(slots["references"], REFERENCES)
    refs = [Reference(r["source_text"], r["explanation"], r["polarity"]) for r in parsed]
    if example.num_findings == 0:
        dropped = [r for r in refs if r.polarity == LUNG_RELATED]
        if dropped:
            logger.info("%s: gold count is 0, discarding %d lung-related references",
                        example.report.report_id, len(dropped))
        refs = [r for r in refs if r.polarity == LUNG_IRRELEVANT]
    return ReferenceList(refs, slots)


def _pattern_terms(pattern: str) -> list[str]:
    return [t.strip().lower() for t in re.split(r"[|/,]", pattern) if t.strip()]


def _assign_polarity(explicit: Optional[str], pattern: str, refs: Sequence[Reference]) -> str:
    polarities = {r.polarity for r in refs}
    if len(polarities) == 1:
        # A one-sided reference set can only yield rules of that side.
        return polarities.pop()
    if explicit is not None:
        return explicit
    terms = _pattern_terms(pattern)
    support = [r for r in refs if any(t in r.source_text.lower() for t in terms)] or list(refs)
    votes = Counter(r.polarity for r in support)
    # Ties go to the irrelevant side, which is the prioritized one.
    return LUNG_RELATED if votes[LUNG_RELATED] > votes[LUNG_IRRELEVANT] else LUNG_IRRELEVANT


def _standalone_dialogue(refs: Sequence[Reference]) -> dict[str, str]:
    related = [r for r in refs if r.polarity == LUNG_RELATED]
    irrelevant = [r for r in refs if r.polarity == LUNG_IRRELEVANT]
    return {
        "text": "\n".join(r.source_text for r in refs),
        "lesion_number": str(len(related)),
        "detailed_explanations": "\n".join(f"- {r.source_text}: {r.explanation}" for r in refs),
        "num_findings": str(len(related)),
        "references": json.dumps({
            "lung lesion findings": [{r.source_text: r.explanation} for r in related],
            "none lung lesion findings": [{r.source_text: r.explanation} for r in irrelevant],
        }, ensure_ascii=False),
    }


def extrapolate_rules(refs: Sequence[Reference], gateway: Gateway, cfg: RuleGenConfig = RuleGenConfig(),
                      ) -> list[Rule]:
    """Ask for generalized rules from ``refs``, each tagged with a polarity."""
    if not refs:
        raise ValueError("cannot extrapolate rules from an empty reference set")
    slots = getattr(refs, "dialogue", None) or _standalone_dialogue(refs)
    slots = {k: v for k, v in slots.items() if k != "rules"}
    raw = gateway.generate(_request(slots, cfg))
    rules = []
    for item in parse_structured(raw, RULES):
        polarity = _assign_polarity(item["polarity"], item["pattern"], refs)
        rules.append(Rule.create(polarity, item["pattern"], item["rule"]))
    return rules


def _rules_for_example(example: TrainingExample, gateway: Gateway, cfg: RuleGenConfig) -> list[Rule]:
    refs = generate_references(example, gateway, cfg)
    if not refs:
        logger.warning("%s: no references produced", example.report.report_id)
        return []
    return extrapolate_rules(refs, gateway, cfg)


def build_internal_kb(train: Sequence[TrainingExample], gateway: Gateway, embedder: Embedder,
                      cfg: RuleGenConfig = RuleGenConfig(), jobs: int = 1, base: RuleBase | None = None,
                      ) -> RuleBase:
    """One dialogue per training example, merged in input order into a deduplicated base."""
    if not train:
        raise ValueError("training set is empty")
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            per_example = list(pool.map(lambda ex: _rules_for_example(ex, gateway, cfg), train))
    else:
        per_example = [_rules_for_example(ex, gateway, cfg) for ex in train]
    base = base if base is not None else RuleBase()
    for rules in per_example:
        base = add_rules(base, rules)
    return embed_rule_base(base, embedder, jobs=jobs)


# ---------------------------------------------------------------------------
# Training set file
# ---------------------------------------------------------------------------

def example_to_record(example: TrainingExample) -> dict:
    return {
        "report": report_to_record(example.report),
        "gold_findings": [finding_to_record(f) for f in example.gold_findings],
        "num_findings": example.num_findings,
    }


def load_training_set(path: str | Path) -> list[TrainingExample]:
    examples = []
    seen: set[str] = set()
    for lineno, obj in iter_jsonl(path):
        try:
            report = report_from_record(obj["report"])
            gold = tuple(finding_from_record(r) for r in obj.get("gold_findings", []))
        except (KeyError, TypeError, DataError) as exc:
            raise FormatViolation(f"bad training example: {exc}", line=lineno, path=str(path)) from exc
        if "num_findings" in obj and int(obj["num_findings"]) != len(gold):
            raise FormatViolation("num_findings disagrees with gold_findings", line=lineno, path=str(path))
        if report.report_id in seen:
            raise FormatViolation(f"duplicate report_id {report.report_id!r}", line=lineno, path=str(path))
        seen.add(report.report_id)
        examples.append(TrainingExample(report, gold))
    return examples


def save_training_set(examples: Sequence[TrainingExample], path: str | Path) -> None:
    write_jsonl(path, (example_to_record(e) for e in examples))
