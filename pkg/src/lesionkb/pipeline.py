"""End-to-end extraction: retrieve -> grade -> detect findings -> parse descriptions."""

from __future__ import annotations

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

from .errors import DataError, FormatViolation, ProviderError, StructureViolation
from .gateway import Gateway, GenerationRequest
from .grader import GradeRecord, GraderConfig, KnowledgeGrader
from .jsonl import iter_jsonl, write_jsonl
from .parsing import DESCRIPTION, FINDINGS, parse_structured
from .prompts import (
    COT_INSTRUCTION,
    DESCRIPTION_EXTRACTION,
    FINDING_DETECTION,
    NO_EXAMPLES,
    format_rules,
)
from .retrieval import Embedder, RetrievalConfig, embed_external_kb, embed_rule_base, retrieve_rules
from .rulegen import TrainingExample
from .schema import (
    SOLIDITY_CANONICAL,
    STAGE1_FIELDS,
    ClinicalReport,
    LesionFinding,
    finding_from_record,
    finding_to_record,
    report_from_record,
    report_to_record,
    stage2_record,
)
from .store import LUNG_IRRELEVANT, LUNG_RELATED, ExternalKB, Rule, RuleBase

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PipelineConfig:
    retrieval: RetrievalConfig = RetrievalConfig()
    grading: GraderConfig = GraderConfig()
    stage1_temperature: float = 0.2
    stage2_temperature: float = 0.2
    few_shot_count: int = 2
    use_knowledge: bool = True
    use_grading: bool = True
    use_extended_context: bool = True
    use_vocabulary: bool = True
    use_cot: bool = False
    jobs: int = 4

    def __post_init__(self) -> None:
        if self.stage1_temperature < 0 or self.stage2_temperature < 0:
            raise ValueError("temperatures must be >= 0")
        if self.few_shot_count < 0:
            raise ValueError("few_shot_count must be >= 0")


def baseline_config(cfg: PipelineConfig = PipelineConfig()) -> PipelineConfig:
    """The few-shot "default prompts" arm: no knowledge, grading, context or vocabulary."""
    return replace(cfg, use_knowledge=False, use_grading=False, use_extended_context=False,
                   use_vocabulary=False, use_cot=False)


@dataclass
class ExtractionResult:
    report_id: str
    findings: list[LesionFinding] = field(default_factory=list)
    rules_used: list[str] = field(default_factory=list)
    audit: list[GradeRecord] = field(default_factory=list)
    error: Optional[str] = None
    provider_failure: bool = False

    def to_record(self) -> dict:
        return {
            "report_id": self.report_id,
            "findings": [finding_to_record(f) for f in self.findings],
            "rules_used": list(self.rules_used),
            "error": self.error,
        }


@dataclass
class PipelineRun:
    results: list[ExtractionResult]
    base: RuleBase

    @property
    def audit(self) -> list[GradeRecord]:
        return [record for result in self.results for record in result.audit]


# ---------------------------------------------------------------------------
# Few-shot samples
# ---------------------------------------------------------------------------

def stage1_examples(train: Sequence[TrainingExample], count: int, exclude: str = "") -> str:
    chosen = [ex for ex in train if ex.report.report_id != exclude][:count]
    if not chosen:
        return NO_EXAMPLES
    blocks = []
    for ex in chosen:
        findings = [finding_to_record(f, STAGE1_FIELDS) for f in ex.gold_findings]
        blocks.append(f"Report:\n{ex.report.text}\nFindings:\n{json.dumps(findings, ensure_ascii=False)}")
    return "\n\n".join(blocks)


def stage2_examples(train: Sequence[TrainingExample], count: int, exclude: str = "") -> str:
    chosen = []
    for ex in train:
        if ex.report.report_id == exclude:
            continue
        for finding in ex.gold_findings:
            if finding.lesion_description and len(chosen) < count:
                chosen.append(finding)
    if not chosen:
        return NO_EXAMPLES
    return "\n\n".join(
        f"Lesion description:\n{f.lesion_description}\nOutput:\n{json.dumps(stage2_record(f), ensure_ascii=False)}"
        for f in chosen
    )


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def _anchor_text_source(finding: LesionFinding, report: ClinicalReport) -> LesionFinding:
    """Make ``text_source`` a verbatim span of the report, or drop it."""
    source = finding.text_source
    if source is None or source in report.text:
        return finding
    words = source.split()
    if words:
        pattern = r"\s+".join(re.escape(w) for w in words)
        match = re.search(pattern, report.text, flags=re.IGNORECASE)
        if match:
            return replace(finding, text_source=match.group(0))
    logger.warning("%s: text source not found in report, dropping it: %r", report.report_id, source[:80])
    return replace(finding, text_source=None)


def _generate_parsed(gateway: Gateway, template_id: str, slots: dict[str, str], temperature: float, shape: str):
    """One generation plus at most one repair round that shows the model its parse error."""
    request = GenerationRequest(template_id, slots, temperature=temperature)
    raw = gateway.generate(request)
    try:
        return parse_structured(raw, shape)
    except StructureViolation as exc:
        logger.info("%s output unparseable (%s); asking for a repair", template_id, exc)
        repair = dict(slots, parse_error=exc.message, malformed_fragment=exc.fragment[:2000] or raw[:2000])
        raw = gateway.generate(GenerationRequest(template_id, repair, temperature=temperature))
        return parse_structured(raw, shape)


def stage1_slots(report: ClinicalReport, rules: Sequence[Rule], cfg: PipelineConfig, few_shot: str) -> dict[str, str]:
    slots = {"input_query": report.text, "few_shot_samples": few_shot}
    if cfg.use_knowledge:
        slots["related_rules"] = format_rules([r for r in rules if r.polarity == LUNG_RELATED])
        slots["irrelevant_rules"] = format_rules([r for r in rules if r.polarity == LUNG_IRRELEVANT])
    if cfg.use_cot:
        slots["reasoning_instruction"] = COT_INSTRUCTION
    return slots


def extract_stage1(report: ClinicalReport, rules: Sequence[Rule], cfg: PipelineConfig, gateway: Gateway,
                   few_shot: str = NO_EXAMPLES) -> list[LesionFinding]:
    slots = stage1_slots(report, rules, cfg, few_shot)
    findings = _generate_parsed(gateway, FINDING_DETECTION, slots, cfg.stage1_temperature, FINDINGS)
    # Only stage-1 fields are taken from this stage.
    stage1_only = [
        finding_from_record(finding_to_record(f, STAGE1_FIELDS)) for f in findings
    ]
    return [_anchor_text_source(f, report) for f in stage1_only]


def stage2_slots(finding: LesionFinding, report: ClinicalReport, cfg: PipelineConfig, few_shot: str,
                 ) -> dict[str, str]:
    slots = {
        "lesion_description_text": finding.lesion_description or finding.text_source or "",
        "few_shot_samples": few_shot,
        "use_vocabulary": "yes" if cfg.use_vocabulary else "no",
    }
    if cfg.use_extended_context:
        slots["source_text"] = report.text
    return slots


def extract_stage2(finding: LesionFinding, report: ClinicalReport, cfg: PipelineConfig, gateway: Gateway,
                   few_shot: str = NO_EXAMPLES) -> LesionFinding:
    """Fill the description fields of ``finding``; its stage-1 fields are left alone."""
    if not (finding.lesion_description or finding.text_source):
        return finding
    slots = stage2_slots(finding, report, cfg, few_shot)
    values = _generate_parsed(gateway, DESCRIPTION_EXTRACTION, slots, cfg.stage2_temperature, DESCRIPTION)
    solidity = values.get("solidity")
    if solidity is not None and solidity not in SOLIDITY_CANONICAL:
        logger.warning("%s: solidity %r is outside the fixed vocabulary; leaving it empty",
                       report.report_id, solidity)
        values["solidity"] = None
    return finding.with_description_fields(**values)


class ExtractionPipeline:
    def __init__(self, gateway: Gateway, embedder: Embedder, cfg: PipelineConfig = PipelineConfig(),
                 train: Sequence[TrainingExample] = ()):
        self.gateway = gateway
        self.embedder = embedder
        self.cfg = cfg
        self.train = list(train)

    def _select_rules(self, report: ClinicalReport, base: RuleBase, kb: ExternalKB,
                      ) -> tuple[list[Rule], RuleBase, list[GradeRecord]]:
        cfg = self.cfg
        if not cfg.use_knowledge:
            return [], base, []
        query = self.embedder.embed([report.text])[0]
        retrieved = retrieve_rules(query, base, cfg.retrieval)
        if not cfg.use_grading:
            return retrieved, base, []
        grader = KnowledgeGrader(self.gateway, self.embedder, cfg.retrieval, cfg.grading)
        outcome = grader.grade_and_align(report, retrieved, base, kb)
        return outcome.aligned, outcome.base, outcome.audit

    def extract_report(self, report: ClinicalReport, base: RuleBase, kb: ExternalKB,
                       ) -> tuple[ExtractionResult, RuleBase]:
        cfg = self.cfg
        rules, new_base, audit = self._select_rules(report, base, kb)
        shots1 = stage1_examples(self.train, cfg.few_shot_count, exclude=report.report_id)
        findings = extract_stage1(report, rules, cfg, self.gateway, shots1)
        shots2 = stage2_examples(self.train, cfg.few_shot_count, exclude=report.report_id)

        def stage2(finding: LesionFinding) -> LesionFinding:
            return extract_stage2(finding, report, cfg, self.gateway, shots2)

        if cfg.jobs > 1 and len(findings) > 1:
            with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
                findings = list(pool.map(stage2, findings))
        else:
            findings = [stage2(f) for f in findings]
        result = ExtractionResult(report.report_id, findings, [r.rule_id for r in rules], audit)
        return result, new_base

    def run(self, reports: Sequence[ClinicalReport], base: RuleBase, kb: ExternalKB) -> PipelineRun:
        """Process ``reports`` in order; grading updates to the rule base carry over to later reports.

        A failing report is recorded with its error and leaves the base as it was.
        """
        if self.cfg.use_knowledge:
            base = embed_rule_base(base, self.embedder, jobs=self.cfg.jobs)
            if self.cfg.use_grading:
                kb = embed_external_kb(kb, self.embedder, jobs=self.cfg.jobs)
        results = []
        for report in reports:
            try:
                result, base = self.extract_report(report, base, kb)
            except (DataError, ProviderError) as exc:
                logger.error("%s: %s", report.report_id, exc)
                result = ExtractionResult(report.report_id, error=f"{type(exc).__name__}: {exc}",
                                          provider_failure=isinstance(exc, ProviderError))
            results.append(result)
        return PipelineRun(results, base)


def run_pipeline(reports: Sequence[ClinicalReport], base: RuleBase, kb: ExternalKB, cfg: PipelineConfig,
                 gateway: Gateway, embedder: Embedder, train: Sequence[TrainingExample] = ()) -> PipelineRun:
    return ExtractionPipeline(gateway, embedder, cfg, train).run(reports, base, kb)


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------

def save_results(results: Sequence[ExtractionResult], path: str | Path) -> None:
    write_jsonl(path, (r.to_record() for r in results))


def load_results(path: str | Path) -> list[ExtractionResult]:
    """Read extraction results, or gold files in the same shape."""
    results = []
    for lineno, obj in iter_jsonl(path):
        if "report" in obj and "report_id" not in obj:
            # A training-set line doubles as a gold record.
            report_id = obj["report"].get("report_id")
            findings = obj.get("gold_findings", [])
        else:
            report_id = obj.get("report_id")
            findings = obj.get("findings", [])
        if not report_id:
            raise FormatViolation("missing report_id", line=lineno, path=str(path))
        if not isinstance(findings, list):
            raise FormatViolation("findings must be an array", line=lineno, path=str(path))
        try:
            parsed = [finding_from_record(f) for f in findings]
        except (TypeError, ValueError, AttributeError, DataError) as exc:
            raise FormatViolation(f"bad finding: {exc}", line=lineno, path=str(path)) from exc
        results.append(ExtractionResult(str(report_id), parsed, list(obj.get("rules_used", [])),
                                        error=obj.get("error")))
    return results


def load_reports(path: str | Path) -> list[ClinicalReport]:
    """Report records, one per line; training-set lines are accepted and their report is taken."""
    reports = []
    seen: set[str] = set()
    for lineno, obj in iter_jsonl(path):
        record = obj["report"] if isinstance(obj.get("report"), dict) else obj
        try:
            report = report_from_record(record)
        except (KeyError, TypeError, DataError) as exc:
            raise FormatViolation(f"bad report: {exc}", line=lineno, path=str(path)) from exc
        if report.report_id in seen:
            raise FormatViolation(f"duplicate report_id {report.report_id!r}", line=lineno, path=str(path))
        seen.add(report.report_id)
        reports.append(report)
    return reports


def save_reports(reports: Sequence[ClinicalReport], path: str | Path) -> None:
    write_jsonl(path, (report_to_record(r) for r in reports))
