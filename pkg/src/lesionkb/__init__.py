"""Knowledge-grounded extraction of lung lesion findings from clinical and imaging reports."""

from .errors import (
    DataError,
    FormatViolation,
    LesionKBError,
    ProviderError,
    ProviderUnavailable,
    StructureViolation,
)
from .evaluation import cohens_kappa, cost_matrix, evaluate, field_micro_metrics, grid_search_topk, hungarian_match
from .gateway import Gateway, GenerationRequest, MockProvider
from .grader import GraderConfig, KnowledgeGrader
from .pipeline import ExtractionPipeline, PipelineConfig, run_pipeline
from .retrieval import FixtureEmbedder, HashingEmbedder, RetrievalConfig, cosine, retrieve_external, retrieve_rules
from .rulegen import TrainingExample, build_internal_kb
from .schema import ClinicalReport, LesionFinding, normalize_size
from .store import ExternalKB, Rule, RuleBase, add_rules, build_external_kb, chunk_document, remove_rule

__version__ = "0.1.0"

__all__ = [
    "ClinicalReport", "DataError", "ExternalKB", "ExtractionPipeline", "FixtureEmbedder", "FormatViolation",
    "Gateway", "GenerationRequest", "GraderConfig", "HashingEmbedder", "KnowledgeGrader", "LesionFinding",
    "LesionKBError", "MockProvider", "PipelineConfig", "ProviderError", "ProviderUnavailable", "RetrievalConfig",
    "Rule", "RuleBase", "StructureViolation", "TrainingExample", "add_rules", "build_external_kb",
    "build_internal_kb", "chunk_document", "cohens_kappa", "cosine", "cost_matrix", "evaluate",
    "field_micro_metrics", "grid_search_topk", "hungarian_match", "normalize_size", "remove_rule",
    "retrieve_external", "retrieve_rules", "run_pipeline",
]
