"""Run configuration read from an INI file whose sections follow the hyper-parameter table.

Example::

    [provider]
    kind = mock
    fixture_path = llm_fixtures.jsonl

    [embedder]
    kind = fixture
    fixture_path = embeddings.jsonl

    [rule_generator]
    temperature = 0.9
    top_p = 1

    [retriever]
    external_threshold = 0.9
    top_k_lung_related = 2
    top_k_lung_irrelevant = 1

    [grader]
    iterations = 3
    truthfulness_threshold = 2
    helpfulness_threshold = 4

    [finding_detection]
    temperature = 0.2

    [description_extraction]
    temperature = 0.2

Relative paths are resolved against the directory holding the config file.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

from .errors import DataError
from .gateway import Gateway, HttpChatProvider, LlmProvider, MockProvider
from .grader import GraderConfig
from .pipeline import PipelineConfig
from .retrieval import Embedder, FixtureEmbedder, HashingEmbedder, HttpEmbedder, RetrievalConfig
from .rulegen import RuleGenConfig

PROVIDERS = ("mock", "live")
EMBEDDERS = ("fixture", "hashing", "live")


class ConfigError(DataError):
    pass


@dataclass(frozen=True)
class RunConfig:
    provider: str = "mock"
    fixture_path: Optional[Path] = None
    endpoint: str = ""
    model: str = ""
    api_key_env: str = "LESIONKB_API_KEY"
    embedder: str = "hashing"
    embedding_fixture_path: Optional[Path] = None
    embedding_endpoint: str = ""
    embedding_model: str = ""
    embedding_dim: int = 256
    rulegen: RuleGenConfig = RuleGenConfig()
    pipeline: PipelineConfig = PipelineConfig()
    paths: dict[str, Path] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.provider not in PROVIDERS:
            raise ConfigError(f"provider must be one of {PROVIDERS}, got {self.provider!r}")
        if self.provider == "mock" and self.fixture_path is None:
            raise ConfigError("provider 'mock' needs fixture_path")
        if self.provider == "live" and not (self.endpoint and self.model):
            raise ConfigError("provider 'live' needs endpoint and model")
        if self.embedder not in EMBEDDERS:
            raise ConfigError(f"embedder must be one of {EMBEDDERS}, got {self.embedder!r}")
        if self.embedder == "fixture" and self.embedding_fixture_path is None:
            raise ConfigError("embedder 'fixture' needs fixture_path")
        if self.embedder == "live" and not (self.embedding_endpoint and self.embedding_model):
            raise ConfigError("embedder 'live' needs endpoint and model")

    def make_provider(self) -> LlmProvider:
        if self.provider == "mock":
            return MockProvider.from_file(self.fixture_path)
        return HttpChatProvider(self.endpoint, self.model, self.api_key_env)

    def make_gateway(self) -> Gateway:
        return Gateway(self.make_provider())

    def make_embedder(self) -> Embedder:
        if self.embedder == "fixture":
            return FixtureEmbedder.from_file(self.embedding_fixture_path)
        if self.embedder == "live":
            return HttpEmbedder(self.embedding_endpoint, self.embedding_model, self.api_key_env)
        return HashingEmbedder(self.embedding_dim)

    def with_jobs(self, jobs: int) -> "RunConfig":
        return replace(self, pipeline=replace(self.pipeline, jobs=jobs))


def _get(parser: configparser.ConfigParser, section: str, key: str, conv, default):
    if not parser.has_option(section, key):
        return default
    raw = parser.get(section, key)
    try:
        return conv(raw)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key} = {raw!r}: {exc}") from None


def _bool(raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ("1", "yes", "true", "on"):
        return True
    if lowered in ("0", "no", "false", "off"):
        return False
    raise ValueError("expected a boolean")


def load_config(path: str | Path) -> RunConfig:
    parser = configparser.ConfigParser()
    path = Path(path)
    try:
        with path.open(encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"bad config {path}: {exc}") from exc
    root = path.parent

    def resolve(raw: str) -> Path:
        p = Path(raw)
        return p if p.is_absolute() else root / p

    def opt_path(section: str) -> Optional[Path]:
        return _get(parser, section, "fixture_path", resolve, None)

    defaults = PipelineConfig()
    retrieval = RetrievalConfig(
        k_related=_get(parser, "retriever", "top_k_lung_related", int, defaults.retrieval.k_related),
        k_irrelevant=_get(parser, "retriever", "top_k_lung_irrelevant", int, defaults.retrieval.k_irrelevant),
        external_threshold=_get(parser, "retriever", "external_threshold", float,
                                defaults.retrieval.external_threshold),
    )
    try:
        grading = GraderConfig(
            iterations=_get(parser, "grader", "iterations", int, defaults.grading.iterations),
            truthfulness_threshold=_get(parser, "grader", "truthfulness_threshold", int,
                                        defaults.grading.truthfulness_threshold),
            helpfulness_threshold=_get(parser, "grader", "helpfulness_threshold", int,
                                       defaults.grading.helpfulness_threshold),
            temperature=_get(parser, "grader", "temperature", float, defaults.grading.temperature),
        )
        pipeline = PipelineConfig(
            retrieval=retrieval,
            grading=grading,
            stage1_temperature=_get(parser, "finding_detection", "temperature", float, defaults.stage1_temperature),
            stage2_temperature=_get(parser, "description_extraction", "temperature", float,
                                    defaults.stage2_temperature),
            few_shot_count=_get(parser, "pipeline", "few_shot_count", int, defaults.few_shot_count),
            use_knowledge=_get(parser, "pipeline", "use_knowledge", _bool, True),
            use_grading=_get(parser, "pipeline", "use_grading", _bool, True),
            use_extended_context=_get(parser, "pipeline", "use_extended_context", _bool, True),
            use_vocabulary=_get(parser, "pipeline", "use_vocabulary", _bool, True),
            use_cot=_get(parser, "pipeline", "use_cot", _bool, False),
            jobs=_get(parser, "pipeline", "jobs", int, defaults.jobs),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    rulegen = RuleGenConfig(
        temperature=_get(parser, "rule_generator", "temperature", float, 0.9),
        top_p=_get(parser, "rule_generator", "top_p", float, 1.0),
    )
    paths = {key: resolve(value) for key, value in parser.items("paths")} if parser.has_section("paths") else {}
    return RunConfig(
        provider=_get(parser, "provider", "kind", str, "mock" if opt_path("provider") else "live"),
        fixture_path=opt_path("provider"),
        endpoint=_get(parser, "provider", "endpoint", str, ""),
        model=_get(parser, "provider", "model", str, ""),
        api_key_env=_get(parser, "provider", "api_key_env", str, "LESIONKB_API_KEY"),
        embedder=_get(parser, "embedder", "kind", str, "fixture" if opt_path("embedder") else "hashing"),
        embedding_fixture_path=opt_path("embedder"),
        embedding_endpoint=_get(parser, "embedder", "endpoint", str, ""),
        embedding_model=_get(parser, "embedder", "model", str, ""),
        embedding_dim=_get(parser, "embedder", "dim", int, 256),
        rulegen=rulegen,
        pipeline=pipeline,
        paths=paths,
    )
