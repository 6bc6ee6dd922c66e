"""Embedding backends and the two retrieval modes.

Rules are retrieved top-k per polarity against a report; external chunks are
retrieved by a cosine threshold against a rule.  Both are exhaustive scans:
the stores hold hundreds of entries, not millions.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import re
import threading
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

from .errors import (
    DimensionMismatch,
    FixtureMiss,
    FormatViolation,
    MissingEmbedding,
    ProviderUnavailable,
    ZeroVector,
)
from .jsonl import iter_jsonl, write_jsonl
from .store import LUNG_IRRELEVANT, LUNG_RELATED, ExternalKB, KnowledgeChunk, Rule, RuleBase

logger = logging.getLogger(__name__)

Vector = Sequence[float]


@dataclass(frozen=True)
class RetrievalConfig:
    k_related: int = 2
    k_irrelevant: int = 1
    external_threshold: float = 0.9

    def __post_init__(self) -> None:
        if self.k_related < 0 or self.k_irrelevant < 0:
            raise ValueError("top-k values must be non-negative")
        if not -1.0 <= self.external_threshold <= 1.0:
            raise ValueError("external_threshold must lie in [-1, 1]")


SIM_DIGITS = 12


def cosine(a: Vector, b: Vector) -> float:
    if len(a) != len(b):
        raise DimensionMismatch(f"vector dimensions differ: {len(a)} vs {len(b)}")
    norm_a = math.sqrt(sum(x * x for x in a))
    norm_b = math.sqrt(sum(y * y for y in b))
    if norm_a == 0.0 or norm_b == 0.0:
        raise ZeroVector("cosine similarity is undefined for a zero vector")
    dot = sum(x * y for x, y in zip(a, b))
    return max(-1.0, min(1.0, dot / (norm_a * norm_b)))


def rank_rules(query: Vector, rules: Sequence[Rule]) -> list[tuple[float, Rule]]:
    scored = []
    for rule in rules:
        if rule.embedding is None:
            raise MissingEmbedding(f"rule {rule.rule_id!r} has no embedding")
        scored.append((cosine(query, rule.embedding), rule))
    # Rounded so that parallel vectors of different length tie exactly.
    scored.sort(key=lambda pair: (-round(pair[0], SIM_DIGITS), pair[1].rule_id))
    return scored


def retrieve_rules(query: Vector, base: RuleBase | Sequence[Rule], cfg: RetrievalConfig) -> list[Rule]:
    """Top ``k_related`` lung-related rules followed by top ``k_irrelevant`` lung-irrelevant ones.

    Ties in similarity go to the smaller ``rule_id``.
    """
    rules = list(base)
    related = rank_rules(query, [r for r in rules if r.polarity == LUNG_RELATED])[: cfg.k_related]
    irrelevant = rank_rules(query, [r for r in rules if r.polarity == LUNG_IRRELEVANT])[: cfg.k_irrelevant]
    return [rule for _, rule in related] + [rule for _, rule in irrelevant]


def retrieve_external(rule: Rule, kb: ExternalKB | Sequence[KnowledgeChunk], cfg: RetrievalConfig,
                      ) -> list[KnowledgeChunk]:
    if rule.embedding is None:
        raise MissingEmbedding(f"rule {rule.rule_id!r} has no embedding")
    hits = []
    for chunk in kb:
        if chunk.embedding is None:
            raise MissingEmbedding(f"chunk {chunk.chunk_id!r} has no embedding")
        sim = cosine(rule.embedding, chunk.embedding)
        if sim >= cfg.external_threshold:
            hits.append((sim, chunk))
    hits.sort(key=lambda pair: (-round(pair[0], SIM_DIGITS), pair[1].chunk_id))
    return [chunk for _, chunk in hits]


# ---------------------------------------------------------------------------
# Embedding backends
# ---------------------------------------------------------------------------

class Embedder(Protocol):
    def embed(self, texts: Sequence[str]) -> list[list[float]]: ...


class FixtureEmbedder:
    """Serves vectors from a JSONL file of ``{"text": ..., "vector": [...]}`` lines."""

    def __init__(self, table: dict[str, list[float]]):
        self.table = table
        dims = {len(v) for v in table.values()}
        if len(dims) > 1:
            raise FormatViolation(f"fixture vectors have mixed dimensions {sorted(dims)}")

    @classmethod
    def from_file(cls, path: str | Path) -> "FixtureEmbedder":
        table: dict[str, list[float]] = {}
        for lineno, obj in iter_jsonl(path):
            if "text" not in obj or not isinstance(obj.get("vector"), list):
                raise FormatViolation("expected text and vector", line=lineno, path=str(path))
            table[obj["text"]] = [float(v) for v in obj["vector"]]
        return cls(table)

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        out = []
        for text in texts:
            try:
                out.append(list(self.table[text]))
            except KeyError:
                raise FixtureMiss(f"no fixture embedding for text {text[:60]!r}") from None
        return out


_TOKEN_RE = re.compile(r"[a-z0-9]+")
_STOPWORDS = frozenset(
    "a an and are as at be by for from has have in is it its of on or that the this to was were which with "
    "there these those no not".split()
)


class HashingEmbedder:
    """Deterministic bag-of-words feature hashing; needs no network or model files."""

    def __init__(self, dim: int = 256):
        self.dim = dim

    def _tokens(self, text: str) -> list[str]:
        tokens = []
        for token in _TOKEN_RE.findall(text.lower()):
            if token in _STOPWORDS:
                continue
            if len(token) > 3 and token.endswith("s") and not token.endswith("ss"):
                token = token[:-1]
            tokens.append(token)
        return tokens

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        out = []
        for text in texts:
            vec = [0.0] * self.dim
            tokens = self._tokens(text) or ["<empty>"]
            for token in tokens:
                digest = hashlib.sha256(token.encode("utf-8")).digest()
                index = int.from_bytes(digest[:4], "big") % self.dim
                vec[index] += 1.0 if digest[4] & 1 else -1.0
            norm = math.sqrt(sum(v * v for v in vec))
            if norm == 0.0:
                vec[0], norm = 1.0, 1.0
            out.append([round(v / norm, 12) for v in vec])
        return out


class HttpEmbedder:
    """OpenAI-compatible ``/embeddings`` endpoint; the key comes from an environment variable."""

    def __init__(self, endpoint: str, model: str, api_key_env: str = "LESIONKB_API_KEY", timeout: float = 60.0):
        self.endpoint = endpoint
        self.model = model
        self.api_key_env = api_key_env
        self.timeout = timeout

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        body = json.dumps({"model": self.model, "input": list(texts)}).encode("utf-8")
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        request = urllib.request.Request(self.endpoint, data=body, headers=headers, method="POST")
        try:
            with urllib.request.urlopen(request, timeout=self.timeout) as response:
                payload = json.loads(response.read().decode("utf-8"))
        except OSError as exc:
            raise ProviderUnavailable(f"embedding endpoint failed: {exc}") from exc
        data = sorted(payload["data"], key=lambda item: item.get("index", 0))
        return [list(map(float, item["embedding"])) for item in data]


class RecordingEmbedder:
    """Wraps another embedder and remembers every vector, for writing fixture files."""

    def __init__(self, inner: Embedder):
        self.inner = inner
        self.seen: dict[str, list[float]] = {}
        self._lock = threading.Lock()

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        vectors = self.inner.embed(texts)
        with self._lock:
            for text, vec in zip(texts, vectors):
                self.seen.setdefault(text, vec)
        return vectors

    def save(self, path: str | Path) -> int:
        return write_jsonl(path, ({"text": t, "vector": v} for t, v in sorted(self.seen.items())))


def embed_texts(embedder: Embedder, texts: Sequence[str], batch_size: int = 32, jobs: int = 1) -> list[list[float]]:
    """Embed in batches, optionally with up to ``jobs`` batches in flight; output order matches input."""
    batches = [list(texts[i:i + batch_size]) for i in range(0, len(texts), batch_size)]
    if jobs <= 1 or len(batches) <= 1:
        results = [embedder.embed(batch) for batch in batches]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(embedder.embed, batches))
    vectors = [vec for batch in results for vec in batch]
    if len({len(v) for v in vectors}) > 1:
        raise DimensionMismatch("embedding backend returned vectors of differing dimension")
    return vectors


def embed_rules(rules: Sequence[Rule], embedder: Embedder, jobs: int = 1) -> list[Rule]:
    missing = [r for r in rules if r.embedding is None]
    if not missing:
        return list(rules)
    vectors = embed_texts(embedder, [r.rule_text for r in missing], jobs=jobs)
    filled = {r.rule_id: r.with_embedding(v) for r, v in zip(missing, vectors)}
    return [filled.get(r.rule_id, r) for r in rules]


def embed_rule_base(base: RuleBase, embedder: Embedder, jobs: int = 1) -> RuleBase:
    return base.replace_rules(embed_rules(list(base), embedder, jobs=jobs))


def embed_external_kb(kb: ExternalKB, embedder: Embedder, jobs: int = 1) -> ExternalKB:
    missing = [c for c in kb if c.embedding is None]
    if not missing:
        return kb
    vectors = iter(embed_texts(embedder, [c.text for c in missing], jobs=jobs))
    chunks = tuple(c if c.embedding is not None else c.with_embedding(next(vectors)) for c in kb)
    return ExternalKB(chunks, kb.chunk_size, kb.overlap)
