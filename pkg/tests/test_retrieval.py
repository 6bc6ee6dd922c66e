import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_rule
from lesionkb.errors import DimensionMismatch, FixtureMiss, MissingEmbedding, ZeroVector
from lesionkb.retrieval import (
    FixtureEmbedder,
    HashingEmbedder,
    RecordingEmbedder,
    RetrievalConfig,
    cosine,
    embed_texts,
    retrieve_external,
    retrieve_rules,
)
from lesionkb.store import LUNG_IRRELEVANT, LUNG_RELATED, KnowledgeChunk, RuleBase


def test_cosine_examples():
    assert cosine([2.0, 3.0], [2.0, 3.0]) == pytest.approx(1.0)
    assert cosine([1.0, 0.0], [0.0, 1.0]) == 0.0
    assert cosine([1.0, 0.0], [0.6, 0.8]) == pytest.approx(0.6)
    with pytest.raises(DimensionMismatch):
        cosine([1.0], [1.0, 2.0])
    with pytest.raises(ZeroVector):
        cosine([0.0, 0.0], [1.0, 0.0])


def unit(angle):
    return [math.cos(angle), math.sin(angle)]


def test_top_k_related():
    query = [1.0, 0.0]
    # sims 1.0, 0.0 and 0.6 against the query
    rules = [make_rule("a", vector=[1.0, 0.0]), make_rule("b", vector=[0.0, 1.0]), make_rule("c", vector=[0.6, 0.8])]
    got = retrieve_rules(query, RuleBase(tuple(rules)), RetrievalConfig(k_related=2, k_irrelevant=1))
    assert [r.rule_text for r in got] == ["a", "c"]


def test_degenerate_k_and_short_population():
    rules = [make_rule("a", vector=[1.0, 0.0]), make_rule("z", LUNG_IRRELEVANT, vector=[0.0, 1.0])]
    assert retrieve_rules([1.0, 0.0], rules, RetrievalConfig(0, 0)) == []
    assert [r.rule_text for r in retrieve_rules([1.0, 0.0], rules, RetrievalConfig(5, 5))] == ["a", "z"]


def test_related_come_before_irrelevant():
    rules = [make_rule("irr", LUNG_IRRELEVANT, vector=[1.0, 0.0]), make_rule("rel", vector=[0.0, 1.0])]
    got = retrieve_rules([1.0, 0.0], rules, RetrievalConfig(1, 1))
    assert [r.polarity for r in got] == [LUNG_RELATED, LUNG_IRRELEVANT]


def test_ties_go_to_smaller_id():
    rules = [make_rule(t, vector=[1.0, 1.0]) for t in ("one", "two", "three")]
    got = retrieve_rules([1.0, 1.0], rules, RetrievalConfig(2, 0))
    assert [r.rule_id for r in got] == sorted(r.rule_id for r in rules)[:2]


def test_missing_embedding_names_rule():
    r = make_rule("no vector")
    with pytest.raises(MissingEmbedding, match=r.rule_id):
        retrieve_rules([1.0], [r], RetrievalConfig())


def chunk(i, vector):
    return KnowledgeChunk(f"doc#{i}", "doc", 0, 1, "x", tuple(vector))


def test_external_threshold():
    rule = make_rule("r", vector=[1.0, 0.0])
    sims = [0.95, 0.91, 0.60]
    chunks = [chunk(i, [s, math.sqrt(1 - s * s)]) for i, s in enumerate(sims)]
    got = retrieve_external(rule, chunks, RetrievalConfig(external_threshold=0.9))
    assert [c.chunk_id for c in got] == ["doc#0", "doc#1"]
    assert retrieve_external(rule, chunks[2:], RetrievalConfig(external_threshold=0.9)) == []


def test_identical_text_chunk_comes_first():
    emb = HashingEmbedder()
    text = "Hepatic lesions are not lung lesion findings."
    rule = make_rule(text, vector=emb.embed([text])[0])
    chunks = [chunk(0, emb.embed(["liver lesion"])[0]), chunk(1, emb.embed([text])[0])]
    got = retrieve_external(rule, chunks, RetrievalConfig(external_threshold=0.0))
    assert got[0].chunk_id == "doc#1"


vectors = st.lists(st.integers(-3, 3), min_size=3, max_size=3).filter(any)


@settings(max_examples=200)
@given(st.lists(st.tuples(st.booleans(), vectors), min_size=0, max_size=25), vectors,
       st.integers(0, 6), st.integers(0, 6))
def test_retrieval_matches_exhaustive_sort(items, query, kr, ki):
    rules = [make_rule(f"rule {i}", LUNG_RELATED if rel else LUNG_IRRELEVANT, vector=[float(v) for v in vec])
             for i, (rel, vec) in enumerate(items)]
    got = retrieve_rules([float(v) for v in query], rules, RetrievalConfig(kr, ki))

    q = np.array(query, dtype=float)

    def ordered(polarity):
        pool = [r for r in rules if r.polarity == polarity]
        sims = [round(float(np.dot(q, r.embedding) / (np.linalg.norm(q) * np.linalg.norm(r.embedding))), 12)
                for r in pool]
        return [r for _, r in sorted(zip(sims, pool), key=lambda p: (-p[0], p[1].rule_id))]

    assert got == ordered(LUNG_RELATED)[:kr] + ordered(LUNG_IRRELEVANT)[:ki]


def test_hashing_embedder_is_deterministic_and_normalized():
    a, b = HashingEmbedder(64).embed(["spiculated nodule", "spiculated nodule"])
    assert a == b and len(a) == 64
    assert math.isclose(sum(v * v for v in a), 1.0, rel_tol=1e-9)
    # plural folding
    assert HashingEmbedder(64).embed(["nodules"]) == HashingEmbedder(64).embed(["nodule"])


def test_fixture_embedder_and_recording(tmp_path):
    rec = RecordingEmbedder(HashingEmbedder(8))
    embed_texts(rec, ["alpha", "beta", "alpha"], batch_size=2, jobs=2)
    path = tmp_path / "emb.jsonl"
    assert rec.save(path) == 2
    fixture = FixtureEmbedder.from_file(path)
    assert fixture.embed(["beta"]) == HashingEmbedder(8).embed(["beta"])
    with pytest.raises(FixtureMiss):
        fixture.embed(["gamma"])


def test_embed_texts_keeps_order():
    emb = HashingEmbedder(16)
    texts = [f"text {i}" for i in range(70)]
    assert embed_texts(emb, texts, batch_size=8, jobs=4) == emb.embed(texts)
