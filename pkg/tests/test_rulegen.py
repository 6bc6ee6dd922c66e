import json

import pytest

from conftest import ScriptProvider
from lesionkb.gateway import Gateway
from lesionkb.retrieval import HashingEmbedder
from lesionkb.rulegen import (
    Reference,
    TrainingExample,
    build_internal_kb,
    extrapolate_rules,
    generate_references,
    load_training_set,
    save_training_set,
)
from lesionkb.errors import FormatViolation
from lesionkb.schema import ClinicalReport, LesionFinding
from lesionkb.store import LUNG_IRRELEVANT, LUNG_RELATED

NODULE_SENTENCE = "Additional soft tissue nodular density in the right upper lobe measuring 1.3 cm."
LIVER_SENTENCE = "Hypodense lesion in the liver measuring 1.1 cm."


def dialogue(references: dict, rules: dict | list):
    """A scripted rule-generator conversation with fixed answers per turn."""
    def answer(request):
        s = request.slots
        if "lesion_number" not in s:
            return "2"
        if "detailed_explanations" not in s:
            return "One nodule in the lung and one liver lesion."
        if "references" not in s:
            return json.dumps(references)
        return json.dumps(rules)
    return answer


def example(text, n):
    return TrainingExample(ClinicalReport(report_id=f"r{abs(hash(text)) % 1000}", text=text),
                           tuple(LesionFinding(lobe="right upper lobe") for _ in range(n)))


REFS = {
    "lung lesion findings": [{NODULE_SENTENCE: "a nodule in the right upper lobe"}],
    "none lung lesion findings": [{LIVER_SENTENCE: "the liver is not the lung"}],
}


def test_references_from_report():
    provider = ScriptProvider(dialogue(REFS, []))
    refs = generate_references(example(NODULE_SENTENCE + " " + LIVER_SENTENCE, 1), Gateway(provider))
    assert [(r.polarity, r.source_text) for r in refs] == [(LUNG_RELATED, NODULE_SENTENCE),
                                                          (LUNG_IRRELEVANT, LIVER_SENTENCE)]
    assert "soft tissue nodular density" in refs[0].source_text
    # the gold count is passed to the third turn
    assert provider.requests[2].slots["num_findings"] == "1"


def test_zero_gold_keeps_only_irrelevant():
    refs = generate_references(example(LIVER_SENTENCE, 0), Gateway(ScriptProvider(dialogue(REFS, []))))
    assert {r.polarity for r in refs} == {LUNG_IRRELEVANT}


def test_rules_from_references():
    rules_out = [
        {"pattern": "nodule", "rule": "Look for nodules with a size and a lung lobe."},
        {"pattern": "liver | kidney | other organs", "rule": "Lesions in other organs are not lung lesions."},
    ]
    refs = [Reference(NODULE_SENTENCE + " nodule", "lung", LUNG_RELATED),
            Reference(LIVER_SENTENCE + " kidney", "liver", LUNG_IRRELEVANT)]
    rules = extrapolate_rules(refs, Gateway(ScriptProvider(dialogue(REFS, rules_out))))
    by_pattern = {r.pattern: r.polarity for r in rules}
    assert by_pattern == {"nodule": LUNG_RELATED, "liver | kidney | other organs": LUNG_IRRELEVANT}


def test_empty_references():
    with pytest.raises(ValueError):
        extrapolate_rules([], Gateway(ScriptProvider(lambda r: "[]")))


def test_build_deduplicates_across_examples():
    rules_out = [{"pattern": "nodule", "rule": "Look for nodules."}]
    gw = Gateway(ScriptProvider(dialogue(REFS, rules_out)))
    base = build_internal_kb([example("a " + NODULE_SENTENCE, 1), example("b " + NODULE_SENTENCE, 1)],
                             gw, HashingEmbedder(32))
    assert [r.pattern for r in base] == ["nodule"]
    assert base.revision > 0
    assert all(r.embedding is not None for r in base)


def test_non_lesion_reports_give_irrelevant_rules_only():
    refs = {"lung lesion findings": [], "none lung lesion findings": [{LIVER_SENTENCE: "liver"}]}
    rules_out = {"lung-related rules": [{"pattern": "lesion", "rule": "Any lesion with a size."}],
                 "lung-irrelevant rules": [{"pattern": "liver", "rule": "Liver lesions are not lung lesions."}]}
    gw = Gateway(ScriptProvider(dialogue(refs, rules_out)))
    base = build_internal_kb([example(LIVER_SENTENCE, 0)], gw, HashingEmbedder(32))
    assert {r.polarity for r in base} == {LUNG_IRRELEVANT}


def test_demo_rule_generation_is_reproducible(demo_dir):
    from lesionkb.config import load_config
    from lesionkb.store import load_rule_base

    cfg = load_config(demo_dir / "config.ini")
    train = load_training_set(demo_dir / "train.jsonl")
    runs = [build_internal_kb(train, cfg.make_gateway(), cfg.make_embedder(), cfg.rulegen) for _ in range(3)]
    assert runs[0] == runs[1] == runs[2] == load_rule_base(demo_dir / "rules.jsonl")


def test_training_file_round_trip(tmp_path):
    train = [example(NODULE_SENTENCE, 1), example(LIVER_SENTENCE, 0)]
    path = tmp_path / "train.jsonl"
    save_training_set(train, path)
    assert load_training_set(path) == train


def test_training_count_mismatch(tmp_path):
    path = tmp_path / "train.jsonl"
    path.write_text(json.dumps({"report": {"report_id": "a", "text": "t"}, "gold_findings": [],
                                "num_findings": 2}) + "\n")
    with pytest.raises(FormatViolation):
        load_training_set(path)
