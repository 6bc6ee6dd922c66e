import json

import pytest

from conftest import ScriptProvider, make_rule
from lesionkb.config import load_config
from lesionkb.errors import FormatViolation, ProviderUnavailable
from lesionkb.gateway import Gateway
from lesionkb.pipeline import (
    PipelineConfig,
    baseline_config,
    extract_stage2,
    load_reports,
    load_results,
    run_pipeline,
    save_reports,
    save_results,
)
from lesionkb.prompts import FINDING_DETECTION
from lesionkb.retrieval import HashingEmbedder
from lesionkb.rulegen import load_training_set
from lesionkb.schema import ClinicalReport, LesionFinding
from lesionkb.store import ExternalKB, RuleBase, add_rules, load_external_kb, load_rule_base

NODULE_REPORT = ("Additional soft tissue nodular density in the right upper lobe measuring 1.3 cm. "
        "Hypodense lesion in the liver is unchanged.")
EMB = HashingEmbedder(32)


def description_answer(values):
    return lambda request: json.dumps(values)


@pytest.mark.parametrize("answer, expected", [
    ({"margin": "Spiculated", "solidity": "solid"}, {"margin": "spiculated", "solidity": "solid"}),
    ({"solidity": "ground-glass"}, {"solidity": "groundglass"}),
    ({}, {"margin": None, "solidity": None, "calcification": None, "cavitation": None}),
    ({"solidity": "semi-solid"}, {"solidity": None}),
])
def test_stage2_values(answer, expected):
    finding = LesionFinding(lesion_description="a nodule", lobe="right upper lobe")
    got = extract_stage2(finding, ClinicalReport("r", "a nodule"), PipelineConfig(),
                         Gateway(ScriptProvider(description_answer(answer))))
    for name, value in expected.items():
        assert getattr(got, name) == value
    assert got.lobe == "right upper lobe"


def test_stage2_skipped_without_description():
    provider = ScriptProvider(lambda r: pytest.fail("no call expected"))
    finding = LesionFinding(lobe="left lower lobe")
    assert extract_stage2(finding, ClinicalReport("r", "x"), PipelineConfig(), Gateway(provider)) == finding


def stage1_then_stage2(findings):
    def answer(request):
        if request.template_id == FINDING_DETECTION:
            return json.dumps(findings)
        return json.dumps({"solidity": "solid"})
    return answer


def test_zero_findings_skip_stage2():
    provider = ScriptProvider(stage1_then_stage2([]))
    run = run_pipeline([ClinicalReport("r", "Normal lungs.")], RuleBase(), ExternalKB(),
                       baseline_config(), Gateway(provider), EMB)
    assert run.results[0].findings == []
    assert [r.template_id for r in provider.requests] == [FINDING_DETECTION]


def test_stage1_fields_only_and_anchoring():
    found = [{"Lagest Lesion Size": "1.3 cm", "Location": "right upper lobe", "solidity": "cavitary",
              "Text Source": "soft tissue   nodular density in the RIGHT upper lobe"}]
    provider = ScriptProvider(stage1_then_stage2(found))
    run = run_pipeline([ClinicalReport("r", NODULE_REPORT)], RuleBase(), ExternalKB(), baseline_config(),
                       Gateway(provider), EMB)
    [f] = run.results[0].findings
    assert f.lesion_size_mm == (13.0,)
    # solidity came from stage 2, not from the stage-1 answer
    assert f.solidity == "solid"
    assert f.text_source == "soft tissue nodular density in the right upper lobe"


def test_repair_round_after_bad_output():
    answers = iter(["not json at all", json.dumps([{"Location": "left upper lobe"}])])
    provider = ScriptProvider(lambda r: next(answers))
    run = run_pipeline([ClinicalReport("r", "x")], RuleBase(), ExternalKB(), baseline_config(),
                       Gateway(provider), EMB)
    assert run.results[0].findings[0].lobe == "left upper lobe"
    assert "parse_error" in provider.requests[1].slots


def test_errors_are_recorded_per_report():
    def answer(request):
        if "second" in request.slots["input_query"]:
            raise ProviderUnavailable("gone")
        if "third" in request.slots["input_query"]:
            return "never valid"
        return "[]"
    reports = [ClinicalReport(i, f"{i} report") for i in ("first", "second", "third")]
    run = run_pipeline(reports, RuleBase(), ExternalKB(), baseline_config(), Gateway(ScriptProvider(answer)), EMB)
    errors = [r.error for r in run.results]
    assert errors[0] is None
    assert errors[1].startswith("ProviderUnavailable") and run.results[1].provider_failure
    assert errors[2].startswith("StructureViolation") and not run.results[2].provider_failure


def test_knowledge_flags_control_prompt_rules():
    rule = make_rule("Look for nodules in lung lobes.", vector=EMB.embed(["Look for nodules in lung lobes."])[0])
    base = add_rules(RuleBase(), [rule])
    report = ClinicalReport("r", "Nodule in the left lung.")
    for use_knowledge in (True, False):
        provider = ScriptProvider(stage1_then_stage2([]))
        cfg = PipelineConfig(use_knowledge=use_knowledge, use_grading=False)
        run = run_pipeline([report], base, ExternalKB(), cfg, Gateway(provider), EMB)
        [request] = provider.requests
        assert ("related_rules" in request.slots) == use_knowledge
        assert run.results[0].rules_used == ([rule.rule_id] if use_knowledge else [])


def test_demo_nodule_report_size(demo_dir):
    cfg = load_config(demo_dir / "config.ini")
    reports = load_reports(demo_dir / "reports.jsonl")
    run = run_pipeline(reports[:1], load_rule_base(demo_dir / "rules.jsonl"),
                       load_external_kb(demo_dir / "external_kb.jsonl"), cfg.pipeline,
                       cfg.make_gateway(), cfg.make_embedder(), load_training_set(demo_dir / "train.jsonl"))
    first = run.results[0].findings[0]
    assert first.lesion_size_mm == (13.0,) and first.lobe == "right upper lobe"


def test_reports_and_results_round_trip(tmp_path):
    reports = [ClinicalReport("a", "text a"), ClinicalReport("b", "text b")]
    save_reports(reports, tmp_path / "reports.jsonl")
    assert load_reports(tmp_path / "reports.jsonl") == reports

    provider = ScriptProvider(stage1_then_stage2([{"Location": "right middle lobe", "Lesion Description": "x"}]))
    run = run_pipeline(reports, RuleBase(), ExternalKB(), baseline_config(), Gateway(provider), EMB)
    save_results(run.results, tmp_path / "out.jsonl")
    loaded = load_results(tmp_path / "out.jsonl")
    assert [r.findings for r in loaded] == [r.findings for r in run.results]


def test_duplicate_report_ids(tmp_path):
    path = tmp_path / "reports.jsonl"
    path.write_text('{"report_id": "a", "text": "x"}\n{"report_id": "a", "text": "y"}\n')
    with pytest.raises(FormatViolation) as info:
        load_reports(path)
    assert "a" in str(info.value)


def test_config_validation():
    with pytest.raises(ValueError):
        PipelineConfig(few_shot_count=-1)
