#!/usr/bin/env python3
"""Regenerate the synthetic demo corpus and its recorded mock responses under fixtures/demo/.

A scripted responder plays the LLM.  It reads the request slots directly and
answers with simple keyword heuristics.  Its finding detection degrades in a
fixed way with the number of rules it is shown:

  lung-related rules    0  centimetre sizes are copied without conversion
                        1  a size given for "the larger of the two" is copied to both nodules
                        3+ lymph nodes are reported as lung findings
  lung-irrelevant rules 0  liver lesions are reported as lung findings
                        2+ subpleural nodules are suppressed

so (2 related, 1 irrelevant) is the only setting with no size errors on the
training set.  Every call is recorded and written out as the mock fixture file.

Usage: python3 scripts/build_demo_fixtures.py [OUT_DIR]
"""

from __future__ import annotations

import json
import re
import sys
from dataclasses import replace
from pathlib import Path

from lesionkb.evaluation import evaluate, grid_search_topk
from lesionkb.gateway import Gateway, GenerationRequest, RecordingProvider
from lesionkb.grader import save_audit
from lesionkb.jsonl import write_jsonl
from lesionkb.pipeline import PipelineConfig, baseline_config, run_pipeline, save_reports, save_results
from lesionkb.prompts import (
    DESCRIPTION_EXTRACTION,
    FINDING_DETECTION,
    GRADER,
    NO_EXAMPLES,
    RULE_GENERATOR_DIALOGUE,
    RULE_REALIGN,
)
from lesionkb.retrieval import HashingEmbedder, RecordingEmbedder, RetrievalConfig, embed_external_kb
from lesionkb.rulegen import RuleGenConfig, TrainingExample, build_internal_kb, save_training_set
from lesionkb.schema import ClinicalReport, LesionFinding, finding_to_record
from lesionkb.store import build_external_kb, save_external_kb, save_rule_base

# Hashing embeddings of a short rule against a 1000-character chunk rarely pass
# a 0.9 cosine; the demo lowers the external threshold so grading sees evidence.
DEMO_EXTERNAL_THRESHOLD = 0.3

# ---------------------------------------------------------------------------
# Corpus
# ---------------------------------------------------------------------------

TEST_REPORTS = [
    ("R01", "imaging", "2021-02-11",
     "EXAM: CT CHEST WITH CONTRAST\nDATE: 2021-02-11\n"
     "FINDINGS: Additional soft tissue nodular density in the right upper lobe measuring 1.3 cm. "
     "2 tiny nodules in the left lower lobe, each measuring 3 mm. No pleural effusion. The liver is unremarkable.\n"
     "IMPRESSION: Indeterminate pulmonary finding. Lung-RADS 4A."),
    ("R02", "imaging", "2021-03-02",
     "EXAM: PET/CT SKULL BASE TO MID THIGH\nDATE: 2021-03-02\n"
     "FINDINGS: There are 2 adjacent pulmonary nodules within the left lower lobe, the larger of the two "
     "measuring 5mm with an SUV of 2.39. Hypodense lesion in the liver measuring 1.1 cm, likely a cyst.\n"
     "IMPRESSION: Low grade uptake as described."),
    ("R03", "imaging", "2021-04-19",
     "EXAM: PET/CT SKULL BASE TO MID THIGH\nDATE: 2021-04-19\n"
     "FINDINGS: Spiculated part-solid mass in the right lower lobe measuring 2.4 x 1.8 cm with an SUV of 6.1. "
     "Enlarged right paratracheal lymph node measuring 1.2 cm.\n"
     "IMPRESSION: Findings suspicious for primary lung malignancy."),
    ("R04", "imaging", "2021-05-07",
     "EXAM: CT CHEST WITHOUT CONTRAST\nDATE: 2021-05-07\n"
     "FINDINGS: Ground-glass nodule in the left upper lobe measuring 8 mm with smooth margins. "
     "Incidental thyroid nodule measuring 1.5 cm.\n"
     "IMPRESSION: Lung-RADS 2."),
    ("R05", "imaging", "2021-05-21",
     "EXAM: CT ABDOMEN AND PELVIS\nDATE: 2021-05-21\n"
     "FINDINGS: The lung bases are clear. Simple cyst in the left kidney measuring 2.0 cm.\n"
     "IMPRESSION: No acute process."),
    ("R06", "imaging", "2021-06-14",
     "EXAM: CT CHEST WITH CONTRAST\nDATE: 2021-06-14\n"
     "FINDINGS: Calcified granuloma in the right middle lobe measuring 4 mm. "
     "Cavitary mass in the left upper lobe measuring 3.1 cm with irregular margins.\n"
     "IMPRESSION: Cavitary left upper lobe mass, infection versus neoplasm."),
    ("R07", "imaging", "2021-07-01",
     "EXAM: LOW DOSE CT CHEST\nDATE: 2021-07-01\n"
     "FINDINGS: Noncalcified solid subpleural nodule in the left upper lobe measuring 6 mm.\n"
     "IMPRESSION: Lung-RADS 3."),
    ("R08", "imaging", "2021-07-22",
     "EXAM: CT CHEST WITH CONTRAST\nDATE: 2021-07-22\n"
     "FINDINGS: Multiple bilateral pulmonary nodules, the largest in the right lower lobe measuring 9 mm. "
     "Left adrenal nodule measuring 1.0 cm.\n"
     "IMPRESSION: Pulmonary nodules, metastatic disease not excluded."),
    ("R09", "clinical", "2021-08-09",
     "CLINICAL NOTE\nDATE: 2021-08-09\n"
     "FINDINGS: Patient with a known lobulated solid mass in the left lower lobe measuring 3.5 x 2.8 cm on "
     "the prior CT chest. Plan for biopsy.\n"
     "IMPRESSION: Proceed with tissue sampling."),
    ("R10", "imaging", "2021-09-13",
     "EXAM: CT CHEST WITHOUT CONTRAST\nDATE: 2021-09-13\n"
     "FINDINGS: Stable solid nodule in the right upper lobe measuring 7 mm with smooth margins. "
     "Hepatic lesion measuring 1.4 cm, unchanged.\n"
     "IMPRESSION: Stable pulmonary nodule."),
    ("R11", "imaging", "2021-10-04",
     "EXAM: CT CHEST WITH CONTRAST\nDATE: 2021-10-04\n"
     "FINDINGS: Lobulated groundglass and consolidative nodule in the left lower lobe measuring 2.2 cm.\n"
     "IMPRESSION: Lung-RADS 4B."),
    ("R12", "imaging", "2021-11-18",
     "EXAM: CT CHEST WITHOUT CONTRAST\nDATE: 2021-11-18\n"
     "FINDINGS: Thin-walled cyst in the right lower lobe measuring 1.9 cm.\n"
     "IMPRESSION: Benign appearing pulmonary cyst."),
]

TRAIN_REPORTS = [
    ("T01", "imaging", "2020-01-15",
     "EXAM: CT CHEST WITH CONTRAST\nDATE: 2020-01-15\n"
     "FINDINGS: Solid pulmonary nodule in the left upper lobe measuring 1.1 cm. "
     "Hepatic lesion measuring 2.0 cm.\n"
     "IMPRESSION: Lung-RADS 4A."),
    ("T02", "imaging", "2020-02-03",
     "EXAM: CT CHEST WITHOUT CONTRAST\nDATE: 2020-02-03\n"
     "FINDINGS: There are 2 pulmonary nodules in the right lower lobe, the larger of the two measuring 7 mm.\n"
     "IMPRESSION: Lung-RADS 3."),
    ("T03", "imaging", "2020-03-11",
     "EXAM: PET/CT SKULL BASE TO MID THIGH\nDATE: 2020-03-11\n"
     "FINDINGS: Subcarinal lymph node measuring 1.4 cm. "
     "Spiculated mass in the right upper lobe measuring 2.6 cm with an SUV of 8.2.\n"
     "IMPRESSION: Suspicious right upper lobe mass."),
    ("T04", "imaging", "2020-04-27",
     "EXAM: LOW DOSE CT CHEST\nDATE: 2020-04-27\n"
     "FINDINGS: Subpleural solid nodule in the left lower lobe measuring 5 mm. "
     "Calcified granuloma in the right upper lobe measuring 3 mm.\n"
     "IMPRESSION: Lung-RADS 2."),
    ("T05", "imaging", "2020-05-18",
     "EXAM: CT CHEST WITH CONTRAST\nDATE: 2020-05-18\n"
     "FINDINGS: Ground-glass nodule in the right middle lobe measuring 9 mm. "
     "Thyroid nodule measuring 1.2 cm.\n"
     "IMPRESSION: Lung-RADS 2."),
]

EXTERNAL_DOCS = {
    "pulmonary_nodule_primer.txt": (
        "A pulmonary nodule is a rounded or irregular opacity in the lung that measures up to 3 cm in "
        "diameter. A lesion larger than 3 cm is called a mass. Nodules are located in one of the five lung "
        "lobes: the right upper lobe, the right middle lobe, the right lower lobe, the left upper lobe and "
        "the left lower lobe. The lingula belongs to the left upper lobe. Radiology reports give lesion size "
        "in millimetres or centimetres; one centimetre equals ten millimetres, so a nodule measuring 1.3 cm "
        "measures 13 mm. When two or three dimensions are reported, the largest dimension is the one used "
        "for management. "
        "Nodule attenuation is described as solid, part-solid (partly solid) or ground-glass. A part-solid "
        "nodule contains both ground-glass and solid components, and such nodules carry a higher risk of "
        "malignancy than pure ground-glass nodules of the same size. Margins are described as smooth, "
        "lobulated, irregular or spiculated. Spiculated margins are strongly associated with malignancy. "
        "Calcification in a benign pattern, such as diffuse, central, laminated or popcorn calcification, "
        "indicates a benign nodule; a calcified granuloma is a healed infection and is a benign calcified "
        "pulmonary nodule that does not need follow-up, although it is still a lung lesion. Cavitation is "
        "a gas-filled space within a nodule or mass and may be seen in infection or in squamous cell "
        "carcinoma. "
        "Subpleural nodules lie directly beneath the pleura but are inside the lung parenchyma, so they are "
        "pulmonary nodules and not pleural disease. Pleural effusion and pleural thickening are pleural "
        "findings, not lung lesion findings. "
        "When a report describes several nodules and gives a single measurement for the largest of them, "
        "that measurement belongs to the largest nodule only; the size of the smaller nodules is not stated. "
        "Fluorodeoxyglucose positron emission tomography reports the maximum standardized uptake value, SUV, "
        "of a lesion. An SUV above 2.5 is often regarded as suspicious, but small nodules can have low "
        "uptake because of partial volume effects. Lung-RADS assigns categories from 1 to 4X to low dose "
        "screening CT examinations based on nodule size, attenuation and growth."
    ),
    "extrapulmonary_findings.txt": (
        "Many chest CT and PET/CT examinations show findings outside the lungs. These incidental findings "
        "must be kept apart from lung lesion findings. Hepatic lesions, meaning lesions in the liver such "
        "as cysts, hemangiomas or metastases, are abdominal findings and are not lung lesions even when "
        "seen on a chest CT. Renal cysts and adrenal nodules are likewise not pulmonary findings. Thyroid "
        "nodules are seen at the thoracic inlet; a thyroid nodule is a thyroid finding and not a lung "
        "lesion. Lymph nodes in the mediastinum, such as paratracheal or subcarinal lymph nodes, and hilar "
        "lymph nodes are nodal findings. An enlarged lymph node is reported with its short axis in "
        "millimetres, but it is not a lung lesion finding, even though nodal disease matters for staging "
        "of lung cancer. Pleural effusion, pleural plaques and pleural thickening are pleural findings. "
        "Bone lesions, such as sclerotic or lytic lesions of the ribs or spine, are skeletal findings. "
        "Breast nodules and axillary lymph nodes are also outside the lung. "
        "When extracting lung lesion findings, every lesion should be checked for its organ of origin. A "
        "lesion is a lung lesion finding only when it lies in the lung parenchyma, usually stated as a "
        "location in one of the lung lobes or as a pulmonary nodule, mass, cyst or opacity. Words such as "
        "hepatic, renal, adrenal, thyroid, nodal, osseous and pleural indicate findings that belong to "
        "another organ. Subpleural location is an exception: a subpleural nodule is inside the lung. "
        "Reports often mention an organ only to say that it is normal, for example the liver is "
        "unremarkable; such statements contain no lesion at all. Findings that are described as resolved, "
        "or that refer to a prior examination only, should be read carefully: a lesion that is still "
        "present and measured on the current examination is a current finding, while a lesion that has "
        "resolved is not. Clinical notes may refer to a known lung mass measured on a prior CT; the "
        "measurement reported in the note still describes that lung lesion. The number of lesions can be "
        "solitary, multiple, or a count given in the report, and it applies to the group of lesions "
        "described together in one sentence. For multiple nodules the size of the largest one is usually "
        "the only size that is reported, and it should be attached only to that largest nodule."
    ),
}

# ---------------------------------------------------------------------------
# Heuristic reading of a report
# ---------------------------------------------------------------------------

LOBES = ("right upper lobe", "right middle lobe", "right lower lobe", "left upper lobe", "left lower lobe")
LESION_WORDS = re.compile(r"\b(nodules?|mass|lesion|cyst|density|opacity|granuloma|lymph node)\b", re.I)
NON_LUNG = re.compile(r"\b(liver|hepatic|kidney|renal|adrenal|thyroid|lymph node)\b", re.I)
SIZE_RE = re.compile(r"(\d+(?:\.\d+)?)\s*(mm|cm)(?:\s*x\s*(\d+(?:\.\d+)?)\s*(mm|cm))?", re.I)


def _sentences(text: str) -> list[str]:
    body = re.search(r"FINDINGS:\s*(.*?)(?:\n[A-Z ]+:|\Z)", text, re.S)
    section = body.group(1) if body else text
    return [s.strip() for s in re.split(r"(?<=\.)\s+", section.replace("\n", " ")) if s.strip()]


def _header(text: str) -> tuple[str | None, str | None]:
    exam = re.search(r"EXAM:\s*(.+)", text)
    procedure = None
    if exam:
        raw = exam.group(1).lower()
        procedure = "PET/CT" if "pet" in raw else ("low dose CT chest" if "low dose" in raw
                                                   else "CT abdomen" if "abdomen" in raw else "CT chest")
    elif "prior CT chest" in text:
        procedure = "CT chest"
    date = re.search(r"DATE:\s*(\d{4}-\d{2}-\d{2})", text)
    return procedure, date.group(1) if date else None


def _lung_rads(text: str) -> str | None:
    m = re.search(r"Lung-RADS (\w+)", text)
    return m.group(1) if m else None


def _lesion_type(sentence: str) -> str:
    s = sentence.lower()
    for word, kind in (("mass", "mass"), ("cyst", "cyst"), ("granuloma", "granuloma"), ("lymph node", "lymph node"),
                       ("nodul", "nodule"), ("lesion", "lesion"), ("opacity", "opacity")):
        if word in s:
            return kind
    return "lesion"


def _count(sentence: str) -> tuple[str, int]:
    s = sentence.lower()
    m = re.search(r"\b(\d+)\b(?:\s+\w+)?\s+(?:pulmonary\s+)?nodules", s)
    if m:
        return m.group(1), int(m.group(1))
    if "multiple" in s:
        return "multiple", 1
    return "solitary", 1


def _size_text(sentence: str, convert: bool) -> str | None:
    m = SIZE_RE.search(sentence)
    if not m:
        return None
    if not convert:
        # Numbers copied as printed, unit dropped.
        return " x ".join(v for v in (m.group(1), m.group(3)) if v)
    return m.group(0)


def _suv(sentence: str) -> str | None:
    m = re.search(r"SUV of (\d+(?:\.\d+)?)", sentence)
    return m.group(1) if m else None


def read_findings(text: str, n_related: int = 2, n_irrelevant: int = 1) -> list[dict]:
    """Stage-1 style records for a report, degraded according to the rule counts."""
    procedure, date = _header(text)
    records = []
    for sentence in _sentences(text):
        if not LESION_WORDS.search(sentence):
            continue
        lower = sentence.lower()
        nonlung = NON_LUNG.search(sentence)
        if nonlung:
            word = nonlung.group(1).lower()
            include = (word in ("liver", "hepatic") and n_irrelevant == 0) or (word == "lymph node" and n_related >= 3)
            if not include:
                continue
        elif not (any(lobe in lower for lobe in LOBES) or "pulmonary" in lower):
            continue
        if "subpleural" in lower and n_irrelevant >= 2:
            continue
        lobe = next((lobe for lobe in LOBES if lobe in lower), None)
        number, copies = _count(sentence)
        size = _size_text(sentence, convert=n_related >= 1)
        base = {
            "Imaging Procedure": procedure or "None",
            "Procedure Date": date or "None",
            "Lung RADS": _lung_rads(text) or "None",
            "Number of Lesion": number,
            "Lagest Lesion Size": size or "None",
            "Lesion Type": _lesion_type(sentence),
            "SUV": _suv(sentence) or "None",
            "Location": lobe or "None",
            "Lesion Description": sentence,
            "Text Source": sentence,
        }
        records.append(base)
        if copies > 1 and "larger of the two" in lower:
            second = dict(base)
            second["SUV"] = "None"
            if n_related >= 2:
                second["Lagest Lesion Size"] = "None"
            records.append(second)
    return records


def read_description(description: str, context: str | None, vocabulary: bool) -> dict:
    s = description.lower()
    if context:
        # A following sentence of the report can add detail.
        idx = context.find(description)
        if idx >= 0:
            tail = context[idx + len(description):].split(".")[0].lower()
            if "calcif" in tail:
                s += " " + tail
    margin = next((m for m in ("spiculated", "lobulated", "irregular", "smooth") if m in s), None)
    if "groundglass and consolidative" in s:
        solidity = "groundglass and consolidative"
    elif "part-solid" in s or "partly solid" in s:
        solidity = "partly solid" if vocabulary else "semi-solid"
    elif "ground-glass" in s or "groundglass" in s:
        solidity = "groundglass"
    elif "solid" in s:
        solidity = "solid"
    else:
        solidity = None
    if "noncalcified" in s:
        calcification = "noncalcified"
    elif "calcified" in s:
        calcification = "calcified"
    else:
        calcification = None
    cavitation = "cavitary" if ("cavitary" in s or "cavitation" in s) else None
    location = next((f"subpleural {lobe}" if "subpleural" in s else lobe for lobe in LOBES if lobe in s), None)
    if location is None and "bilateral" in s:
        location = "bilateral"
    out = {
        "location description": location,
        "margin": margin,
        "solidity": solidity,
        "calcification": calcification,
        "cavitation": cavitation,
    }
    return {k: (v if v is not None else "None") for k, v in out.items()}


def gold_findings(text: str) -> list[LesionFinding]:
    from lesionkb.schema import finding_from_record

    out = []
    for record in read_findings(text):
        desc = read_description(record["Lesion Description"], text, vocabulary=True)
        out.append(finding_from_record({**record, **desc}))
    return out


# ---------------------------------------------------------------------------
# Scripted responder
# ---------------------------------------------------------------------------

RULE_LIBRARY = [
    # (trigger in a reference sentence, polarity, pattern, rule)
    ("cm", "related", "size in centimetres",
     "Lesion sizes reported in centimetres are converted to millimetres (1 cm = 10 mm)."),
    ("lobe", "related", "nodule | mass in a lung lobe",
     "A nodule, mass, cyst or opacity located in a named lung lobe is a lung lesion finding."),
    ("SUV", "related", "SUV",
     "The SUV stated for an FDG-avid pulmonary lesion is recorded with that lesion."),
    ("larger of the two", "related", "larger of the two",
     "When one size is given for the larger of several nodules, only the largest nodule gets that size."),
    ("spiculated", "related", "spiculated",
     "Spiculated, lobulated or irregular margins describe the lung lesion they belong to."),
    ("granuloma", "related", "granuloma",
     "A calcified granuloma is never a lung lesion and should be ignored."),
    ("hepatic", "irrelevant", "hepatic | liver",
     "Hepatic lesions are liver findings and are not lung lesion findings."),
    ("lymph node", "irrelevant", "lymph node",
     "Mediastinal, subcarinal or hilar lymph nodes are nodal findings, not lung lesion findings."),
    ("thyroid", "irrelevant", "thyroid",
     "A thyroid nodule is a thyroid finding, not a lung lesion finding."),
]

# Realignment corrections keyed by a word of the rule being revised.
REALIGNED = {
    "granuloma": ("calcified granuloma",
                  "A calcified granuloma is a benign calcified pulmonary nodule; it is still a lung lesion "
                  "finding, recorded with calcified calcification."),
}


def _rule_lines(slot: str) -> int:
    return 0 if slot.strip() == NO_EXAMPLES else len([ln for ln in slot.splitlines() if ln.strip()])


class ScriptedResponder:
    def generate(self, request: GenerationRequest) -> str:
        s = request.slots
        tid = request.template_id
        if tid == RULE_GENERATOR_DIALOGUE:
            return self._dialogue(s)
        if tid == GRADER:
            return self._grade(s)
        if tid == RULE_REALIGN:
            rule = json.loads(s["rule"])
            for word, (pattern, text) in REALIGNED.items():
                if word in rule["rule"].lower():
                    return json.dumps([{"pattern": pattern, "rule": text}])
            return json.dumps([rule])
        if tid == FINDING_DETECTION:
            related = _rule_lines(s["related_rules"]) if "related_rules" in s else 0
            irrelevant = _rule_lines(s["irrelevant_rules"]) if "irrelevant_rules" in s else 0
            return json.dumps(read_findings(s["input_query"], related, irrelevant), indent=2)
        if tid == DESCRIPTION_EXTRACTION:
            desc = read_description(s["lesion_description_text"], s.get("source_text"),
                                    s["use_vocabulary"] == "yes")
            return "```json\n" + json.dumps(desc, indent=2) + "\n```"
        raise ValueError(f"unscripted template {tid}")

    def _dialogue(self, s: dict) -> str:
        text = s["text"]
        lesions = [x for x in _sentences(text) if LESION_WORDS.search(x)]
        lung = [x for x in lesions if not NON_LUNG.search(x)]
        other = [x for x in lesions if NON_LUNG.search(x)]
        if "lesion_number" not in s:
            return f"There are {len(lung)} findings of lung lesions in the text."
        if "detailed_explanations" not in s:
            lines = [f"- {x} This describes a lesion in the lung parenchyma." for x in lung]
            lines += [f"- {x} This lesion lies outside the lungs." for x in other]
            return "\n".join(lines) or "No lesions are described."
        if "references" not in s:
            n = int(s["num_findings"])
            return json.dumps({
                "lung lesion findings": [{x: "located in the lung"} for x in lung[:n]],
                "none lung lesion findings": [{x: "not in the lung"} for x in lung[n:] + other],
            })
        refs = json.loads(s["references"])
        sources = [next(iter(d)) for d in refs["lung lesion findings"] + refs["none lung lesion findings"]]
        related, irrelevant = [], []
        for trigger, polarity, pattern, rule in RULE_LIBRARY:
            if any(trigger.lower() in src.lower() for src in sources):
                (related if polarity == "related" else irrelevant).append({"pattern": pattern, "rule": rule})
        return json.dumps({"lung-related rules": related, "lung-irrelevant rules": irrelevant}, indent=2)

    def _grade(self, s: dict) -> str:
        rule = json.loads(s["rule"])
        if "external_knowledge" in s:
            score = 1 if "never a lung lesion" in rule["rule"] else 3
            return f"{score}\nThe retrieved knowledge {'refutes' if score == 1 else 'supports'} the rule."
        lung = [x for x in _sentences(s["input_query"]) if LESION_WORDS.search(x) and not NON_LUNG.search(x)]
        if not lung:
            return "2 - the report describes no lung lesion, so the rule adds little."
        return "Score: 5/5. The rule applies directly to this report."


# ---------------------------------------------------------------------------
# Build
# ---------------------------------------------------------------------------

def _report(rid: str, kind: str, date: str, text: str) -> ClinicalReport:
    return ClinicalReport(report_id=rid, text=text, kind=kind, subject_id=f"S{rid[1:]}", report_date=date)


CONFIG_TEXT = """\
# Demo run configuration: recorded mock responses and embeddings.
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
# Lowered from 0.9 because the demo embeddings are bag-of-words hashes.
external_threshold = {threshold}
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

[pipeline]
jobs = 4
"""


def build(out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    test = [_report(*r) for r in TEST_REPORTS]
    train = [TrainingExample(_report(*r), tuple(gold_findings(r[3]))) for r in TRAIN_REPORTS]
    save_reports(test, out / "reports.jsonl")
    save_training_set(train, out / "train.jsonl")
    write_jsonl(out / "gold.jsonl", (
        {"report_id": r.report_id, "findings": [finding_to_record(f) for f in gold_findings(r.text)]} for r in test
    ))
    (out / "external").mkdir(exist_ok=True)
    for name, text in EXTERNAL_DOCS.items():
        (out / "external" / name).write_text(text, encoding="utf-8")
    (out / "config.ini").write_text(CONFIG_TEXT.format(threshold=DEMO_EXTERNAL_THRESHOLD), encoding="utf-8")

    provider = RecordingProvider(ScriptedResponder())
    gateway = Gateway(provider)
    embedder = RecordingEmbedder(HashingEmbedder())

    kb = embed_external_kb(build_external_kb(EXTERNAL_DOCS), embedder)
    save_external_kb(kb, out / "external_kb.jsonl")
    base = build_internal_kb(train, gateway, embedder, RuleGenConfig())
    save_rule_base(base, out / "rules.jsonl")

    cfg = PipelineConfig(retrieval=RetrievalConfig(external_threshold=DEMO_EXTERNAL_THRESHOLD))
    arms = {
        "full": cfg,
        "no_knowledge": replace(cfg, use_knowledge=False),
        "no_grading": replace(cfg, use_grading=False),
        "no_context": replace(cfg, use_extended_context=False, use_vocabulary=False),
        "baseline": baseline_config(cfg),
    }
    gold = {r.report_id: gold_findings(r.text) for r in test}
    for name, arm in arms.items():
        run = run_pipeline(test, base, kb, arm, gateway, embedder, train=train)
        errors = [r.error for r in run.results if r.error]
        if errors:
            raise SystemExit(f"{name}: {errors}")
        pred = {r.report_id: r.findings for r in run.results}
        report = evaluate(gold, pred)
        f1 = {k: round(m.f1, 3) for k, m in report.metrics.items()}
        print(f"{name:13s} {f1}")
        if name == "full":
            save_results(run.results, out / "expected_findings.jsonl")
            save_audit(run.audit, out / "expected_audit.jsonl")

    grid = grid_search_topk(train, base, kb, cfg, gateway, embedder, range(5), range(5))
    print("grid best", grid.best)
    print(grid.to_csv())

    provider.save(out / "llm_fixtures.jsonl")
    embedder.save(out / "embeddings.jsonl")


if __name__ == "__main__":
    build(Path(sys.argv[1]) if len(sys.argv) > 1 else Path(__file__).resolve().parent.parent / "fixtures" / "demo")
