"""Prompt templates and their rendering.

A template is a list of chat turns whose text carries ``{slot}`` markers.
Slot names are lower-case identifiers, so JSON braces inside the template
text are left alone.  Turn inclusion rules:

* a plain turn must have every slot filled, otherwise :class:`MissingSlot`;
* an ``optional`` turn is rendered only when all of its slots are filled;
* a ``when``/``unless`` turn is gated on a ``"yes"``/``"no"`` flag slot;
* a ``reply`` turn is a previous model answer in a multi-turn dialogue.
  Rendering stops at the first reply whose slot is missing, which is the
  answer the next call is meant to produce.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from typing import Mapping, Optional

from .errors import MissingSlot

RULE_GENERATOR_DIALOGUE = "rule_generator_dialogue"
GRADER = "grader"
FINDING_DETECTION = "finding_detection"
DESCRIPTION_EXTRACTION = "description_extraction"
RULE_REALIGN = "rule_realign"

NONE_RETRIEVED = "(none retrieved)"
NO_EXAMPLES = "(none)"

_SLOT_RE = re.compile(r"\{([a-z_][a-z0-9_]*)\}")


@dataclass(frozen=True)
class Turn:
    role: str
    text: str
    optional: bool = False
    reply: bool = False
    when: Optional[str] = None
    unless: Optional[str] = None

    @property
    def slots(self) -> tuple[str, ...]:
        return tuple(_SLOT_RE.findall(self.text))


@dataclass(frozen=True)
class PromptTemplate:
    template_id: str
    turns: tuple[Turn, ...]

    @property
    def slots(self) -> tuple[str, ...]:
        names: list[str] = []
        for turn in self.turns:
            for name in turn.slots + tuple(n for n in (turn.when, turn.unless) if n):
                if name not in names:
                    names.append(name)
        return tuple(names)


STAGE1_JSON_TEMPLATE = """[
    {
        "Imaging Procedure": "Enter imaging procedure here or 'None'",
        "Procedure Date": "Enter date in YYYY-MM-DD format here or 'None'",
        "Lung RADS": "Enter Lung RADS category here or 'None'",
        "Number of Lesion": "Enter number of lesion here or 'None'",
        "Lagest Lesion Size": "Enter lesion size here",
        "Lesion Type": "Enter lesion type here",
        "SUV": "Enter SUV here or 'None'",
        "Location": "Enter location here or 'None'",
        "Lesion Description": "Enter Lesion Description here or 'None'",
        "Text Source": "Enter text source here or 'None'",
    },
    {
        // Add additional finding as needed

    },
]      // Lung Lesion Findings"""

STAGE2_VOCAB_JSON_TEMPLATE = """{
    "location description": "Enter location description here or 'None'",
    "margin": "Enter margin description here, preferably from the vocabulary
                ['spiculated', 'rounded', 'ill-defined', 'irregular', 'lobulated'] or 'None'"
    "solidity": "Enter solidity description only from the fixed vocabulary ['solid',
                'partly solid', 'groundglass', 'ground-glass',
                'groundglass and consolidative'] or 'None'",
    "calcification": "Enter calcification description here,
                    preferably from ['noncalcified'] or 'None'",
    "cavitation": "Enter cavitation description here,
                    preferably from ['mildly cavitary', 'cavitary'] or 'None'"
}"""

STAGE2_PLAIN_JSON_TEMPLATE = """{
    "location description": "Enter location description here or 'None'",
    "margin": "Enter margin description here or 'None'",
    "solidity": "Enter solidity description here or 'None'",
    "calcification": "Enter calcification description here or 'None'",
    "cavitation": "Enter cavitation description here or 'None'"
}"""

RULE_JSON_FORMAT = '[{"pattern": "example pattern", "rule": "example rule description"}]'

COT_INSTRUCTION = (
    "Let's think step by step: first find every sentence that describes a lesion, then decide "
    "whether it concerns the lungs, then fill in the fields for each lung lesion finding."
)

TEMPLATES: dict[str, PromptTemplate] = {
    RULE_GENERATOR_DIALOGUE: PromptTemplate(RULE_GENERATOR_DIALOGUE, (
        Turn("system", "You are a pulmonary radiologist. Your task is to extract key findings from the "
                       "clinical or imaging reports."),
        Turn("user", "How many findings of Lung Lesions are present in the following text: {text}"),
        Turn("assistant", "{lesion_number}", reply=True),
        Turn("user", "Please provide detailed explanations."),
        Turn("assistant", "{detailed_explanations}", reply=True),
        Turn("user", "Only {num_findings} findings should be classified as Lung Lesions, explain why they "
                     "are and why the remaining findings are not. Return in JSON format of: "
                     '{"lung lesion findings": ["referred text": "reason of being lung lesion finding"], '
                     '"none lung lesion findings": ["referred text": "reason of not being lung lesion finding"]}'),
        Turn("assistant", "{references}", reply=True),
        Turn("user", "Transform the references into generalized, reusable rules by abstracting common "
                     "properties. Format the output in the following JSON structure:\n" + RULE_JSON_FORMAT),
        Turn("assistant", "{rules}", reply=True),
    )),
    GRADER: PromptTemplate(GRADER, (
        Turn("system", "You are a grader assessing the helpfulness and truthfulness of retrieved rules related "
                       "to pulmonary (lung) lesions in the context of pulmonary lesion findings."),
        Turn("user", "Below is the rule to assess:\n{rule}"),
        Turn("user", "Given the clinical or imaging report, please evaluate the helpfulness of each rule on a "
                     "scale from 1 to 5, where:\n"
                     "    1 means not helpful at all\n"
                     "    2 means slightly helpful\n"
                     "    3 means moderately helpful\n"
                     "    4 means very helpful\n"
                     "    5 means extremely helpful\n"
                     "Below is the clinical or imaging report:\n{input_query}", optional=True),
        Turn("user", "Additionally, evaluate the truthfulness of each rule based on the retrieved knowledge on "
                     "a scale from 1 to 3, where:\n"
                     "    1 means not truthful at all\n"
                     "    2 means partially truthful\n"
                     "    3 means completely truthful\n"
                     "Provide a brief explanation indicating how the rule can help in the extraction of pulmonary "
                     "lesion characteristics and how the retrieved knowledge supports or refutes the rule.\n"
                     "Below is the retrieved external knowledge:\n{external_knowledge}", optional=True),
        Turn("user", "Begin your answer with the integer score."),
    )),
    FINDING_DETECTION: PromptTemplate(FINDING_DETECTION, (
        Turn("system", "You are a pulmonary radiologist. Extract key findings from the clinical or imaging report "
                       "and organize them into the provided JSON structure."),
        Turn("user", "{reasoning_instruction}", optional=True),
        Turn("user", "Use the following JSON template as a guide:\n" + STAGE1_JSON_TEMPLATE),
        Turn("user", "Below is the clinical or imaging report:\n{input_query}"),
        Turn("user", "Below are some examples for reference:\n{few_shot_samples}"),
        Turn("user", "Below are some lung-related rules for reference:\n{related_rules}", optional=True),
        Turn("user", "Below are some lung-irrelevant rules for reference:\n{irrelevant_rules}", optional=True),
        Turn("user", "Your previous answer could not be parsed ({parse_error}). The unparseable fragment was:\n"
                     "{malformed_fragment}\nReturn only the JSON array.", optional=True),
    )),
    DESCRIPTION_EXTRACTION: PromptTemplate(DESCRIPTION_EXTRACTION, (
        Turn("system", "You are a pulmonary radiologist. Please extract location description, margin, solidity, "
                       "calcification, cavitation from lesion description and organize them into the provided "
                       "JSON structure."),
        Turn("user", "Use the following JSON template with preferred vocabularies as a guide:\n"
             + STAGE2_VOCAB_JSON_TEMPLATE, when="use_vocabulary"),
        Turn("user", "Use the following JSON template as a guide:\n" + STAGE2_PLAIN_JSON_TEMPLATE,
             unless="use_vocabulary"),
        Turn("user", "Below is the lesion description text:\n{lesion_description_text}"),
        Turn("user", "Below is the full text of report containing the finding for reference:\n{source_text}",
             optional=True),
        Turn("user", "Below are some examples for reference:\n{few_shot_samples}"),
        Turn("user", "Your previous answer could not be parsed ({parse_error}). The unparseable fragment was:\n"
                     "{malformed_fragment}\nReturn only the JSON object.", optional=True),
    )),
    RULE_REALIGN: PromptTemplate(RULE_REALIGN, (
        Turn("system", "You are a pulmonary radiologist revising rules used to detect lung lesion findings in "
                       "clinical and imaging reports."),
        Turn("user", "The following rule is not fully supported by authoritative knowledge:\n{rule}"),
        Turn("user", "Below is the retrieved external knowledge:\n{external_knowledge}"),
        Turn("user", "Revise the rule so that it agrees with the external knowledge and remains useful for "
                     "detecting lung lesion findings. Format the output in the following JSON structure:\n"
                     + RULE_JSON_FORMAT),
    )),
}


def _flag(slots: Mapping[str, str], name: str) -> bool:
    if name not in slots:
        raise MissingSlot(name)
    value = str(slots[name]).strip().lower()
    if value not in ("yes", "no"):
        raise ValueError(f"flag slot {name!r} must be 'yes' or 'no', got {slots[name]!r}")
    return value == "yes"


def _fill(text: str, slots: Mapping[str, str]) -> str:
    return _SLOT_RE.sub(lambda m: str(slots[m.group(1)]), text)


def render_prompt(template_id: str, slots: Mapping[str, str]) -> list[dict[str, str]]:
    """Render ``template_id`` into a list of ``{"role", "content"}`` messages."""
    try:
        template = TEMPLATES[template_id]
    except KeyError:
        raise ValueError(f"unknown template {template_id!r}") from None
    if template_id == GRADER and "input_query" not in slots and "external_knowledge" not in slots:
        raise MissingSlot("input_query")
    messages: list[dict[str, str]] = []
    for turn in template.turns:
        if turn.when is not None and not _flag(slots, turn.when):
            continue
        if turn.unless is not None and _flag(slots, turn.unless):
            continue
        missing = [name for name in turn.slots if name not in slots]
        if turn.reply and missing:
            break
        if missing:
            if turn.optional:
                continue
            raise MissingSlot(missing[0])
        messages.append({"role": turn.role, "content": _fill(turn.text, slots)})
    return messages


def render_bytes(messages: list[dict[str, str]]) -> bytes:
    return json.dumps(messages, ensure_ascii=False, separators=(",", ":")).encode("utf-8")


def slot_digest(slots: Mapping[str, str]) -> str:
    """Stable key for a slot set: SHA-256 of the slots as compact, key-sorted JSON (UTF-8)."""
    canonical = json.dumps({k: str(v) for k, v in slots.items()}, sort_keys=True, ensure_ascii=False,
                           separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def format_rules(rules) -> str:
    """One JSON object per line, in the rule-generator output shape."""
    lines = [json.dumps(rule.as_prompt_json(), ensure_ascii=False) for rule in rules]
    return "\n".join(lines) if lines else NO_EXAMPLES


def format_chunks(chunks) -> str:
    if not chunks:
        return NONE_RETRIEVED
    return "\n\n".join(f"[{c.source_id}] {c.text}" for c in chunks)
