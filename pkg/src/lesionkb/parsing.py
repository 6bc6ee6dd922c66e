"""Reading scores and JSON payloads out of free-form model output."""

from __future__ import annotations

import json
import re
from typing import Any

from .errors import ScoreNotFound, StructureViolation
from .schema import LesionFinding, STAGE2_FIELDS, _coerce, _key, finding_from_record

TRUTHFULNESS_SCALE = (1, 3)
HELPFULNESS_SCALE = (1, 5)

FINDINGS = "findings"
DESCRIPTION = "description"
RULES = "rules"
REFERENCES = "references"
SHAPES = (FINDINGS, DESCRIPTION, RULES, REFERENCES)

# An integer, optionally written as a fraction ("7/5"); the denominator is
# never a candidate and decimals ("1.3") are not integers.
_SCORE_RE = re.compile(r"(?<![\d.])(\d+)(\.\d+)?(?:\s*/\s*\d+)?")


def parse_score(raw: str, scale: tuple[int, int]) -> int:
    low, high = scale
    for match in _SCORE_RE.finditer(raw):
        if match.group(2):
            continue
        value = int(match.group(1))
        if low <= value <= high:
            return value
    raise ScoreNotFound(f"no integer in {low}..{high} found in {raw[:80]!r}")


_FENCE_RE = re.compile(r"```[a-zA-Z0-9_-]*\n?|```")


def _balanced(text: str, start: int) -> str | None:
    """The bracketed span starting at ``text[start]``, honouring JSON strings."""
    pairs = {"[": "]", "{": "}"}
    stack = [pairs[text[start]]]
    in_string = False
    escape = False
    for i in range(start + 1, len(text)):
        ch = text[i]
        if in_string:
            if escape:
                escape = False
            elif ch == "\\":
                escape = True
            elif ch == '"':
                in_string = False
            continue
        if ch == '"':
            in_string = True
        elif ch in pairs:
            stack.append(pairs[ch])
        elif ch in "]}":
            if not stack or ch != stack[-1]:
                return None
            stack.pop()
            if not stack:
                return text[start:i + 1]
    return None


def _strip_comments(text: str) -> str:
    out = []
    in_string = False
    escape = False
    i = 0
    while i < len(text):
        ch = text[i]
        if in_string:
            out.append(ch)
            if escape:
                escape = False
            elif ch == "\\":
                escape = True
            elif ch == '"':
                in_string = False
            i += 1
            continue
        if ch == '"':
            in_string = True
        elif text.startswith("//", i):
            while i < len(text) and text[i] != "\n":
                i += 1
            continue
        out.append(ch)
        i += 1
    return "".join(out)


_TRAILING_COMMA_RE = re.compile(r",(\s*[\]}])")


_STR = r'"(?:[^"\\]|\\.)*"'
_PAIR = _STR + r"\s*:\s*" + _STR
# ["a": "b", ...] is not JSON but is what the reference template literally asks for.
_PAIR_LIST_RE = re.compile(r"\[(\s*" + _PAIR + r"(?:\s*,\s*" + _PAIR + r")*\s*,?\s*)\]")


def _loads_lenient(fragment: str) -> Any:
    cleaned = _TRAILING_COMMA_RE.sub(r"\1", _strip_comments(fragment))
    # Raw newlines inside strings are common in model output.
    cleaned = re.sub(_STR, lambda m: m.group(0).replace("\n", "\\n"), cleaned)
    try:
        return json.loads(cleaned)
    except json.JSONDecodeError:
        repaired = _PAIR_LIST_RE.sub(r"[{\1}]", cleaned)
        if repaired == cleaned:
            raise
        return json.loads(_TRAILING_COMMA_RE.sub(r"\1", repaired))


def extract_json(raw: str) -> Any:
    """Decode the outermost JSON payload in ``raw``, skipping fences and surrounding prose."""
    text = _FENCE_RE.sub("", raw)
    last_error = ""
    for match in re.finditer(r"[\[{]", text):
        fragment = _balanced(text, match.start())
        if fragment is None:
            continue
        try:
            return _loads_lenient(fragment)
        except json.JSONDecodeError as exc:
            last_error = exc.msg
    raise StructureViolation(f"no decodable JSON payload{' (' + last_error + ')' if last_error else ''}",
                             fragment=raw.strip())


def _finding_like(obj: dict) -> bool:
    keys = {_key(k) for k in obj}
    return bool(keys & {"lesiondescription", "textsource", "lagestlesionsize", "largestlesionsize",
                        "lesiontype", "imagingprocedure", "location"})


def _parse_findings(payload: Any, raw: str) -> list[LesionFinding]:
    if isinstance(payload, dict):
        lists = [v for v in payload.values() if isinstance(v, list)]
        if _finding_like(payload):
            payload = [payload]
        elif len(lists) == 1:
            payload = lists[0]
        else:
            raise StructureViolation("expected an array of findings", fragment=raw)
    findings = []
    for item in payload:
        if not isinstance(item, dict):
            raise StructureViolation("finding entries must be objects", fragment=json.dumps(item))
        if not item:
            # The template's own "add additional finding" placeholder.
            continue
        findings.append(finding_from_record(item))
    return findings


def _parse_description(payload: Any, raw: str) -> dict[str, Any]:
    if isinstance(payload, list):
        objects = [p for p in payload if isinstance(p, dict) and p]
        if len(objects) != 1:
            raise StructureViolation("expected a single description object", fragment=raw)
        payload = objects[0]
    if not isinstance(payload, dict):
        raise StructureViolation("expected a description object", fragment=raw)
    wanted = {_key(name): name for name in STAGE2_FIELDS}
    wanted["location"] = "location_description"
    values: dict[str, Any] = {name: None for name in STAGE2_FIELDS}
    for key, value in payload.items():
        name = wanted.get(_key(str(key)))
        if name is not None:
            values[name] = _coerce(name, value)
    return values


_POLARITY_KEYS = {
    "lungrelatedrules": "lung_related",
    "lungrelevantrules": "lung_related",
    "lungrelated": "lung_related",
    "lunglesionrules": "lung_related",
    "lungirrelevantrules": "lung_irrelevant",
    "lungirrelevant": "lung_irrelevant",
    "nonelunglesionrules": "lung_irrelevant",
}


def _parse_rule_item(item: Any, polarity: str | None) -> dict[str, Any]:
    if not isinstance(item, dict):
        raise StructureViolation("rule entries must be objects", fragment=json.dumps(item))
    pattern = item.get("pattern")
    text = item.get("rule", item.get("rule_text"))
    if not isinstance(pattern, str) or not isinstance(text, str) or not pattern.strip() or not text.strip():
        raise StructureViolation("rule needs non-empty 'pattern' and 'rule'", fragment=json.dumps(item))
    explicit = item.get("polarity") or item.get("category")
    if isinstance(explicit, str):
        polarity = _POLARITY_KEYS.get(_key(explicit), _POLARITY_KEYS.get(_key(explicit) + "rules", polarity))
    return {"pattern": pattern.strip(), "rule": text.strip(), "polarity": polarity}


def _parse_rules(payload: Any, raw: str) -> list[dict[str, Any]]:
    if isinstance(payload, dict):
        if "pattern" in payload:
            return [_parse_rule_item(payload, None)]
        rules = []
        for key, value in payload.items():
            polarity = _POLARITY_KEYS.get(_key(str(key)))
            if polarity is None or not isinstance(value, list):
                continue
            rules.extend(_parse_rule_item(item, polarity) for item in value)
        if not rules and not any(isinstance(v, list) for v in payload.values()):
            raise StructureViolation("expected an array of rules", fragment=raw)
        return rules
    return [_parse_rule_item(item, None) for item in payload]


_REFERENCE_KEYS = {
    "lunglesionfindings": "lung_related",
    "nonelunglesionfindings": "lung_irrelevant",
    "nonlunglesionfindings": "lung_irrelevant",
    "notlunglesionfindings": "lung_irrelevant",
}
_TEXT_KEYS = ("referred text", "referredtext", "source text", "source_text", "text", "finding")
_REASON_KEYS = ("reason", "explanation")


def _reference_entries(value: Any) -> list[tuple[str, str]]:
    if isinstance(value, dict):
        value = [value] if any(k in value for k in _TEXT_KEYS) else [{k: v} for k, v in value.items()]
    entries = []
    for item in value or []:
        if isinstance(item, str):
            entries.append((item, ""))
            continue
        if not isinstance(item, dict):
            raise StructureViolation("reference entries must be objects", fragment=json.dumps(item))
        text = next((item[k] for k in _TEXT_KEYS if k in item), None)
        if text is not None:
            reason = next((item[k] for k in _REASON_KEYS if k in item), "")
            entries.append((str(text), str(reason)))
        else:
            # {"<referred text>": "<reason>"}
            entries.extend((str(k), str(v)) for k, v in item.items())
    return [(t.strip(), r.strip()) for t, r in entries if t.strip()]


def _parse_references(payload: Any, raw: str) -> list[dict[str, str]]:
    if not isinstance(payload, dict):
        raise StructureViolation("expected an object with lung and non-lung findings", fragment=raw)
    refs = []
    matched = False
    for key, value in payload.items():
        polarity = _REFERENCE_KEYS.get(_key(str(key)))
        if polarity is None:
            continue
        matched = True
        for text, reason in _reference_entries(value):
            refs.append({"source_text": text, "explanation": reason, "polarity": polarity})
    if not matched:
        raise StructureViolation("no lung lesion / none lung lesion sections", fragment=raw)
    return refs


def parse_structured(raw: str, shape: str) -> Any:
    """Decode model output into the expected shape.

    ``findings`` gives a list of :class:`LesionFinding`; ``description`` a dict
    of the description fields; ``rules`` a list of ``{pattern, rule,
    polarity}``; ``references`` a list of ``{source_text, explanation,
    polarity}``.
    """
    if shape not in SHAPES:
        raise ValueError(f"unknown shape {shape!r}")
    payload = extract_json(raw)
    if shape == FINDINGS:
        return _parse_findings(payload, raw)
    if shape == DESCRIPTION:
        return _parse_description(payload, raw)
    if shape == RULES:
        return _parse_rules(payload, raw)
    return _parse_references(payload, raw)
