"""Lesion finding data model, controlled vocabularies and value normalization.

Every other module speaks in terms of :class:`ClinicalReport` and
:class:`LesionFinding`.  Findings cross the process boundary (prompts, model
output, files) as flat JSON objects keyed by the human-readable field names
used in the extraction templates, with ``"None"`` standing in for an absent
value.
"""

from __future__ import annotations

import dataclasses
import datetime as _dt
import logging
import math
import re
from dataclasses import dataclass
from typing import Any, Iterable, Optional

from .errors import DataError, UnparsableSize

logger = logging.getLogger(__name__)

__all__ = [
    "ClinicalReport",
    "LesionFinding",
    "ControlledVocabulary",
    "Violation",
    "VOCABULARIES",
    "SOLIDITY_CANONICAL",
    "EVALUATED_FIELDS",
    "NUMERIC_TOLERANCE",
    "normalize_size",
    "canonicalize_value",
    "validate_finding",
    "finding_to_record",
    "finding_from_record",
    "stage2_record",
    "report_to_record",
    "report_from_record",
]

NONE_LITERAL = "None"
NUMERIC_TOLERANCE = 0.1
REPORT_KINDS = ("clinical", "imaging")
LESION_TYPES = ("nodule", "mass", "cyst")


@dataclass(frozen=True)
class ClinicalReport:
    report_id: str
    text: str
    kind: str = "imaging"
    subject_id: str = ""
    report_date: Optional[str] = None

    def __post_init__(self) -> None:
        if not self.report_id:
            raise DataError("report_id must be non-empty")
        if not self.text or not self.text.strip():
            raise DataError(f"report {self.report_id!r} has empty text")
        if self.kind not in REPORT_KINDS:
            raise DataError(f"report {self.report_id!r}: kind must be one of {REPORT_KINDS}, got {self.kind!r}")


@dataclass(frozen=True)
class ControlledVocabulary:
    field_name: str
    preferred_terms: tuple[str, ...]
    fixed: bool = False


VOCABULARIES: dict[str, ControlledVocabulary] = {
    "margin": ControlledVocabulary(
        "margin", ("spiculated", "rounded", "ill-defined", "irregular", "lobulated")
    ),
    "solidity": ControlledVocabulary(
        "solidity",
        ("solid", "partly solid", "groundglass", "ground-glass", "groundglass and consolidative"),
        fixed=True,
    ),
    "calcification": ControlledVocabulary("calcification", ("noncalcified",)),
    "cavitation": ControlledVocabulary("cavitation", ("mildly cavitary", "cavitary")),
}

# Spelling variants folded onto one canonical form.  Longer phrases first so
# "groundglass and consolidative" is not split by the shorter "groundglass".
_VARIANTS: dict[str, tuple[str, ...]] = {
    "groundglass and consolidative": ("ground glass and consolidative", "ground-glass and consolidative"),
    "groundglass": ("ground glass", "ground-glass"),
    "partly solid": ("partly-solid", "part-solid", "part solid"),
    "ill-defined": ("ill defined", "illdefined"),
    "noncalcified": ("non-calcified", "non calcified"),
    "mildly cavitary": ("mildly-cavitary",),
}
_VARIANT_PATTERNS = [
    (re.compile(r"\b" + r"[\s\-]*".join(re.escape(p) for p in re.split(r"[\s\-]+", variant)) + r"\b"), canonical)
    for canonical, variants in _VARIANTS.items()
    for variant in variants
]

SOLIDITY_CANONICAL = frozenset({"solid", "partly solid", "groundglass", "groundglass and consolidative"})

# The nine fields scored per finding.
EVALUATED_FIELDS = (
    "imaging_procedure",
    "lesion_size_mm",
    "suv",
    "lesion_type",
    "lobe",
    "margin",
    "solidity",
    "calcification",
    "cavitation",
)

DATE_FIELDS = frozenset({"procedure_date", "report_date", "date_report_signed"})
STAGE1_FIELDS = (
    "imaging_procedure",
    "procedure_date",
    "lung_rads",
    "number_of_lesions",
    "lesion_size_mm",
    "lesion_type",
    "suv",
    "lobe",
    "lesion_description",
    "text_source",
)
STAGE2_FIELDS = ("location_description", "margin", "solidity", "calcification", "cavitation")


@dataclass(frozen=True)
class LesionFinding:
    imaging_procedure: Optional[str] = None
    procedure_date: Optional[str] = None
    lung_rads: Optional[str] = None
    number_of_lesions: Optional[str] = None
    lesion_size_mm: Optional[tuple[float, ...]] = None
    suv: Optional[float] = None
    lesion_type: Optional[str] = None
    lobe: Optional[str] = None
    lesion_description: Optional[str] = None
    text_source: Optional[str] = None
    location_description: Optional[str] = None
    margin: Optional[str] = None
    solidity: Optional[str] = None
    calcification: Optional[str] = None
    cavitation: Optional[str] = None
    # Annotation-side only; never requested from the model.
    evaluator_signed_on: Optional[str] = None
    date_report_signed: Optional[str] = None
    lesion_seqno: Optional[int] = None

    @property
    def largest_size_mm(self) -> Optional[float]:
        if not self.lesion_size_mm:
            return None
        return max(self.lesion_size_mm)

    def with_description_fields(self, **values: Optional[str]) -> "LesionFinding":
        unknown = set(values) - set(STAGE2_FIELDS)
        if unknown:
            raise ValueError(f"not description fields: {sorted(unknown)}")
        return dataclasses.replace(self, **values)


@dataclass(frozen=True)
class Violation:
    field: str
    message: str

    def __str__(self) -> str:
        return f"{self.field}: {self.message}"


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------

_NUM = r"(\d+(?:\.\d+)?|\.\d+)"
_UNIT = r"(mm|cm|millimet(?:er|re)s?|centimet(?:er|re)s?)\b"
_SEP = r"\s*(?:x|×|\*|by)\s*"
_DIM = _NUM + r"\s*(?:" + _UNIT + r")?"
_GROUP_RE = re.compile(_DIM + r"(?:" + _SEP + _DIM + r"){0,3}", re.IGNORECASE)
_DIM_RE = re.compile(_DIM, re.IGNORECASE)


def _unit_factor(unit: str) -> float:
    return 10.0 if unit.lower().startswith("c") else 1.0


def normalize_size(raw: str) -> list[float]:
    """Parse a size expression into millimetre values, at most three.

    A unit written after the last dimension applies to every dimension before
    it, so ``"1.8 x 1.2 cm"`` gives ``[18.0, 12.0]``.  The first dimension
    group carrying a unit wins.
    """
    text = str(raw)
    for group in _GROUP_RE.finditer(text):
        dims = [(m.group(1), m.group(2)) for m in _DIM_RE.finditer(group.group(0))]
        if not any(unit for _, unit in dims):
            continue
        values: list[float] = []
        pending: list[str] = []
        for number, unit in dims:
            pending.append(number)
            if unit:
                factor = _unit_factor(unit)
                values.extend(round(float(n) * factor, 6) for n in pending)
                pending = []
        # Trailing numbers without a following unit inherit the last unit seen.
        if pending:
            factor = _unit_factor([u for _, u in dims if u][-1])
            values.extend(round(float(n) * factor, 6) for n in pending)
        return values[:3]
    raise UnparsableSize(f"no size with a millimetre or centimetre unit in {text!r}")


def format_size(values: Iterable[float]) -> str:
    return " x ".join(_format_number(v) for v in values) + " mm"


def _format_number(value: float) -> str:
    value = float(value)
    if value.is_integer():
        return f"{value:.1f}"
    return repr(value)


_DATE_FORMATS = (
    "%Y-%m-%d",
    "%Y/%m/%d",
    "%m/%d/%Y",
    "%m-%d-%Y",
    "%B %d, %Y",
    "%B %d %Y",
    "%b %d, %Y",
    "%b %d %Y",
    "%b. %d, %Y",
    "%d %B %Y",
    "%d %b %Y",
)


def _parse_date(text: str) -> Optional[_dt.date]:
    cleaned = re.sub(r"(\d)(st|nd|rd|th)\b", r"\1", text.strip())
    for fmt in _DATE_FORMATS:
        try:
            return _dt.datetime.strptime(cleaned, fmt).date()
        except ValueError:
            continue
    return None


_WORD_NUMBERS = {
    "one": "1", "two": "2", "three": "3", "four": "4", "five": "5",
    "six": "6", "seven": "7", "eight": "8", "nine": "9", "ten": "10",
}


def canonicalize_value(field_name: str, raw: Any) -> str:
    """Comparison form of a field value: lower case, single spaces, unified spellings.

    Dates become ISO 8601.  Unrecognized values pass through after the case
    and whitespace folding.
    """
    text = " ".join(str(raw).split())
    if field_name in DATE_FIELDS:
        parsed = _parse_date(text)
        if parsed is not None:
            return parsed.isoformat()
    text = text.lower()
    for pattern, canonical in _VARIANT_PATTERNS:
        text = pattern.sub(canonical, text)
    if field_name == "lesion_type":
        stem = re.sub(r"^(pulmonary|lung)\s+", "", text)
        for kind in LESION_TYPES:
            if stem in (kind, kind + "s", kind + "es"):
                return kind
    elif field_name == "number_of_lesions":
        return _WORD_NUMBERS.get(text, text)
    return text


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

def validate_finding(finding: LesionFinding) -> list[Violation]:
    violations: list[Violation] = []
    if finding.solidity is not None:
        if canonicalize_value("solidity", finding.solidity) not in SOLIDITY_CANONICAL:
            violations.append(Violation("solidity", f"{finding.solidity!r} is outside the fixed vocabulary"))
    if finding.suv is not None and not (math.isfinite(finding.suv) and finding.suv >= 0):
        violations.append(Violation("suv", f"must be a non-negative number, got {finding.suv!r}"))
    sizes = finding.lesion_size_mm
    if sizes is not None:
        if not 1 <= len(sizes) <= 3:
            violations.append(Violation("lesion_size_mm", f"expected 1 to 3 dimensions, got {len(sizes)}"))
        if any(not (math.isfinite(v) and v >= 0) for v in sizes):
            violations.append(Violation("lesion_size_mm", "sizes must be non-negative millimetre values"))
    if finding.number_of_lesions is not None:
        count = canonicalize_value("number_of_lesions", finding.number_of_lesions)
        if count not in ("solitary", "multiple") and not count.isdigit():
            violations.append(Violation("number_of_lesions", f"expected solitary, multiple or a count, got {count!r}"))
    for name in ("procedure_date", "date_report_signed"):
        value = getattr(finding, name)
        if value is not None and _parse_date(value) is None:
            violations.append(Violation(name, f"not a calendar date: {value!r}"))
    if finding.lesion_seqno is not None and finding.lesion_seqno < 0:
        violations.append(Violation("lesion_seqno", "must be non-negative"))
    return violations


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

# Field name -> external key.  Stage-1 keys follow the detection template
# (including its "Lagest" spelling), stage-2 keys the description template.
RECORD_KEYS: dict[str, str] = {
    "imaging_procedure": "Imaging Procedure",
    "procedure_date": "Procedure Date",
    "lung_rads": "Lung RADS",
    "number_of_lesions": "Number of Lesion",
    "lesion_size_mm": "Lagest Lesion Size",
    "lesion_type": "Lesion Type",
    "suv": "SUV",
    "lobe": "Location",
    "lesion_description": "Lesion Description",
    "text_source": "Text Source",
    "location_description": "location description",
    "margin": "margin",
    "solidity": "solidity",
    "calcification": "calcification",
    "cavitation": "cavitation",
}
ANNOTATION_KEYS: dict[str, str] = {
    "evaluator_signed_on": "Evaluator Signed On",
    "date_report_signed": "Date of Report Signed",
    "lesion_seqno": "Lesion SeqNo",
}


def _key(text: str) -> str:
    return re.sub(r"[^a-z0-9]", "", text.lower())


_ALIASES: dict[str, str] = {_key(v): k for k, v in {**RECORD_KEYS, **ANNOTATION_KEYS}.items()}
_ALIASES.update(
    {
        "largestlesionsize": "lesion_size_mm",
        "lesionsize": "lesion_size_mm",
        "lesionsizemm": "lesion_size_mm",
        "numberoflesions": "number_of_lesions",
        "lungrads": "lung_rads",
        "lungradsscore": "lung_rads",
        "lobe": "lobe",
        "dateofimagingprocedureperformed": "procedure_date",
        "soliditymorphology": "solidity",
        "locationdescription": "location_description",
    }
)
_ALIASES.update({name: name for name in RECORD_KEYS})


def _render(name: str, value: Any) -> Any:
    if value is None:
        return NONE_LITERAL
    if name == "lesion_size_mm":
        return format_size(value)
    if name == "suv":
        return _format_number(value)
    return value


def finding_to_record(finding: LesionFinding, fields: Iterable[str] | None = None) -> dict[str, Any]:
    names = tuple(fields) if fields is not None else tuple(RECORD_KEYS)
    record = {RECORD_KEYS[name]: _render(name, getattr(finding, name)) for name in names}
    if fields is None:
        for name, key in ANNOTATION_KEYS.items():
            value = getattr(finding, name)
            if value is not None:
                record[key] = value
    return record


def stage2_record(finding: LesionFinding) -> dict[str, Any]:
    return finding_to_record(finding, STAGE2_FIELDS)


def _is_absent(value: Any) -> bool:
    if value is None:
        return True
    if isinstance(value, str):
        stripped = value.strip().strip("'\"").strip()
        return stripped == "" or stripped.lower() in ("none", "null", "n/a", "na", "not mentioned")
    if isinstance(value, (list, tuple)):
        return len(value) == 0
    return False


def _parse_sizes(value: Any) -> Optional[tuple[float, ...]]:
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return (float(value),)
    if isinstance(value, (list, tuple)):
        return tuple(float(v) for v in value[:3])
    text = str(value)
    try:
        return tuple(normalize_size(text))
    except UnparsableSize:
        numbers = re.findall(_NUM, text)
        if numbers and re.fullmatch(r"[\d.\sx×*]+", text.strip()):
            # A bare number: the schema's default unit is millimetres.
            return tuple(float(n) for n in numbers[:3])
        logger.warning("dropping unparsable lesion size %r", text)
        return None


def _parse_number(value: Any) -> Optional[float]:
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    match = re.search(_NUM, str(value))
    if match is None:
        logger.warning("dropping non-numeric SUV %r", value)
        return None
    return float(match.group(1))


def _coerce(name: str, value: Any) -> Any:
    if _is_absent(value):
        return None
    if name == "lesion_size_mm":
        return _parse_sizes(value)
    if name == "suv":
        return _parse_number(value)
    if name == "lesion_seqno":
        return int(value)
    if isinstance(value, (list, tuple)):
        value = ", ".join(str(v) for v in value)
    if name in ("lesion_description", "text_source", "location_description"):
        return str(value).strip()
    text = " ".join(str(value).split())
    if name in DATE_FIELDS:
        return canonicalize_value(name, text)
    if name == "lesion_type":
        canonical = canonicalize_value(name, text)
        return canonical if canonical in LESION_TYPES else text
    if name == "number_of_lesions":
        return canonicalize_value(name, text)
    if name in VOCABULARIES:
        return canonicalize_value(name, text)
    return text


def finding_from_record(record: dict[str, Any]) -> LesionFinding:
    """Build a finding from a record; keys are matched loosely, ``"None"`` means absent."""
    values: dict[str, Any] = {}
    for key, value in record.items():
        name = _ALIASES.get(_key(str(key)))
        if name is None:
            continue
        values[name] = _coerce(name, value)
    return LesionFinding(**values)


def report_to_record(report: ClinicalReport) -> dict[str, Any]:
    record: dict[str, Any] = {
        "report_id": report.report_id,
        "subject_id": report.subject_id,
        "kind": report.kind,
        "text": report.text,
    }
    if report.report_date is not None:
        record["report_date"] = report.report_date
    return record


def report_from_record(record: dict[str, Any]) -> ClinicalReport:
    try:
        return ClinicalReport(
            report_id=str(record["report_id"]),
            text=str(record["text"]),
            kind=str(record.get("kind", "imaging")),
            subject_id=str(record.get("subject_id", "")),
            report_date=record.get("report_date"),
        )
    except KeyError as exc:
        raise DataError(f"report record lacks {exc.args[0]!r}") from exc
