import pytest
from hypothesis import given, strategies as st

from lesionkb.errors import DataError, UnparsableSize
from lesionkb.schema import (
    RECORD_KEYS,
    ClinicalReport,
    LesionFinding,
    canonicalize_value,
    finding_from_record,
    finding_to_record,
    normalize_size,
    validate_finding,
)


@pytest.mark.parametrize("raw, expected", [
    ("1.3 cm", [13.0]),
    ("5 mm", [5.0]),
    ("measures 1.8 x 1.2 cm", [18.0, 12.0]),
    ("5mm", [5.0]),
    ("2.4 x 1.8 x 1.1 cm", [24.0, 18.0, 11.0]),
    ("12 mm x 9 mm", [12.0, 9.0]),
])
def test_normalize_size(raw, expected):
    assert normalize_size(raw) == expected


@pytest.mark.parametrize("raw", ["large", "", "measuring 13"])
def test_normalize_size_rejects_unitless(raw):
    with pytest.raises(UnparsableSize):
        normalize_size(raw)


@given(st.decimals(min_value="0.1", max_value="99.9", places=1))
def test_cm_to_mm_is_times_ten(value):
    assert normalize_size(f"{value} cm") == [float(value * 10)]


@pytest.mark.parametrize("field, raw, expected", [
    ("solidity", "Ground-Glass", "groundglass"),
    ("margin", "  Spiculated ", "spiculated"),
    ("procedure_date", "March 5, 2021", "2021-03-05"),
    ("solidity", "part-solid", "partly solid"),
    ("lesion_type", "Pulmonary nodules", "nodule"),
    ("number_of_lesions", "two", "2"),
    ("lobe", "Right  Upper Lobe", "right upper lobe"),
])
def test_canonicalize_value(field, raw, expected):
    assert canonicalize_value(field, raw) == expected


def test_canonicalize_unknown_passes_through():
    assert canonicalize_value("margin", "Wavy") == "wavy"


def test_validate_finding():
    assert validate_finding(LesionFinding(solidity="solid")) == []
    [v] = validate_finding(LesionFinding(solidity="fuzzy"))
    assert v.field == "solidity"
    [v] = validate_finding(LesionFinding(suv=-1.0))
    assert v.field == "suv"
    assert validate_finding(LesionFinding(lesion_size_mm=(1.0, 2.0, 3.0, 4.0)))


def test_record_uses_template_keys():
    record = finding_to_record(LesionFinding(lesion_size_mm=(13.0,), lobe="right upper lobe"))
    # The stage-1 template spells this key without the second "r".
    assert record["Lagest Lesion Size"] == "13.0 mm"
    assert record["Location"] == "right upper lobe"
    assert record["SUV"] == "None"
    assert list(record) == list(RECORD_KEYS.values())


def test_record_none_string_means_absent():
    f = finding_from_record({"solidity": "None", "margin": "'None'", "SUV": "null", "Lagest Lesion Size": "1.3 cm"})
    assert f.solidity is None and f.margin is None and f.suv is None
    assert f.lesion_size_mm == (13.0,)


def test_largest_size():
    assert LesionFinding(lesion_size_mm=(18.0, 24.0)).largest_size_mm == 24.0
    assert LesionFinding().largest_size_mm is None


def test_description_fields_only():
    f = LesionFinding(lobe="left lower lobe").with_description_fields(margin="smooth")
    assert f.margin == "smooth" and f.lobe == "left lower lobe"
    with pytest.raises(ValueError):
        LesionFinding().with_description_fields(lobe="x")


def test_report_validation():
    with pytest.raises(DataError):
        ClinicalReport(report_id="", text="x")
    with pytest.raises(DataError):
        ClinicalReport(report_id="a", text="x", kind="email")


_words = st.text(alphabet="abcdefghijklmnop ", min_size=1, max_size=20).map(lambda s: " ".join(s.split()))
_text = _words.filter(lambda s: s and s.lower() not in ("none", "null", "na", "n/a"))


@st.composite
def findings(draw):
    sizes = draw(st.one_of(st.none(), st.lists(st.integers(1, 999), min_size=1, max_size=3)))
    return LesionFinding(
        imaging_procedure=draw(st.one_of(st.none(), st.sampled_from(["ct chest", "pet/ct"]))),
        procedure_date=draw(st.one_of(st.none(), st.dates().map(lambda d: d.isoformat()))),
        number_of_lesions=draw(st.one_of(st.none(), st.sampled_from(["solitary", "multiple", "3"]))),
        lesion_size_mm=None if sizes is None else tuple(v / 10 for v in sizes),
        suv=draw(st.one_of(st.none(), st.integers(0, 300).map(lambda v: v / 100))),
        lesion_type=draw(st.one_of(st.none(), st.sampled_from(["nodule", "mass", "cyst"]))),
        lobe=draw(st.one_of(st.none(), st.sampled_from(["right upper lobe", "left lower lobe"]))),
        lesion_description=draw(st.one_of(st.none(), _text)),
        text_source=draw(st.one_of(st.none(), _text)),
        margin=draw(st.one_of(st.none(), st.sampled_from(["spiculated", "smooth", "lobulated"]))),
        solidity=draw(st.one_of(st.none(), st.sampled_from(["solid", "partly solid", "groundglass"]))),
        calcification=draw(st.one_of(st.none(), st.sampled_from(["noncalcified", "calcified"]))),
        cavitation=draw(st.one_of(st.none(), st.just("cavitary"))),
    )


@given(findings())
def test_record_round_trip(finding):
    assert finding_from_record(finding_to_record(finding)) == finding
