import pytest

from conftest import ScriptProvider
from lesionkb.errors import FixtureMiss, FormatViolation, ProviderUnavailable, TransportError
from lesionkb.gateway import Gateway, GenerationRequest, MockProvider, RecordingProvider
from lesionkb.parsing import HELPFULNESS_SCALE, TRUTHFULNESS_SCALE
from lesionkb.prompts import GRADER


def grader_request(**slots):
    return GenerationRequest(GRADER, {"rule": "r", "external_knowledge": "k", **slots})


def test_mock_hit_and_miss():
    req = grader_request()
    provider = MockProvider({(GRADER, req.slot_digest): "3"})
    gw = Gateway(provider)
    assert gw.generate(req) == "3"
    assert gw.metrics.transport_retries == 0
    with pytest.raises(FixtureMiss):
        gw.generate(grader_request(external_knowledge="other"))


def test_mock_rejects_malformed_request():
    provider = MockProvider({})
    with pytest.raises(KeyError):
        provider.generate(GenerationRequest(GRADER, {"rule": "r"}))


def flaky(failures):
    state = {"n": 0}

    def answer(request):
        state["n"] += 1
        if state["n"] <= failures:
            raise TransportError("connection reset")
        return "ok"
    return answer


def test_transport_retries_then_success():
    delays = []
    gw = Gateway(ScriptProvider(flaky(2)), transport_retries=3, backoff=0.5, sleep=delays.append)
    assert gw.generate(grader_request()) == "ok"
    assert gw.metrics.transport_retries == 2
    assert delays == [0.5, 1.0]


def test_persistent_transport_failure():
    gw = Gateway(ScriptProvider(flaky(100)), transport_retries=3, sleep=lambda s: None)
    with pytest.raises(ProviderUnavailable):
        gw.generate(grader_request())
    assert gw.metrics.transport_retries == 3


def test_score_retries_once_then_fails_low():
    answers = iter(["no idea", "still no idea"])
    gw = Gateway(ScriptProvider(lambda r: next(answers)))
    assert gw.score(grader_request(), TRUTHFULNESS_SCALE) == 1
    assert gw.metrics.score_parse_failures == 2

    answers2 = iter(["hmm", "4"])
    gw = Gateway(ScriptProvider(lambda r: next(answers2)))
    assert gw.score(grader_request(), HELPFULNESS_SCALE) == 4


def test_request_validation():
    with pytest.raises(ValueError):
        GenerationRequest(GRADER, {}, temperature=-0.1)
    with pytest.raises(ValueError):
        GenerationRequest(GRADER, {}, top_p=0)


def test_recording_round_trip(tmp_path):
    rec = RecordingProvider(ScriptProvider(lambda r: "answer " + r.slots["rule"]))
    for rule in ("a", "b"):
        rec.generate(grader_request(rule=rule))
    path = tmp_path / "fx.jsonl"
    assert rec.save(path) == 2
    replay = MockProvider.from_file(path)
    assert replay.generate(grader_request(rule="b")) == "answer b"


def test_conflicting_fixture_lines(tmp_path):
    path = tmp_path / "fx.jsonl"
    path.write_text('{"template_id": "grader", "slot_digest": "d", "response_text": "1"}\n'
                    '{"template_id": "grader", "slot_digest": "d", "response_text": "2"}\n')
    with pytest.raises(FormatViolation) as info:
        MockProvider.from_file(path)
    assert info.value.line == 2
