import json

import httpx
import pytest

from ewscore.errors import AuthError, PromptTooLong, ServiceUnavailable, TransportError
from ewscore.llmannotate import (
    CORRECTIVE_REMINDER,
    FORMAT_INSTRUCTION,
    TRANSCRIPT_CLOSE,
    TRANSCRIPT_OPEN,
    HeuristicClient,
    LlmResponse,
    OpenAIChatClient,
    RateLimiter,
    ResponseCache,
    RubricPack,
    ScriptedClient,
    annotate,
    annotate_segments,
    build_prompt,
    estimate_tokens,
    parse_response,
)

from conftest import make_segment

SEG = make_segment([(0.0, "L", "Sehr gut gemacht!"), (5.0, "S1", "Danke.")])


def test_prompt_contains_rubric_and_markers():
    rubric = RubricPack.default()
    prompt = build_prompt(rubric, SEG)
    assert rubric.definition in prompt
    assert rubric.rubric in prompt
    assert all(e.strip() in prompt for e in rubric.examples)
    body = prompt.split(TRANSCRIPT_OPEN)[1].split(TRANSCRIPT_CLOSE)[0]
    assert body.strip() == "L: Sehr gut gemacht!\nS1: Danke."
    assert prompt.rstrip().endswith(FORMAT_INSTRUCTION.splitlines()[-1])


def test_prompt_too_long():
    long_seg = make_segment([(float(i), "L", "Wort " * 50) for i in range(50)])
    with pytest.raises(PromptTooLong):
        build_prompt(RubricPack.default(), long_seg, token_budget=500)
    assert estimate_tokens("abcd" * 10) == 10


def test_rubric_pack_needs_parts():
    with pytest.raises(ValueError):
        RubricPack("def", ("",), "rubric")


@pytest.mark.parametrize("raw,score", [
    ("SCORE: 3\nREASONING: warm tone", 3),
    ("**Score:** 4", 4),
    ('{"score": 2, "reasoning": "ok"}', 2),
    ("Bewertung: drei", 3),
    ("I would give it 2/4.", 2),
    ("SCORE: 7", None),
    ("SCORE: 2.5", None),
    ("no number here", None),
])
def test_parse_examples(raw, score):
    assert parse_response(raw)[0] == score


def test_parse_reasoning():
    assert parse_response("SCORE: 3\nREASONING: praise in every turn") == (3, "praise in every turn")
    assert parse_response("just prose") == (None, "just prose")


def test_malformed_fixture_recovery(malformed_cases):
    assert len(malformed_cases) == 40
    hits = sum(parse_response(c["raw"])[0] == c["score"] for c in malformed_cases)
    assert hits / len(malformed_cases) >= 0.95


def test_annotate_retries_with_backoff():
    sleeps = []
    client = ScriptedClient([TransportError("503"), TransportError("429"), "SCORE: 2\nREASONING: x"])
    resp = annotate("p", client, "m", sleep=sleeps.append, backoff=0.5)
    assert resp.score == 2
    assert sleeps == [0.5, 1.0]
    assert resp.metadata["retries"] == 2


def test_annotate_gives_up():
    client = ScriptedClient([TransportError("x")] * 5)
    with pytest.raises(ServiceUnavailable):
        annotate("p", client, "m", max_retries=3, sleep=lambda s: None)
    assert len(client.calls) == 4


def test_annotate_corrective_reprompt():
    client = ScriptedClient(["sounds nice", "SCORE: 4\nREASONING: y"])
    resp = annotate("p", client, "m", sleep=lambda s: None)
    assert resp.score == 4 and resp.metadata["reprompted"]
    assert client.calls[1]["prompt"] == "p" + CORRECTIVE_REMINDER

    client = ScriptedClient(["nothing", "still nothing"])
    resp = annotate("p", client, "m", sleep=lambda s: None)
    assert resp.score is None and resp.metadata["failure"] == "parse"


def test_cache_roundtrip_and_reuse(tmp_path):
    cache = ResponseCache(tmp_path)
    client = ScriptedClient(["SCORE: 3\nREASONING: z"])
    rubric = RubricPack.default()
    first = annotate_segments([SEG], rubric, client, "gpt-4-test", cache=cache)
    second = annotate_segments([SEG], rubric, client, "gpt-4-test", cache=cache)
    assert len(client.calls) == 1
    assert first[SEG.id].to_dict() == second[SEG.id].to_dict()
    resp = LlmResponse("r", 1, "why", "m", {"a": 1})
    cache.put("m/x", "prompt", resp)
    assert cache.get("m/x", "prompt") == resp
    assert cache.get("m/x", "other") is None


def test_annotate_segments_isolates_failures():
    long_seg = make_segment([(float(i), "L", "Wort " * 50) for i in range(50)], index=1)
    out = annotate_segments([SEG, long_seg], RubricPack.default(), ScriptedClient(["SCORE: 1"]), "m",
                            token_budget=1000)
    assert out[SEG.id].score == 1
    assert isinstance(out[long_seg.id], PromptTooLong)


def test_rate_limiter_spacing():
    now = [0.0]
    slept = []

    def sleep(s):
        slept.append(s)
        now[0] += s

    limiter = RateLimiter(30, clock=lambda: now[0], sleep=sleep)
    for _ in range(3):
        limiter.wait()
    assert slept == [2.0, 2.0]
    RateLimiter(None, clock=lambda: 0.0, sleep=sleep).wait()
    assert len(slept) == 2


def _mock_client(handler):
    return OpenAIChatClient(api_key="k", base_url="http://test/v1", transport=httpx.MockTransport(handler))


def test_openai_client_success():
    seen = {}

    def handler(request):
        seen["auth"] = request.headers["authorization"]
        seen["body"] = json.loads(request.content)
        return httpx.Response(200, json={"choices": [{"message": {"content": "SCORE: 3"}}]})

    assert _mock_client(handler).send("hi", "gpt-4-1106-vision-preview") == "SCORE: 3"
    assert seen["auth"] == "Bearer k"
    assert seen["body"]["temperature"] == 0.0
    assert seen["body"]["messages"] == [{"role": "user", "content": "hi"}]


@pytest.mark.parametrize("status,exc", [(401, AuthError), (429, TransportError), (503, TransportError),
                                        (400, ServiceUnavailable)])
def test_openai_client_errors(status, exc):
    client = _mock_client(lambda request: httpx.Response(status, text="nope"))
    with pytest.raises(exc):
        client.send("hi", "m")


def test_openai_client_needs_key(monkeypatch):
    monkeypatch.delenv("OPENAI_API_KEY", raising=False)
    with pytest.raises(AuthError):
        OpenAIChatClient()


def test_heuristic_client_is_deterministic_and_tracks_praise():
    client = HeuristicClient(malformed_rate=0.0)
    rubric = RubricPack.default()
    warm = make_segment([(float(i), "L", "Super, sehr gut gemacht!") for i in range(20)])
    cold = make_segment([(float(i), "L", "Setzt euch hin.") for i in range(20)], index=1)
    p_warm, p_cold = build_prompt(rubric, warm), build_prompt(rubric, cold)
    assert client.send(p_warm, "gpt-4") == client.send(p_warm, "gpt-4")
    assert parse_response(client.send(p_warm, "gpt-4"))[0] > parse_response(client.send(p_cold, "gpt-4"))[0]
