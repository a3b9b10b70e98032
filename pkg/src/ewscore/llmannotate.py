"""Zero-shot EW scoring of transcript segments with a chat-completion model."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Optional, Protocol, Sequence

from .datamodel import Segment
from .errors import AuthError, PromptTooLong, ServiceUnavailable, TransportError

log = logging.getLogger(__name__)

MODELS = ("gpt-3.5-turbo-1106", "gpt-4-1106-vision-preview")
DEFAULT_MODEL = "gpt-4-1106-vision-preview"
API_KEY_ENV = "OPENAI_API_KEY"
API_BASE_ENV = "OPENAI_BASE_URL"
DEFAULT_TOKEN_BUDGET = 16000
CHARS_PER_TOKEN = 4

TRANSCRIPT_OPEN = "=== TRANSCRIPT ==="
TRANSCRIPT_CLOSE = "=== END OF TRANSCRIPT ==="
FORMAT_INSTRUCTION = (
    "Rate the transcript segment above on the Encouragement and Warmth scale from 1 to 4, "
    "using only the definition, examples and rubric given. Explain your decision with concrete "
    "evidence from the transcript.\n"
    "Answer in exactly this format:\n"
    "SCORE: <one integer from 1 to 4>\n"
    "REASONING: <your explanation>"
)
CORRECTIVE_REMINDER = (
    "\n\nIMPORTANT: your previous answer could not be read. Reply again. The first line must be "
    "'SCORE: ' followed by a single digit from 1 to 4, the second part must start with 'REASONING: '."
)


@dataclass(frozen=True)
class RubricPack:
    definition: str
    examples: tuple[str, ...]
    rubric: str
    version: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "examples", tuple(e for e in self.examples if e.strip()))
        if not self.definition.strip() or not self.examples or not self.rubric.strip():
            raise ValueError("rubric pack needs a definition, at least one example and a rubric")

    @classmethod
    def from_dir(cls, path) -> "RubricPack":
        path = Path(path)
        version_file = path / "VERSION.txt"
        return cls(
            definition=(path / "definition.txt").read_text(encoding="utf-8").strip(),
            examples=tuple((path / "examples.txt").read_text(encoding="utf-8").splitlines()),
            rubric=(path / "rubric.txt").read_text(encoding="utf-8").strip(),
            version=version_file.read_text(encoding="utf-8").strip() if version_file.exists() else str(path),
        )

    @classmethod
    def default(cls) -> "RubricPack":
        root = resources.files("ewscore.resources").joinpath("rubric")
        read = lambda name: root.joinpath(name).read_text(encoding="utf-8")  # noqa: E731
        return cls(read("definition.txt").strip(), tuple(read("examples.txt").splitlines()),
                   read("rubric.txt").strip(), read("VERSION.txt").strip())


def estimate_tokens(text: str) -> int:
    return math.ceil(len(text) / CHARS_PER_TOKEN)


def render_transcript(segment: Segment) -> str:
    return "\n".join(f"{u.speaker}: {u.text}" for u in segment.utterances)


def build_prompt(rubric: RubricPack, segment: Segment, token_budget: int = DEFAULT_TOKEN_BUDGET) -> str:
    examples = "\n".join(f"- {e.strip()}" for e in rubric.examples)
    prompt = (
        "You are an expert classroom observer trained on a video observation protocol.\n\n"
        f"## Definition\n{rubric.definition}\n\n"
        f"## Behavioural examples\n{examples}\n\n"
        f"## Coding rubric\n{rubric.rubric}\n\n"
        "The transcript below covers one 16-minute lesson segment. Speakers are anonymized: "
        "'L' is the teacher, 'S' followed by a number is a student.\n\n"
        f"{TRANSCRIPT_OPEN}\n{render_transcript(segment)}\n{TRANSCRIPT_CLOSE}\n\n"
        f"{FORMAT_INSTRUCTION}\n"
    )
    n = estimate_tokens(prompt)
    if n > token_budget:
        raise PromptTooLong(f"segment {segment.id}: ~{n} tokens exceeds budget {token_budget}")
    return prompt


_NUMBER_WORDS = {
    "one": 1, "two": 2, "three": 3, "four": 4,
    "eins": 1, "zwei": 2, "drei": 3, "vier": 4,
}
_VALUE = r"(\d+(?:[.,]\d+)?|" + "|".join(_NUMBER_WORDS) + r")"
_LABELLED = re.compile(
    r"\b(?:score|rating|bewertung|punktzahl|punkte|einstufung)\b"
    r"[\s*_\"'`]*(?:\((?:1\s*-\s*4)\))?[\s*_\"'`]*"
    r"(?:[:=\-–]|\bis\b|\bof\b|\bist\b|\blautet\b|\bwould be\b|\bwäre\b)?"
    r"[\s*_\"'`\[(]*" + _VALUE + r"(?![\d.,]*\d)",
    re.IGNORECASE,
)
_OUT_OF = re.compile(r"\b([1-4])\s*(?:/|out of|von|aus)\s*4\b", re.IGNORECASE)
_POINTS = re.compile(r"\b([1-4])\s*(?:points?|punkte?n?)\b", re.IGNORECASE)
_REASONING = re.compile(r"\b(?:reasoning|begründung)\b[\s*_\"'`]*[:=\-–][\s*_\"'`]*", re.IGNORECASE)


def _to_score(token: str) -> Optional[int]:
    token = token.lower()
    if token in _NUMBER_WORDS:
        return _NUMBER_WORDS[token]
    try:
        value = float(token.replace(",", "."))
    except ValueError:
        return None
    if value.is_integer() and 1 <= value <= 4:
        return int(value)
    return None


def parse_response(raw: str) -> tuple[Optional[int], str]:
    """Extract the score and reasoning from a model reply.

    The first labelled score (``SCORE: 3``, ``**Score** - 3``, ``"score": 3``,
    ``Bewertung: drei``...) decides; a labelled value outside 1..4 yields no
    score. Without a label, ``3/4``, ``3 out of 4`` or ``3 Punkte`` is accepted. Reasoning is
    the text after ``REASONING:``, or the whole reply.
    """
    text = raw or ""
    score = None
    m = _LABELLED.search(text)
    if m is not None:
        score = _to_score(m.group(1))
    else:
        m = _OUT_OF.search(text) or _POINTS.search(text)
        if m is not None:
            score = int(m.group(1))
    r = _REASONING.search(text)
    reasoning = text[r.end():].strip() if r else text.strip()
    return score, reasoning


@dataclass
class LlmResponse:
    raw: str
    score: Optional[int]
    reasoning: str
    model: str
    metadata: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(d["raw"], d.get("score"), d.get("reasoning", ""), d["model"], d.get("metadata", {}))


class ChatClient(Protocol):
    def send(self, prompt: str, model: str, temperature: float) -> str: ...


class OpenAIChatClient:
    """Minimal chat-completions client over HTTP (OpenAI-compatible endpoints)."""

    def __init__(self, api_key: Optional[str] = None, base_url: Optional[str] = None,
                 timeout: float = 120.0, transport=None):
        import httpx

        self.api_key = api_key or os.environ.get(API_KEY_ENV)
        if not self.api_key:
            raise AuthError(f"no API key; set {API_KEY_ENV}")
        self.base_url = (base_url or os.environ.get(API_BASE_ENV) or "https://api.openai.com/v1").rstrip("/")
        self._httpx = httpx
        self._client = httpx.Client(timeout=timeout, transport=transport)

    def send(self, prompt: str, model: str, temperature: float = 0.0) -> str:
        httpx = self._httpx
        try:
            resp = self._client.post(
                f"{self.base_url}/chat/completions",
                headers={"Authorization": f"Bearer {self.api_key}"},
                json={"model": model, "temperature": temperature,
                      "messages": [{"role": "user", "content": prompt}]},
            )
        except httpx.HTTPError as exc:
            raise TransportError(str(exc)) from exc
        if resp.status_code in (401, 403):
            raise AuthError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransportError(f"HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise ServiceUnavailable(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            return resp.json()["choices"][0]["message"]["content"] or ""
        except (ValueError, KeyError, IndexError) as exc:
            raise TransportError(f"malformed completion payload: {exc}") from exc


class ScriptedClient:
    """Replays a fixed sequence of replies; ``Exception`` entries are raised."""

    def __init__(self, replies: Sequence):
        self.replies = list(replies)
        self.calls = []

    def send(self, prompt: str, model: str, temperature: float = 0.0) -> str:
        self.calls.append({"prompt": prompt, "model": model, "temperature": temperature})
        if not self.replies:
            raise ServiceUnavailable("scripted client exhausted")
        reply = self.replies.pop(0)
        if isinstance(reply, BaseException):
            raise reply
        return reply


class HeuristicClient:
    """Offline stand-in for a chat model.

    Scores the transcript embedded in the prompt by its share of positive
    utterances under a polarity scorer, plus deterministic prompt-hashed
    noise whose size depends on the model id. A small, prompt-hashed share of
    replies is malformed unless the prompt carries the corrective reminder.
    """

    def __init__(self, scorer: Optional[Callable[[str], float]] = None, center: float = 0.4,
                 scale: float = 0.12, noise: Optional[dict] = None, malformed_rate: float = 0.05):
        from .textfeat import LexiconScorer

        self.scorer = scorer or LexiconScorer.default()
        self.center = center
        self.scale = scale
        self.noise = noise or {"gpt-3.5": 2.5, "gpt-4": 0.9}
        self.malformed_rate = malformed_rate

    def _noise(self, model: str) -> float:
        for key, amp in self.noise.items():
            if key in model:
                return amp
        return 1.0

    def send(self, prompt: str, model: str, temperature: float = 0.0) -> str:
        from .backends import hash_uniforms

        body = prompt.split(TRANSCRIPT_OPEN, 1)[-1].split(TRANSCRIPT_CLOSE, 1)[0]
        lines = [ln.split(":", 1)[1] for ln in body.strip().splitlines() if ":" in ln]
        pols = [self.scorer(t) for t in lines]
        n_pos = sum(p > 0 for p in pols)
        frac = n_pos / len(lines) if lines else 0.0
        u = hash_uniforms("llm", model, body)
        raw = 2.5 + (frac - self.center) / self.scale + self._noise(model) * (u[0] + u[1] - 1.0)
        score = int(min(4, max(1, round(raw))))
        if u[2] < self.malformed_rate and CORRECTIVE_REMINDER not in prompt:
            return "Die Lehrkraft wirkt insgesamt freundlich und geht geduldig auf die Klasse ein."
        return (
            f"SCORE: {score}\n"
            f"REASONING: {n_pos} of {len(lines)} turns contain praise or positive remarks; "
            f"the overall tone is {'warm' if score >= 3 else 'mostly neutral'}."
        )


def annotate(
    prompt: str,
    client: ChatClient,
    model: str = DEFAULT_MODEL,
    temperature: float = 0.0,
    max_retries: int = 3,
    backoff: float = 1.0,
    sleep: Callable[[float], None] = time.sleep,
) -> LlmResponse:
    """Send ``prompt``, retrying transport errors with exponential backoff.

    An unparseable reply triggers one corrective re-prompt; if that also
    fails the response carries ``score=None`` and ``metadata['failure']``.
    """
    retries = 0

    def send(p):
        nonlocal retries
        delay = backoff
        while True:
            try:
                return client.send(p, model, temperature)
            except TransportError as exc:
                if retries >= max_retries:
                    raise ServiceUnavailable(f"{model}: giving up after {retries} retries: {exc}") from exc
                retries += 1
                log.warning("transport error (%s), retry %d/%d in %.1fs", exc, retries, max_retries, delay)
                sleep(delay)
                delay *= 2

    raw = send(prompt)
    score, reasoning = parse_response(raw)
    meta = {"prompt_sha256": _sha(prompt), "temperature": temperature, "reprompted": False}
    if score is None:
        log.warning("unparseable reply from %s, re-prompting", model)
        meta["reprompted"] = True
        meta["first_raw"] = raw
        raw = send(prompt + CORRECTIVE_REMINDER)
        score, reasoning = parse_response(raw)
        if score is None:
            meta["failure"] = "parse"
    meta["retries"] = retries
    return LlmResponse(raw, score, reasoning, model, meta)


def _sha(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


class ResponseCache:
    """On-disk cache: ``<root>/<model>/<sha256(model + NUL + prompt)>.json``."""

    def __init__(self, root):
        self.root = Path(root)

    def path(self, model: str, prompt: str) -> Path:
        safe = re.sub(r"[^A-Za-z0-9._-]", "_", model)
        return self.root / safe / f"{_sha(model + chr(0) + prompt)}.json"

    def get(self, model: str, prompt: str) -> Optional[LlmResponse]:
        p = self.path(model, prompt)
        if not p.exists():
            return None
        return LlmResponse.from_dict(json.loads(p.read_text(encoding="utf-8")))

    def put(self, model: str, prompt: str, response: LlmResponse):
        p = self.path(model, prompt)
        p.parent.mkdir(parents=True, exist_ok=True)
        tmp = p.with_suffix(".tmp")
        tmp.write_text(json.dumps(response.to_dict(), ensure_ascii=False, indent=1), encoding="utf-8")
        tmp.replace(p)


class RateLimiter:
    """Space request starts at least ``60 / per_minute`` seconds apart."""

    def __init__(self, per_minute: Optional[float], clock=time.monotonic, sleep=time.sleep):
        self.interval = 60.0 / per_minute if per_minute else 0.0
        self._next = 0.0
        self._lock = threading.Lock()
        self._clock = clock
        self._sleep = sleep

    def wait(self):
        if not self.interval:
            return
        with self._lock:
            now = self._clock()
            start = max(now, self._next)
            self._next = start + self.interval
        if start > now:
            self._sleep(start - now)


def annotate_segments(
    segments: Sequence[Segment],
    rubric: RubricPack,
    client: ChatClient,
    model: str = DEFAULT_MODEL,
    cache: Optional[ResponseCache] = None,
    workers: int = 1,
    per_minute: Optional[float] = None,
    token_budget: int = DEFAULT_TOKEN_BUDGET,
    **annotate_kw,
) -> dict:
    """Annotate every segment; returns ``{segment id: LlmResponse or Exception}``."""
    limiter = RateLimiter(per_minute)

    def one(seg):
        try:
            prompt = build_prompt(rubric, seg, token_budget)
            if cache is not None:
                hit = cache.get(model, prompt)
                if hit is not None:
                    return hit
            limiter.wait()
            resp = annotate(prompt, client, model, **annotate_kw)
            if cache is not None:
                cache.put(model, prompt, resp)
            return resp
        except (PromptTooLong, ServiceUnavailable) as exc:
            log.error("segment %s: %s", seg.id, exc)
            return exc

    if workers <= 1:
        results = [one(s) for s in segments]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, segments))
    return {s.id: r for s, r in zip(segments, results)}
