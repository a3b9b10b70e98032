import json
from pathlib import Path

import numpy as np
import pytest

from ewscore.datamodel import Segment, Utterance
from ewscore.synthetic import SynthSpec, generate_synthetic_corpus

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def synth():
    return generate_synthetic_corpus(SynthSpec())


@pytest.fixture(scope="session")
def synth_segments(synth):
    return synth.segments()


@pytest.fixture
def malformed_cases():
    return json.loads((FIXTURES / "malformed_replies.json").read_text(encoding="utf-8"))


def make_segment(utterances=(), start=0.0, end=960.0, lesson="L1", index=0, ratings=(),
                 video="vid", audio="aud"):
    utts = tuple(u if isinstance(u, Utterance) else Utterance(*u) for u in utterances)
    return Segment(lesson, index, start, end, video, audio, utts, tuple(ratings))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = {}


def record_criterion(number: int, passed: bool, detail: str):
    ACCEPTANCE_LINES[number] = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
