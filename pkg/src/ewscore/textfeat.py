"""Utterance sentiment and the 4D per-segment text feature."""

from __future__ import annotations

import csv
import enum
import functools
import re
from dataclasses import dataclass
from importlib import resources
from typing import Callable, Iterable, Optional

import numpy as np

from .datamodel import Segment, Utterance
from .errors import ZeroDuration

_TOKEN = re.compile(r"\w+", re.UNICODE)
DEFAULT_LEXICON = "lexicon_de.csv"


class Category(str, enum.Enum):
    POSITIVE = "positive"
    NEUTRAL = "neutral"
    NEGATIVE = "negative"


def categorize(polarity: float) -> Category:
    if polarity > 0:
        return Category.POSITIVE
    if polarity < 0:
        return Category.NEGATIVE
    return Category.NEUTRAL


@dataclass(frozen=True)
class PolarizedUtterance:
    utterance: Utterance
    polarity: float

    @property
    def category(self) -> Category:
        return categorize(self.polarity)


class LexiconScorer:
    """Mean polarity of the lexicon hits in a text; no hits scores 0."""

    def __init__(self, lexicon: dict, version: str = "custom"):
        self.lexicon = {k.lower(): max(-1.0, min(1.0, float(v))) for k, v in lexicon.items()}
        self.version = version

    @classmethod
    def from_file(cls, path, version: Optional[str] = None):
        with open(path, newline="", encoding="utf-8") as fh:
            return cls(_read_lexicon(fh), version or str(path))

    @classmethod
    @functools.lru_cache(maxsize=None)
    def default(cls):
        ref = resources.files("ewscore.resources").joinpath(DEFAULT_LEXICON)
        with ref.open("r", encoding="utf-8") as fh:
            return cls(_read_lexicon(fh), version=f"builtin:{DEFAULT_LEXICON}")

    def tokens(self, text: str) -> list[str]:
        return _TOKEN.findall(text.lower())

    def __call__(self, text: str) -> float:
        hits = [self.lexicon[t] for t in self.tokens(text) if t in self.lexicon]
        if not hits:
            return 0.0
        return sum(hits) / len(hits)


def _read_lexicon(lines: Iterable[str]) -> dict:
    lexicon = {}
    for row in csv.reader(lines):
        if not row or row[0].startswith("#") or row[0] == "token":
            continue
        lexicon[row[0].strip()] = float(row[1])
    return lexicon


class TextBlobDEScorer:
    """Adapter for the textblob-de morphological scorer (optional dependency)."""

    def __init__(self):
        try:
            from textblob_de import TextBlobDE
        except ImportError as exc:
            raise ImportError("textblob-de is not installed; pip install textblob-de") from exc
        self._blob = TextBlobDE
        self.version = "textblob-de"

    def __call__(self, text: str) -> float:
        if not text.strip():
            return 0.0
        return max(-1.0, min(1.0, float(self._blob(text).sentiment.polarity)))


def score_polarity(text: str, scorer: Optional[Callable[[str], float]] = None) -> float:
    scorer = scorer or LexiconScorer.default()
    return max(-1.0, min(1.0, float(scorer(text))))


def polarize(utterances: Iterable[Utterance], scorer: Callable[[str], float]) -> list[PolarizedUtterance]:
    return [PolarizedUtterance(u, score_polarity(u.text, scorer)) for u in utterances]


def text_counts(polarities: Iterable[float]) -> tuple[int, int, int, float]:
    """Un-normalized (n_pos, n_neu, n_neg, cumulative polarity)."""
    n_pos = n_neu = n_neg = 0
    total = 0.0
    for p in polarities:
        if p > 0:
            n_pos += 1
        elif p < 0:
            n_neg += 1
        else:
            n_neu += 1
        total += p
    return n_pos, n_neu, n_neg, total


def segment_text_features(segment: Segment, scorer: Optional[Callable[[str], float]] = None) -> np.ndarray:
    """Per-minute rates of positive/neutral/negative utterances and summed polarity.

    Teacher and student turns are pooled; non-verbal annotations are skipped.
    """
    if segment.duration <= 0:
        raise ZeroDuration(f"segment {segment.id} has zero duration")
    scorer = scorer or LexiconScorer.default()
    verbal = [u for u in segment.utterances if not u.nonverbal]
    counts = text_counts(score_polarity(u.text, scorer) for u in verbal)
    minutes = segment.duration / 60.0
    return np.array(counts, dtype=float) / minutes
