"""Domain types shared by every stage of the pipeline.

Times are seconds from lesson start. All types are frozen dataclasses and
round-trip through plain dicts (``to_dict`` / ``from_dict``) so they can be
written to the corpus and cache files.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import NoRatings

TEACHER = "L"
SEGMENT_SEP = ":"

VISUAL_NAMES = (
    "visual.valence",
    "visual.arousal",
    "visual.neutral",
    "visual.happy",
    "visual.sad",
    "visual.surprise",
    "visual.fear",
)
AUDIO_NAMES = (
    "audio.anger",
    "audio.boredom",
    "audio.disgust",
    "audio.fear",
    "audio.happiness",
    "audio.sadness",
    "audio.neutral",
)
TEXT_NAMES = (
    "text.pos_rate",
    "text.neu_rate",
    "text.neg_rate",
    "text.polarity_rate",
)
FEATURE_NAMES = VISUAL_NAMES + AUDIO_NAMES + TEXT_NAMES


def segment_id(lesson_id: str, index: int) -> str:
    return f"{lesson_id}{SEGMENT_SEP}{index}"


def split_segment_id(seg_id: str) -> tuple[str, int]:
    lesson, _, index = seg_id.rpartition(SEGMENT_SEP)
    return lesson, int(index)


def is_teacher(speaker: str) -> bool:
    return speaker == TEACHER


def is_student(speaker: str) -> bool:
    return len(speaker) > 1 and speaker[0] == "S" and speaker[1:].isdigit()


@dataclass(frozen=True)
class Utterance:
    start_time: float
    speaker: str
    text: str
    nonverbal: bool = False

    def __post_init__(self):
        if self.start_time < 0:
            raise ValueError(f"negative start_time {self.start_time}")
        if not self.text and not self.nonverbal:
            raise ValueError("empty utterance text must be flagged nonverbal")

    def to_dict(self):
        d = {"start_time": self.start_time, "speaker": self.speaker, "text": self.text}
        if self.nonverbal:
            d["nonverbal"] = True
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["start_time"]), d["speaker"], d["text"], bool(d.get("nonverbal", False)))


@dataclass(frozen=True)
class Segment:
    lesson_id: str
    index: int
    start: float
    end: float
    video_ref: Optional[str] = None
    audio_ref: Optional[str] = None
    utterances: tuple[Utterance, ...] = ()
    ratings: tuple[tuple[str, int], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "utterances", tuple(self.utterances))
        object.__setattr__(self, "ratings", tuple((str(r), int(v)) for r, v in self.ratings))
        if self.end <= self.start:
            raise ValueError(f"segment {self.id} has non-positive length")
        for rater, value in self.ratings:
            if value not in (1, 2, 3, 4):
                raise ValueError(f"rating {value} from {rater} outside 1..4")

    @property
    def id(self) -> str:
        return segment_id(self.lesson_id, self.index)

    @property
    def duration(self) -> float:
        return self.end - self.start

    def to_dict(self):
        return {
            "lesson_id": self.lesson_id,
            "index": self.index,
            "start": self.start,
            "end": self.end,
            "video_ref": self.video_ref,
            "audio_ref": self.audio_ref,
            "utterances": [u.to_dict() for u in self.utterances],
            "ratings": [[r, v] for r, v in self.ratings],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            lesson_id=d["lesson_id"],
            index=int(d["index"]),
            start=float(d["start"]),
            end=float(d["end"]),
            video_ref=d.get("video_ref"),
            audio_ref=d.get("audio_ref"),
            utterances=tuple(Utterance.from_dict(u) for u in d.get("utterances", [])),
            ratings=tuple((r, int(v)) for r, v in d.get("ratings", [])),
        )


@dataclass(frozen=True)
class FeatureVector:
    """The fused 18D representation plus per-modality missing-data flags."""

    visual: tuple[float, ...]
    audio: tuple[float, ...]
    text: tuple[float, ...]
    visual_missing: bool = False
    audio_missing: bool = False

    def __post_init__(self):
        for name, values, n in (("visual", self.visual, 7), ("audio", self.audio, 7), ("text", self.text, 4)):
            values = tuple(float(v) for v in values)
            if len(values) != n:
                raise ValueError(f"{name} features need {n} values, got {len(values)}")
            object.__setattr__(self, name, values)

    def as_array(self) -> np.ndarray:
        return np.array(self.visual + self.audio + self.text, dtype=float)

    def to_dict(self):
        d = dict(zip(FEATURE_NAMES, self.visual + self.audio + self.text))
        d["visual_missing"] = self.visual_missing
        d["audio_missing"] = self.audio_missing
        return d

    @classmethod
    def from_dict(cls, d):
        values = [float(d[name]) for name in FEATURE_NAMES]
        return cls(
            tuple(values[:7]),
            tuple(values[7:14]),
            tuple(values[14:]),
            _as_bool(d.get("visual_missing", False)),
            _as_bool(d.get("audio_missing", False)),
        )


class Source(str, enum.Enum):
    TRAINED_MODEL = "trained_model"
    LLM_ZERO_SHOT = "llm_zero_shot"
    ENSEMBLE = "ensemble"
    HUMAN_MEAN = "human_mean"


@dataclass(frozen=True)
class ScoreEstimate:
    segment: str
    value: float
    source: Source
    rounded: Optional[int] = None
    name: str = ""
    reasoning: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "source", Source(self.source))
        if not 1.0 <= self.value <= 4.0:
            raise ValueError(f"score {self.value} outside [1, 4]")
        if self.rounded is not None and self.rounded not in (1, 2, 3, 4):
            raise ValueError(f"rounded score {self.rounded} outside 1..4")

    def to_dict(self):
        return {
            "segment_id": self.segment,
            "source": self.source.value,
            "name": self.name,
            "value": self.value,
            "rounded": self.rounded,
            "reasoning": self.reasoning,
        }

    @classmethod
    def from_dict(cls, d):
        rounded = d.get("rounded")
        return cls(
            segment=d["segment_id"],
            value=float(d["value"]),
            source=Source(d["source"]),
            rounded=int(rounded) if rounded not in (None, "") else None,
            name=d.get("name", "") or "",
            reasoning=d.get("reasoning") or None,
        )


def _as_bool(v):
    if isinstance(v, str):
        return v.strip().lower() in ("1", "true", "yes")
    return bool(v)


def mean_human_rating(segment: Segment) -> ScoreEstimate:
    """Ground truth for a segment: the plain mean of its human ratings."""
    if not segment.ratings:
        raise NoRatings(f"segment {segment.id} has no ratings")
    values = [v for _, v in segment.ratings]
    return ScoreEstimate(
        segment=segment.id,
        value=sum(values) / len(values),
        source=Source.HUMAN_MEAN,
        name="human_mean",
    )
