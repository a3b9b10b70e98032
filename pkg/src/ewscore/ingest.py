"""Transcript parsing, corpus loading and lesson segmentation."""

from __future__ import annotations

import bisect
import csv
import json
import logging
import math
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

from .datamodel import Segment, Utterance
from .errors import CorpusLayoutError, ParseError

log = logging.getLogger(__name__)

SEGMENT_LENGTH = 960.0  # 16 min
MIN_TAIL = 480.0  # tails shorter than 8 min merge into the previous segment

MANIFEST = "manifest.json"
TRANSCRIPT = "transcript.txt"
RATINGS = "ratings.csv"

_LINE = re.compile(r"^\[(\d{1,2}):([0-5]\d):([0-5]\d(?:\.\d+)?)\]\s+([^:\s]+):(?:\s(.*))?$")
_NONVERBAL = re.compile(r"^\(.*\)$")


class NonMonotonicTime(UserWarning):
    pass


@dataclass(frozen=True)
class LessonRecord:
    id: str
    duration: float
    utterances: tuple[Utterance, ...] = ()
    video_ref: Optional[str] = None
    audio_ref: Optional[str] = None
    ratings_by_segment: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "utterances", tuple(self.utterances))


@dataclass
class Corpus:
    lessons: list = field(default_factory=list)
    errors: dict = field(default_factory=dict)  # lesson id -> message
    missing_media: dict = field(default_factory=dict)  # lesson id -> ["video", "audio"]
    root: Optional[Path] = None

    def segments(self) -> list[Segment]:
        out = []
        for lesson in self.lessons:
            out.extend(segment_lesson(lesson))
        return out


def format_timestamp(seconds: float) -> str:
    whole, ms = divmod(int(round(seconds * 1000)), 1000)
    h, rem = divmod(whole, 3600)
    m, s = divmod(rem, 60)
    if ms:
        return f"[{h:02d}:{m:02d}:{s:02d}.{ms:03d}]"
    return f"[{h:02d}:{m:02d}:{s:02d}]"


def parse_transcript(lines: Iterable[str]) -> list[Utterance]:
    """Parse ``[hh:mm:ss] SPEAKER: text`` lines into utterances.

    Blank lines are skipped. A decreasing timestamp emits a
    :class:`NonMonotonicTime` warning but the utterance is kept in file order.
    Text wrapped in parentheses, e.g. ``(lacht)``, marks a non-verbal event.
    """
    out = []
    last = -math.inf
    for line_no, raw in enumerate(lines, start=1):
        line = raw.rstrip("\r\n")
        if not line.strip():
            continue
        m = _LINE.match(line)
        if m is None:
            if not line.startswith("["):
                raise ParseError(line_no, "missing timestamp")
            if "]" not in line:
                raise ParseError(line_no, "malformed timestamp")
            if ":" not in line.split("]", 1)[1]:
                raise ParseError(line_no, "missing speaker separator")
            raise ParseError(line_no, f"malformed line {line!r}")
        h, mnt, sec, speaker, text = m.groups()
        t = int(h) * 3600 + int(mnt) * 60 + float(sec)
        text = (text or "").strip()
        if t < last:
            warnings.warn(
                f"line {line_no}: timestamp {t:.3f}s precedes previous {last:.3f}s",
                NonMonotonicTime,
                stacklevel=2,
            )
        last = t
        out.append(Utterance(t, speaker, text, nonverbal=not text or bool(_NONVERBAL.match(text))))
    return out


def convert_tabular_transcript(lines: Iterable[str], delimiter: str = "\t") -> str:
    """Convert ``seconds<TAB>speaker<TAB>text`` rows to the bracketed line format."""
    out = []
    for row in csv.reader(lines, delimiter=delimiter):
        if not row or not "".join(row).strip():
            continue
        seconds, speaker, text = row[0], row[1], delimiter.join(row[2:])
        out.append(f"{format_timestamp(float(seconds))} {speaker.strip()}: {text.strip()}\n")
    return "".join(out)


def format_transcript(utterances: Iterable[Utterance]) -> str:
    return "".join(f"{format_timestamp(u.start_time)} {u.speaker}: {u.text}\n" for u in utterances)


def segment_bounds(duration: float) -> list[tuple[float, float]]:
    """Split ``[0, duration)`` into 16-minute pieces, merging a short tail."""
    if duration <= 0:
        raise ValueError("lesson duration must be positive")
    n_full = int(duration // SEGMENT_LENGTH)
    if n_full == 0:
        return [(0.0, float(duration))]
    bounds = [(i * SEGMENT_LENGTH, (i + 1) * SEGMENT_LENGTH) for i in range(n_full)]
    tail = duration - n_full * SEGMENT_LENGTH
    if tail >= MIN_TAIL:
        bounds.append((n_full * SEGMENT_LENGTH, float(duration)))
    elif tail > 0:
        bounds[-1] = (bounds[-1][0], float(duration))
    return bounds


def segment_lesson(lesson: LessonRecord) -> list[Segment]:
    bounds = segment_bounds(lesson.duration)
    buckets = [[] for _ in bounds]
    starts = [b[0] for b in bounds]
    for u in lesson.utterances:
        # an utterance exactly at a boundary opens the next segment
        idx = max(0, bisect.bisect_right(starts, u.start_time) - 1)
        buckets[idx].append(u)
    return [
        Segment(
            lesson_id=lesson.id,
            index=i,
            start=start,
            end=end,
            video_ref=lesson.video_ref,
            audio_ref=lesson.audio_ref,
            utterances=tuple(buckets[i]),
            ratings=tuple(lesson.ratings_by_segment.get(i, ())),
        )
        for i, (start, end) in enumerate(bounds)
    ]


def read_ratings(path) -> dict:
    ratings = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"segment_index", "rater_id", "score"} - set(reader.fieldnames or ())
        if missing:
            raise CorpusLayoutError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            ratings.setdefault(int(row["segment_index"]), []).append((row["rater_id"], int(row["score"])))
    return ratings


def write_ratings(path, ratings_by_segment: dict):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["segment_index", "rater_id", "score"])
        for idx in sorted(ratings_by_segment):
            for rater, score in ratings_by_segment[idx]:
                writer.writerow([idx, rater, score])


def _find_media(lesson_dir: Path, stem: str) -> Optional[str]:
    hits = sorted(lesson_dir.glob(f"{stem}.*"))
    return str(hits[0]) if hits else None


def load_lesson(root: Path, entry: dict) -> tuple[LessonRecord, list[str]]:
    lesson_id = entry["id"]
    lesson_dir = root / lesson_id
    if not lesson_dir.is_dir():
        raise CorpusLayoutError(f"lesson directory {lesson_dir} missing")
    transcript = lesson_dir / TRANSCRIPT
    ratings = lesson_dir / RATINGS
    if not transcript.exists():
        raise CorpusLayoutError(f"{transcript} missing")
    if not ratings.exists():
        raise CorpusLayoutError(f"{ratings} missing")
    with open(transcript, encoding="utf-8") as fh:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", NonMonotonicTime)
            utterances = parse_transcript(fh)
    for w in caught:
        log.warning("%s: %s", lesson_id, w.message)
    video = _find_media(lesson_dir, "video")
    audio = _find_media(lesson_dir, "audio")
    missing = [name for name, ref in (("video", video), ("audio", audio)) if ref is None]
    if "duration" in entry:
        duration = float(entry["duration"])
    elif utterances:
        duration = utterances[-1].start_time + 1.0
        log.warning("%s: no duration in manifest, using last utterance time", lesson_id)
    else:
        raise CorpusLayoutError(f"{lesson_id}: no duration and empty transcript")
    record = LessonRecord(
        id=lesson_id,
        duration=duration,
        utterances=tuple(utterances),
        video_ref=video,
        audio_ref=audio,
        ratings_by_segment=read_ratings(ratings),
    )
    return record, missing


def load_corpus(root) -> Corpus:
    """Load every lesson listed in ``<root>/manifest.json``.

    Per-lesson problems are collected in ``Corpus.errors`` rather than raised.
    """
    root = Path(root)
    manifest = root / MANIFEST
    if not manifest.exists():
        raise CorpusLayoutError(f"{manifest} not found")
    try:
        entries = json.loads(manifest.read_text(encoding="utf-8")).get("lessons", [])
    except (json.JSONDecodeError, AttributeError) as exc:
        raise CorpusLayoutError(f"unreadable manifest: {exc}") from exc
    corpus = Corpus(root=root)
    for entry in entries:
        if isinstance(entry, str):
            entry = {"id": entry}
        try:
            record, missing = load_lesson(root, entry)
        except (CorpusLayoutError, ParseError, ValueError, OSError) as exc:
            corpus.errors[entry.get("id", "?")] = str(exc)
            continue
        corpus.lessons.append(record)
        if missing:
            corpus.missing_media[record.id] = missing
    return corpus


def write_corpus(root, lessons: Iterable[LessonRecord], media: Optional[dict] = None):
    """Write lessons in the on-disk corpus layout.

    ``media`` maps lesson id to ``{"video.ext": bytes_or_text, ...}``.
    Media refs on the records are ignored; refs are discovered on load.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for lesson in lessons:
        d = root / lesson.id
        d.mkdir(exist_ok=True)
        (d / TRANSCRIPT).write_text(format_transcript(lesson.utterances), encoding="utf-8")
        write_ratings(d / RATINGS, lesson.ratings_by_segment)
        for name, payload in (media or {}).get(lesson.id, {}).items():
            if isinstance(payload, bytes):
                (d / name).write_bytes(payload)
            else:
                (d / name).write_text(payload, encoding="utf-8")
        entries.append({"id": lesson.id, "duration": lesson.duration})
    (root / MANIFEST).write_text(json.dumps({"version": 1, "lessons": entries}, indent=2), encoding="utf-8")
