"""Per-segment facial affect features from video frames.

Face detection and affect estimation are injected backends. This module
samples frame times, filters and sanitizes backend output, and reduces
per-face predictions to one 7-vector per frame and then per segment.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Any, Optional, Protocol, Sequence

import numpy as np

from .datamodel import Segment
from .errors import BackendFailure, NoVideo

log = logging.getLogger(__name__)

EMOTIONS = ("neutral", "happy", "sad", "surprise", "fear")
DEFAULT_RATE = 2.0
DEFAULT_THRESHOLD = 0.8
NEUTRAL_DEFAULT = (0.0, 0.0) + (1.0 / len(EMOTIONS),) * len(EMOTIONS)
PROB_TOL = 1e-6


@dataclass(frozen=True)
class FaceDetection:
    crop: Any
    confidence: float
    bbox: tuple = ()


@dataclass(frozen=True)
class FaceAffect:
    valence: float
    arousal: float
    emotion_probs: tuple[float, ...]
    bbox: tuple = ()
    confidence: float = 1.0

    def vector(self) -> tuple[float, ...]:
        return (self.valence, self.arousal) + tuple(self.emotion_probs)

    def is_valid(self) -> bool:
        probs = self.emotion_probs
        return (
            -1.0 <= self.valence <= 1.0
            and -1.0 <= self.arousal <= 1.0
            and len(probs) == len(EMOTIONS)
            and all(p >= 0.0 for p in probs)
            and abs(sum(probs) - 1.0) <= PROB_TOL
            and 0.0 <= self.confidence <= 1.0
        )


@dataclass(frozen=True)
class FrameAffect:
    time: float
    faces_detected: int
    aggregate: Optional[tuple[float, ...]]


class VisualBackend(Protocol):
    version: str

    def read_frame(self, video_ref: str, time: float) -> Any: ...

    def detect_faces(self, frame: Any) -> Sequence[FaceDetection]: ...

    def estimate_affect(self, crop: Any) -> FaceAffect: ...


def sample_frames(segment: Segment, rate: float = DEFAULT_RATE) -> list[float]:
    """Frame times ``start, start + 1/rate, ...`` strictly below ``end``."""
    if segment.video_ref is None:
        raise NoVideo(f"segment {segment.id} has no video")
    if rate <= 0:
        raise ValueError("frame rate must be positive")
    n = math.ceil(segment.duration * rate - 1e-9)
    return [segment.start + i / rate for i in range(n)]


def detect_faces(frame, detector, threshold: float = DEFAULT_THRESHOLD, time: Optional[float] = None):
    """Run ``detector`` on a frame and keep detections at or above ``threshold``."""
    try:
        found = detector(frame)
    except BackendFailure:
        raise
    except Exception as exc:
        raise BackendFailure(f"face detector failed: {exc}", time) from exc
    return [d for d in found if d.confidence >= threshold]


def sanitize_affect(raw: FaceAffect) -> FaceAffect:
    """Clamp valence/arousal into [-1, 1] and renormalize the emotion distribution."""
    valence, arousal = raw.valence, raw.arousal
    if not -1.0 <= valence <= 1.0:
        log.warning("valence %.3f out of range, clamped", valence)
        valence = min(1.0, max(-1.0, valence))
    if not -1.0 <= arousal <= 1.0:
        log.warning("arousal %.3f out of range, clamped", arousal)
        arousal = min(1.0, max(-1.0, arousal))
    probs = tuple(max(0.0, float(p)) for p in raw.emotion_probs)
    if len(probs) != len(EMOTIONS):
        raise BackendFailure(f"expected {len(EMOTIONS)} emotion scores, got {len(probs)}")
    total = sum(probs)
    if total <= 0.0:
        log.warning("emotion scores sum to zero, using uniform")
        probs = (1.0 / len(EMOTIONS),) * len(EMOTIONS)
    elif abs(total - 1.0) > PROB_TOL:
        log.warning("emotion scores sum to %.6f, renormalized", total)
        probs = tuple(p / total for p in probs)
    confidence = min(1.0, max(0.0, float(raw.confidence)))
    return FaceAffect(float(valence), float(arousal), probs, tuple(raw.bbox), confidence)


def estimate_affect(crop, estimator, time: Optional[float] = None) -> FaceAffect:
    try:
        raw = estimator(crop)
    except BackendFailure:
        raise
    except Exception as exc:
        raise BackendFailure(f"affect estimator failed: {exc}", time) from exc
    return sanitize_affect(raw)


def aggregate_frame(faces: Sequence[FaceAffect], time: float = 0.0) -> FrameAffect:
    if not faces:
        return FrameAffect(time, 0, None)
    n = len(faces)
    # fsum is exactly rounded, so the mean does not depend on face order
    columns = zip(*(face.vector() for face in faces))
    return FrameAffect(time, n, tuple(math.fsum(c) / n for c in columns))


def segment_visual_features(frames: Sequence[FrameAffect]) -> tuple[np.ndarray, bool]:
    """Temporal mean over face-bearing frames; flagged neutral default if none."""
    present = [f.aggregate for f in frames if f.aggregate is not None]
    if not present:
        return np.array(NEUTRAL_DEFAULT), True
    return np.array([math.fsum(c) / len(present) for c in zip(*present)]), False


def extract_visual(
    segment: Segment,
    backend: VisualBackend,
    rate: float = DEFAULT_RATE,
    threshold: float = DEFAULT_THRESHOLD,
) -> tuple[np.ndarray, bool]:
    frames = []
    for t in sample_frames(segment, rate):
        try:
            image = backend.read_frame(segment.video_ref, t)
        except BackendFailure:
            raise
        except Exception as exc:
            raise BackendFailure(f"cannot read frame from {segment.video_ref}: {exc}", t) from exc
        detections = detect_faces(image, backend.detect_faces, threshold, time=t)
        faces = [estimate_affect(d.crop, backend.estimate_affect, time=t) for d in detections]
        frames.append(aggregate_frame(faces, t))
    return segment_visual_features(frames)
