"""Media backends: deterministic scripted stand-ins and a registry.

The scripted backends read a JSON "script" per media file describing, for each
time span, the affect or speech-emotion distribution to emit. Every output is
a pure function of (media id, time), so extraction is reproducible and needs
no model weights. Real detector/affect/embedding networks plug in by
implementing the same three-method (visual) or one-method (audio) surface.
"""

from __future__ import annotations

import bisect
import functools
import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .audiofeat import EMBED_DIM, EMOTIONS as SPEECH_EMOTIONS, AudioWindow
from .errors import BackendFailure
from .visualfeat import FaceAffect, FaceDetection

SCRIPT_VERSION = "scripted-1"


def hash_uniforms(*key) -> tuple[float, ...]:
    """Eight deterministic uniforms in [0, 1) derived from ``key``."""
    digest = hashlib.blake2b("|".join(map(str, key)).encode(), digest_size=32).digest()
    return tuple(v / 4294967296.0 for v in struct.unpack("<8I", digest))


def hash_seed(*key) -> int:
    digest = hashlib.blake2b("|".join(map(str, key)).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


@functools.lru_cache(maxsize=256)
def _load_script_file(path: str, mtime: float) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BackendFailure(f"unreadable media script {path}: {exc}") from exc


class _ScriptStore:
    def __init__(self, scripts: Optional[dict] = None):
        self.scripts = dict(scripts or {})

    def get(self, ref: str) -> dict:
        if ref in self.scripts:
            script = self.scripts[ref]
        else:
            p = Path(ref)
            if not p.exists():
                raise BackendFailure(f"media {ref} not found")
            script = _load_script_file(str(p), p.stat().st_mtime)
        if not isinstance(script, dict) or "spans" not in script:
            raise BackendFailure(f"media script {ref} has no spans")
        return script

    def media_id(self, ref: str) -> str:
        """Stable identity for hashing: the script's ``id`` field, else its ref."""
        return str(self.get(ref).get("id", ref))

    def span(self, ref: str, t: float) -> dict:
        spans = self.get(ref)["spans"]
        starts = [s["start"] for s in spans]
        i = bisect.bisect_right(starts, t) - 1
        if i < 0 or t >= spans[i]["end"]:
            raise BackendFailure(f"{ref}: no scripted content at t={t:.3f}s")
        return spans[i]


@dataclass(frozen=True)
class ScriptedFrame:
    ref: str
    time: float
    span: dict


class ScriptedVisualBackend:
    """Scripted face detector + affect estimator.

    Span fields: ``valence``, ``arousal``, ``probs`` (5 emotion scores),
    ``max_faces`` (faces per frame drawn uniformly from 0..max_faces),
    ``jitter`` (per-face noise amplitude) and ``decoy_rate`` (chance of an
    extra low-confidence detection that the threshold should drop).
    """

    version = SCRIPT_VERSION

    def __init__(self, scripts: Optional[dict] = None):
        self.store = _ScriptStore(scripts)

    def read_frame(self, video_ref: str, time: float) -> ScriptedFrame:
        return ScriptedFrame(self.store.media_id(video_ref), round(time, 3), self.store.span(video_ref, time))

    def detect_faces(self, frame: ScriptedFrame) -> list[FaceDetection]:
        u = hash_uniforms("faces", frame.ref, frame.time)
        span = frame.span
        n = int(u[0] * (int(span.get("max_faces", 3)) + 1))
        faces = [FaceDetection((frame, i), 0.85 + 0.15 * u[1 + i % 6], (i, 0, 1, 1)) for i in range(n)]
        if u[7] < float(span.get("decoy_rate", 0.1)):
            faces.append(FaceDetection((frame, n), 0.2 + 0.5 * u[6], (n, 0, 1, 1)))
        return faces

    def estimate_affect(self, crop) -> FaceAffect:
        frame, i = crop
        span = frame.span
        u = hash_uniforms("affect", frame.ref, frame.time, i)
        jitter = float(span.get("jitter", 0.2))
        valence = min(1.0, max(-1.0, span["valence"] + jitter * (2 * u[0] - 1)))
        arousal = min(1.0, max(-1.0, span["arousal"] + jitter * (2 * u[1] - 1)))
        probs = [max(1e-6, p * (1 + jitter * (2 * u[2 + j] - 1))) for j, p in enumerate(span["probs"])]
        total = sum(probs)
        return FaceAffect(valence, arousal, tuple(p / total for p in probs), (i, 0, 1, 1), 0.9)


class ScriptedAudioBackend:
    """Scripted speech embedder.

    Each window draws an emotion class from the span's ``probs`` (7 scores)
    and returns that class's centroid plus isotropic noise. Centroids come
    from ``centroid_seed`` in the script, shared with the labeled training
    corpus built by :func:`emotion_corpus`. ``silence`` spans return a fixed
    silence vector.
    """

    version = SCRIPT_VERSION

    def __init__(self, scripts: Optional[dict] = None, dim: int = EMBED_DIM):
        self.store = _ScriptStore(scripts)
        self.dim = dim

    def embed(self, window: AudioWindow) -> np.ndarray:
        script = self.store.get(window.waveform_ref)
        for lo, hi in script.get("silence", []):
            if lo <= window.start < hi:
                return silence_vector(self.dim)
        span = self.store.span(window.waveform_ref, window.start)
        media = self.store.media_id(window.waveform_ref)
        u = hash_uniforms("class", media, round(window.start, 3))[0]
        cls = int(np.searchsorted(np.cumsum(span["probs"]), u * sum(span["probs"]), side="right"))
        cls = min(cls, len(SPEECH_EMOTIONS) - 1)
        centroids = class_centroids(int(script.get("centroid_seed", 0)), self.dim)
        rng = np.random.default_rng(hash_seed("noise", media, round(window.start, 3)))
        return centroids[cls] + float(script.get("noise", 1.0)) * rng.standard_normal(self.dim)


def silence_vector(dim: int = EMBED_DIM) -> np.ndarray:
    return np.zeros(dim)


@functools.lru_cache(maxsize=8)
def class_centroids(seed: int, dim: int = EMBED_DIM) -> np.ndarray:
    rng = np.random.default_rng(seed)
    c = rng.standard_normal((len(SPEECH_EMOTIONS), dim))
    c.setflags(write=False)
    return c


def emotion_corpus(n: int = 535, seed: int = 0, centroid_seed: int = 0, noise: float = 1.0, dim: int = EMBED_DIM):
    """Labeled (embedding, label) corpus drawn around the scripted centroids."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, len(SPEECH_EMOTIONS), size=n)
    centroids = class_centroids(centroid_seed, dim)
    X = centroids[labels] + noise * rng.standard_normal((n, dim))
    return X, [SPEECH_EMOTIONS[i] for i in labels]


class OpenCVFrameReader:
    """Decode frames from a real video file at a given timestamp (needs opencv)."""

    def __init__(self):
        import cv2

        self._cv2 = cv2
        self._caps = {}

    def __call__(self, video_ref: str, time: float):
        cap = self._caps.get(video_ref)
        if cap is None:
            cap = self._cv2.VideoCapture(video_ref)
            if not cap.isOpened():
                raise BackendFailure(f"cannot open video {video_ref}", time)
            self._caps[video_ref] = cap
        cap.set(self._cv2.CAP_PROP_POS_MSEC, time * 1000.0)
        ok, frame = cap.read()
        if not ok:
            raise BackendFailure(f"no frame in {video_ref}", time)
        return frame


class CompositeVisualBackend:
    """Bundle a frame reader with detector and affect callables."""

    def __init__(self, read_frame, detect_faces, estimate_affect, version: str):
        self.read_frame = read_frame
        self.detect_faces = detect_faces
        self.estimate_affect = estimate_affect
        self.version = version


VISUAL_BACKENDS = {"scripted": ScriptedVisualBackend}
AUDIO_BACKENDS = {"scripted": ScriptedAudioBackend}


def register_visual(name: str, factory):
    VISUAL_BACKENDS[name] = factory


def register_audio(name: str, factory):
    AUDIO_BACKENDS[name] = factory


def make_visual(name: str):
    try:
        return VISUAL_BACKENDS[name]()
    except KeyError:
        raise KeyError(f"unknown visual backend {name!r}; registered: {sorted(VISUAL_BACKENDS)}") from None


def make_audio(name: str):
    try:
        return AUDIO_BACKENDS[name]()
    except KeyError:
        raise KeyError(f"unknown audio backend {name!r}; registered: {sorted(AUDIO_BACKENDS)}") from None
