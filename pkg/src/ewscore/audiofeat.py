"""Speech emotion features: window the audio, embed, classify, average."""

from __future__ import annotations

import logging
import math
import pickle
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional, Protocol, Sequence

import numpy as np
from sklearn.model_selection import train_test_split
from sklearn.neural_network import MLPClassifier

from .datamodel import Segment
from .errors import BackendFailure, DimensionMismatch, InsufficientData, NoAudio

log = logging.getLogger(__name__)

EMOTIONS = ("anger", "boredom", "disgust", "fear", "happiness", "sadness", "neutral")
EMBED_DIM = 1024
WINDOW = 5.0
MIN_WINDOW = 1.0
HEAD_FORMAT = 1


@dataclass(frozen=True)
class AudioWindow:
    start: float
    duration: float
    waveform_ref: str

    @property
    def end(self) -> float:
        return self.start + self.duration


class AudioBackend(Protocol):
    version: str
    dim: int

    def embed(self, window: AudioWindow) -> np.ndarray: ...


def window_audio(segment: Segment, win: float = WINDOW, min_tail: float = MIN_WINDOW) -> list[AudioWindow]:
    """Non-overlapping windows over the segment; a short final window is kept if >= ``min_tail``."""
    if segment.audio_ref is None:
        raise NoAudio(f"segment {segment.id} has no audio")
    if win <= 0:
        raise ValueError("window length must be positive")
    n_full = int(math.floor(segment.duration / win + 1e-9))
    windows = [AudioWindow(segment.start + i * win, win, segment.audio_ref) for i in range(n_full)]
    tail = segment.duration - n_full * win
    if tail >= min_tail - 1e-9:
        windows.append(AudioWindow(segment.start + n_full * win, tail, segment.audio_ref))
    return windows


def embed_window(window: AudioWindow, embedder: Callable[[AudioWindow], Any], dim: int = EMBED_DIM) -> np.ndarray:
    try:
        vec = np.asarray(embedder(window), dtype=float)
    except (BackendFailure, DimensionMismatch):
        raise
    except Exception as exc:
        raise BackendFailure(f"embedding failed for {window.waveform_ref}: {exc}", window.start) from exc
    if vec.shape != (dim,):
        raise DimensionMismatch(f"embedding shape {vec.shape}, expected ({dim},)")
    return vec


@dataclass
class EmotionHead:
    """Two-layer feed-forward classifier over speech embeddings."""

    model: MLPClassifier
    input_dim: int
    labels: tuple = EMOTIONS
    metadata: dict = field(default_factory=dict)

    @property
    def test_accuracy(self) -> Optional[float]:
        return self.metadata.get("test_accuracy")

    def predict_proba(self, embeddings) -> np.ndarray:
        X = np.atleast_2d(np.asarray(embeddings, dtype=float))
        if X.shape[1] != self.input_dim:
            raise DimensionMismatch(f"embedding width {X.shape[1]}, head expects {self.input_dim}")
        probs = np.zeros((X.shape[0], len(self.labels)))
        raw = self.model.predict_proba(X)
        # classes absent from training keep probability 0
        for col, cls in enumerate(self.model.classes_):
            probs[:, int(cls)] = raw[:, col]
        return probs

    def save(self, path):
        payload = {"format": HEAD_FORMAT, "input_dim": self.input_dim, "labels": self.labels,
                   "metadata": self.metadata, "model": self.model}
        with open(path, "wb") as fh:
            pickle.dump(payload, fh)

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            payload = pickle.load(fh)
        if payload.get("format") != HEAD_FORMAT:
            raise ValueError(f"{path}: unsupported head format {payload.get('format')}")
        return cls(payload["model"], payload["input_dim"], tuple(payload["labels"]), payload["metadata"])


def _label_index(label) -> int:
    if isinstance(label, (int, np.integer)):
        if not 0 <= label < len(EMOTIONS):
            raise ValueError(f"label index {label} outside 0..{len(EMOTIONS) - 1}")
        return int(label)
    return EMOTIONS.index(str(label).lower())


def train_emotion_head(
    embeddings,
    labels: Sequence,
    split_seed: int = 0,
    hidden: int = 128,
    test_size: float = 0.2,
    max_iter: int = 500,
) -> EmotionHead:
    """Fit the head on a seeded 80% split and score it on the held-out 20%.

    Early stopping holds out 10% of the training portion for validation.
    """
    X = np.asarray(embeddings, dtype=float)
    y = np.array([_label_index(lab) for lab in labels])
    if X.ndim != 2 or len(X) != len(y):
        raise DimensionMismatch("embeddings must be a 2D array aligned with labels")
    try:
        X_tr, X_te, y_tr, y_te = train_test_split(X, y, test_size=test_size, random_state=split_seed, stratify=y)
    except ValueError:
        X_tr, X_te, y_tr, y_te = train_test_split(X, y, test_size=test_size, random_state=split_seed)
    present = np.unique(y)
    counts = {int(c): int(np.sum(y_tr == c)) for c in present}
    short = [EMOTIONS[c] for c, n in counts.items() if n < 2]
    if short or len(present) < 2:
        raise InsufficientData(f"need >= 2 training examples for every class; short: {short or 'only one class'}")
    model = MLPClassifier(
        hidden_layer_sizes=(hidden,),
        early_stopping=math.ceil(0.1 * len(y_tr)) >= len(present),
        validation_fraction=0.1,
        max_iter=max_iter,
        random_state=split_seed,
    )
    model.fit(X_tr, y_tr)
    head = EmotionHead(model, X.shape[1])
    accuracy = float(np.mean(head.predict_proba(X_te).argmax(axis=1) == y_te)) if len(y_te) else None
    head.metadata = {
        "split_seed": split_seed,
        "hidden": hidden,
        "n_train": int(len(y_tr)),
        "n_test": int(len(y_te)),
        "test_accuracy": accuracy,
    }
    log.info("emotion head trained: test accuracy %s on %d held-out", accuracy, len(y_te))
    return head


def classify_window(head: EmotionHead, embedding) -> np.ndarray:
    emb = np.asarray(embedding, dtype=float)
    if emb.ndim != 1:
        raise DimensionMismatch("classify_window takes a single embedding")
    return head.predict_proba(emb)[0]


def segment_audio_features(dists) -> tuple[np.ndarray, bool]:
    """Temporal mean of per-window distributions; flagged uniform default if empty."""
    if len(dists) == 0:
        return np.full(len(EMOTIONS), 1.0 / len(EMOTIONS)), True
    D = np.asarray(dists, dtype=float)
    return np.array([math.fsum(col) / len(D) for col in D.T]), False


def extract_audio(segment: Segment, backend: AudioBackend, head: EmotionHead, win: float = WINDOW):
    windows = window_audio(segment, win)
    if not windows:
        return segment_audio_features([])
    dim = getattr(backend, "dim", EMBED_DIM)
    embeddings = np.stack([embed_window(w, backend.embed, dim) for w in windows])
    return segment_audio_features(head.predict_proba(embeddings))


def load_labeled_embeddings(path):
    """Read a labeled embedding corpus from ``.npz`` (``embeddings``, ``labels``) or CSV.

    CSV rows are ``label, e_0, ..., e_{d-1}``.
    """
    path = Path(path)
    if path.suffix == ".npz":
        with np.load(path, allow_pickle=False) as data:
            return data["embeddings"], [str(x) for x in data["labels"]]
    rows = np.genfromtxt(path, delimiter=",", dtype=str)
    rows = np.atleast_2d(rows)
    return rows[:, 1:].astype(float), list(rows[:, 0])
