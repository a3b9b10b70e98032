import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ewscore.audiofeat import (
    EMOTIONS,
    AudioWindow,
    EmotionHead,
    classify_window,
    embed_window,
    extract_audio,
    load_labeled_embeddings,
    segment_audio_features,
    train_emotion_head,
    window_audio,
)
from ewscore.backends import emotion_corpus
from ewscore.errors import BackendFailure, DimensionMismatch, InsufficientData, NoAudio

from conftest import make_segment


def test_window_counts():
    assert len(window_audio(make_segment(end=960.0))) == 192
    w = window_audio(make_segment(end=12.0))
    assert [(x.start, x.duration) for x in w] == [(0, 5), (5, 5), (10, 2)]
    w = window_audio(make_segment(end=10.5))
    assert len(w) == 2
    with pytest.raises(NoAudio):
        window_audio(make_segment(audio=None))


@given(st.floats(0.5, 3000))
def test_windows_cover_segment(d):
    w = window_audio(make_segment(end=d))
    for a, b in zip(w, w[1:]):
        assert abs(a.end - b.start) < 1e-9
    covered = w[-1].end if w else 0.0
    assert d - covered < 1.0 + 1e-9


def test_embed_window_checks_shape():
    win = AudioWindow(0, 5, "x")
    assert embed_window(win, lambda w: np.zeros(8), dim=8).shape == (8,)
    with pytest.raises(DimensionMismatch):
        embed_window(win, lambda w: np.zeros(7), dim=8)
    with pytest.raises(BackendFailure):
        embed_window(win, lambda w: 1 / 0, dim=8)


@pytest.fixture(scope="module")
def small_head():
    X, y = emotion_corpus(210, seed=3, centroid_seed=5, noise=0.5, dim=32)
    return train_emotion_head(X, y, split_seed=0, hidden=16)


def test_head_probabilities(small_head):
    X, _ = emotion_corpus(20, seed=9, centroid_seed=5, noise=0.5, dim=32)
    P = small_head.predict_proba(X)
    assert P.shape == (20, 7)
    assert np.allclose(P.sum(axis=1), 1.0)
    assert classify_window(small_head, X[0]).shape == (7,)
    with pytest.raises(DimensionMismatch):
        small_head.predict_proba(np.zeros((1, 31)))


def test_head_save_load(tmp_path, small_head):
    small_head.save(tmp_path / "h.pkl")
    back = EmotionHead.load(tmp_path / "h.pkl")
    X, _ = emotion_corpus(5, seed=1, centroid_seed=5, noise=0.5, dim=32)
    assert np.array_equal(back.predict_proba(X), small_head.predict_proba(X))
    assert back.metadata == small_head.metadata


def test_head_needs_two_per_class():
    X = np.random.default_rng(0).normal(size=(10, 4))
    y = ["anger"] * 9 + ["sadness"]
    with pytest.raises(InsufficientData):
        train_emotion_head(X, y)


def test_missing_class_gets_zero_probability():
    X, y = emotion_corpus(120, seed=2, centroid_seed=5, noise=0.3, dim=16)
    keep = [i for i, lab in enumerate(y) if lab != "disgust"]
    head = train_emotion_head(X[keep], [y[i] for i in keep], hidden=8)
    assert np.all(head.predict_proba(X)[:, EMOTIONS.index("disgust")] == 0.0)


def test_segment_mean_and_empty():
    d = np.array([[1, 0, 0, 0, 0, 0, 0], [0, 1, 0, 0, 0, 0, 0]], dtype=float)
    vec, missing = segment_audio_features(d)
    assert not missing and np.allclose(vec, [0.5, 0.5, 0, 0, 0, 0, 0])
    vec, missing = segment_audio_features([])
    assert missing and np.allclose(vec, 1 / 7)


@given(st.lists(st.lists(st.floats(0, 1), min_size=7, max_size=7), min_size=1, max_size=30),
       st.randoms(use_true_random=False))
def test_window_mean_brute_force_and_order(rows, rnd):
    vec, _ = segment_audio_features(np.array(rows))
    brute = [sum(r[j] for r in rows) / len(rows) for j in range(7)]
    assert np.max(np.abs(vec - brute)) <= 1e-9
    shuffled = list(rows)
    rnd.shuffle(shuffled)
    assert np.array_equal(segment_audio_features(np.array(shuffled))[0], vec)


def test_extract_audio_short_segment_is_flagged(small_head):
    class Silent:
        dim = 32
        version = "t"

        def embed(self, w):
            return np.zeros(32)

    vec, missing = extract_audio(make_segment(end=0.5), Silent(), small_head)
    assert missing and np.allclose(vec, 1 / 7)
    vec, missing = extract_audio(make_segment(end=6.0), Silent(), small_head)
    assert not missing and abs(vec.sum() - 1) < 1e-9


def test_load_labeled_embeddings(tmp_path):
    X = np.arange(6, dtype=float).reshape(2, 3)
    np.savez(tmp_path / "e.npz", embeddings=X, labels=np.array(["anger", "fear"]))
    got, labels = load_labeled_embeddings(tmp_path / "e.npz")
    assert np.array_equal(got, X) and labels == ["anger", "fear"]
    (tmp_path / "e.csv").write_text("anger,0,1,2\nfear,3,4,5\n")
    got, labels = load_labeled_embeddings(tmp_path / "e.csv")
    assert np.array_equal(got, X) and labels == ["anger", "fear"]
