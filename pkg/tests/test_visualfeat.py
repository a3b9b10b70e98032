import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ewscore.errors import BackendFailure, NoVideo
from ewscore.visualfeat import (
    NEUTRAL_DEFAULT,
    FaceAffect,
    FaceDetection,
    FrameAffect,
    aggregate_frame,
    detect_faces,
    estimate_affect,
    extract_visual,
    sample_frames,
    sanitize_affect,
    segment_visual_features,
)

from conftest import make_segment


def face(v, a, probs):
    return FaceAffect(v, a, tuple(probs))


def test_sample_frames_counts():
    assert len(sample_frames(make_segment(end=960.0))) == 1920
    times = sample_frames(make_segment(start=10.0, end=11.2))
    assert times == [10.0, 10.5, 11.0]
    with pytest.raises(NoVideo):
        sample_frames(make_segment(video=None))


def test_detection_threshold():
    dets = [FaceDetection("a", 0.95), FaceDetection("b", 0.8), FaceDetection("c", 0.79)]
    kept = detect_faces(None, lambda _: dets)
    assert [d.crop for d in kept] == ["a", "b"]


def test_backend_exception_is_wrapped():
    def boom(_):
        raise RuntimeError("gpu fell over")

    with pytest.raises(BackendFailure) as info:
        detect_faces(None, boom, time=3.5)
    assert info.value.time == 3.5
    with pytest.raises(BackendFailure):
        estimate_affect(None, boom)


def test_sanitize_renormalizes_and_clamps(caplog):
    with caplog.at_level(logging.WARNING):
        out = sanitize_affect(face(1.3, -0.2, [0.2, 0.2, 0.2, 0.2, 0.18]))
    assert out.valence == 1.0
    assert abs(sum(out.emotion_probs) - 1.0) < 1e-12
    assert out.is_valid()
    assert len(caplog.records) == 2
    uniform = sanitize_affect(face(0, 0, [0, 0, 0, 0, 0]))
    assert uniform.emotion_probs == (0.2,) * 5


@given(st.floats(-5, 5), st.floats(-5, 5), st.lists(st.floats(0, 10), min_size=5, max_size=5))
def test_sanitize_always_valid(v, a, probs):
    assert sanitize_affect(face(v, a, probs)).is_valid()


def test_aggregate_frame_mean():
    f = aggregate_frame([face(0.2, 0.0, [1, 0, 0, 0, 0]), face(0.6, 0.4, [0, 1, 0, 0, 0])], 1.0)
    assert f.faces_detected == 2
    assert np.allclose(f.aggregate, (0.4, 0.2, 0.5, 0.5, 0, 0, 0))
    assert aggregate_frame([], 2.0).aggregate is None


def test_segment_features_skip_faceless_frames():
    frames = [FrameAffect(0, 1, (1.0,) * 7), FrameAffect(0.5, 0, None), FrameAffect(1.0, 2, (0.0,) * 7)]
    vec, missing = segment_visual_features(frames)
    assert not missing and np.allclose(vec, 0.5)
    vec, missing = segment_visual_features([FrameAffect(0, 0, None)])
    assert missing and tuple(vec) == NEUTRAL_DEFAULT


@given(st.lists(st.lists(st.tuples(st.floats(-1, 1), st.floats(-1, 1),
                                   st.lists(st.floats(0.01, 1), min_size=5, max_size=5)), max_size=4),
                min_size=1, max_size=12),
       st.randoms(use_true_random=False))
def test_two_level_mean_matches_brute_force(frames, rnd):
    faces_per_frame = [[sanitize_affect(face(v, a, p)) for v, a, p in fr] for fr in frames]
    frame_objs = [aggregate_frame(f, i) for i, f in enumerate(faces_per_frame)]
    vec, missing = segment_visual_features(frame_objs)
    bearing = [f for f in faces_per_frame if f]
    if not bearing:
        assert missing
        return
    brute = np.mean([np.mean([fa.vector() for fa in f], axis=0) for f in bearing], axis=0)
    assert np.max(np.abs(vec - brute)) <= 1e-9
    shuffled = [[*f] for f in faces_per_frame]
    for f in shuffled:
        rnd.shuffle(f)
    rnd.shuffle(shuffled)
    vec2, _ = segment_visual_features([aggregate_frame(f, i) for i, f in enumerate(shuffled)])
    assert np.array_equal(vec2, vec)


class StubBackend:
    version = "stub"

    def __init__(self, faces_at):
        self.faces_at = faces_at

    def read_frame(self, ref, t):
        return t

    def detect_faces(self, t):
        return [FaceDetection(f, 0.9) for f in self.faces_at(t)]

    def estimate_affect(self, crop):
        return crop


def test_extract_visual_with_stub():
    happy = face(0.5, 0.1, [0, 1, 0, 0, 0])
    backend = StubBackend(lambda t: [happy] if t < 1.0 else [])
    vec, missing = extract_visual(make_segment(end=2.0), backend)
    assert not missing
    assert np.allclose(vec, happy.vector())
    vec, missing = extract_visual(make_segment(end=2.0), StubBackend(lambda t: []))
    assert missing and tuple(vec) == NEUTRAL_DEFAULT
