import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ewscore.datamodel import (
    FEATURE_NAMES,
    FeatureVector,
    ScoreEstimate,
    Segment,
    Source,
    Utterance,
    is_student,
    is_teacher,
    mean_human_rating,
    segment_id,
    split_segment_id,
)
from ewscore.errors import NoRatings

from conftest import make_segment


def test_feature_names_layout():
    assert len(FEATURE_NAMES) == 18
    assert len(set(FEATURE_NAMES)) == 18
    assert FEATURE_NAMES[14] == "text.pos_rate"


def test_segment_id_round_trip():
    assert segment_id("T001", 2) == "T001:2"
    assert split_segment_id("T001:2") == ("T001", 2)
    assert split_segment_id("a:b:3") == ("a:b", 3)


def test_speaker_roles():
    assert is_teacher("L")
    assert not is_teacher("S01")
    assert is_student("S01")
    assert not is_student("S")
    assert not is_student("L")


def test_utterance_validation():
    with pytest.raises(ValueError):
        Utterance(-1.0, "L", "hallo")
    with pytest.raises(ValueError):
        Utterance(1.0, "L", "")
    assert Utterance(1.0, "L", "", nonverbal=True).nonverbal


def test_segment_rejects_bad_rating_and_bounds():
    with pytest.raises(ValueError):
        make_segment(ratings=[("R1", 5)])
    with pytest.raises(ValueError):
        make_segment(start=10.0, end=10.0)


def test_mean_human_rating():
    seg = make_segment(ratings=[("R1", 3), ("R2", 4)])
    est = mean_human_rating(seg)
    assert est.value == 3.5
    assert est.source is Source.HUMAN_MEAN
    with pytest.raises(NoRatings):
        mean_human_rating(make_segment())


def test_score_estimate_range():
    with pytest.raises(ValueError):
        ScoreEstimate("a:0", 4.5, Source.TRAINED_MODEL)
    with pytest.raises(ValueError):
        ScoreEstimate("a:0", 2.0, Source.TRAINED_MODEL, rounded=0)


def test_feature_vector_lengths():
    with pytest.raises(ValueError):
        FeatureVector((0.0,) * 6, (0.0,) * 7, (0.0,) * 4)
    fv = FeatureVector(tuple(range(7)), tuple(range(7, 14)), tuple(range(14, 18)), True, False)
    assert fv.as_array().tolist() == list(map(float, range(18)))


finite = st.floats(-1e6, 1e6, allow_nan=False)
texts = st.text(min_size=1, max_size=30)


@given(st.lists(st.tuples(st.floats(0, 5000), st.sampled_from(["L", "S01", "S17"]), texts), max_size=8),
       st.lists(st.tuples(st.sampled_from(["R1", "R2", "R3"]), st.integers(1, 4)), max_size=3))
def test_segment_dict_round_trip(utts, ratings):
    seg = make_segment(utts, ratings=ratings)
    assert Segment.from_dict(seg.to_dict()) == seg


@given(st.lists(finite, min_size=18, max_size=18), st.booleans(), st.booleans())
def test_feature_vector_round_trip(values, vm, am):
    fv = FeatureVector(tuple(values[:7]), tuple(values[7:14]), tuple(values[14:]), vm, am)
    back = FeatureVector.from_dict({k: str(v) if isinstance(v, float) else v for k, v in fv.to_dict().items()})
    assert back == fv
    assert np.array_equal(back.as_array(), np.array(values))


@given(st.floats(1, 4), st.sampled_from(list(Source)), st.one_of(st.none(), st.integers(1, 4)))
def test_score_estimate_round_trip(value, source, rounded):
    est = ScoreEstimate("T1:0", value, source, rounded=rounded, name="x")
    assert ScoreEstimate.from_dict(est.to_dict()) == est
