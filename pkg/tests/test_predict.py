import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ewscore.datamodel import ScoreEstimate, Source
from ewscore.errors import (
    DegenerateLabels,
    DimensionMismatch,
    InsufficientData,
    MissingTrainPerformance,
    OutOfRange,
)
from ewscore.evalharness import pearson
from ewscore.predict import (
    EnsembleMode,
    EnsembleSpec,
    Family,
    ModelSpec,
    Standardizer,
    Task,
    TrainedModel,
    combine,
    feature_index,
    fit_model,
    fuse,
    predict_score,
    read_estimates,
    round_score,
    write_estimates,
)


def est(v, name, seg="T1:0"):
    return ScoreEstimate(seg, v, Source.TRAINED_MODEL, name=name)


def test_fuse_layout():
    assert np.array_equal(fuse(np.zeros(7), np.zeros(7), np.zeros(4)), np.zeros(18))
    assert feature_index("text.pos_rate") == 14
    row = fuse(range(7), range(7, 14), range(14, 18))
    assert row[14] == 14.0
    with pytest.raises(DimensionMismatch):
        fuse(np.zeros(6), np.zeros(7), np.zeros(4))


@given(st.lists(st.floats(-1e3, 1e3), min_size=7, max_size=7),
       st.lists(st.floats(0, 1), min_size=7, max_size=7),
       st.lists(st.floats(0, 100), min_size=4, max_size=4))
def test_fuse_always_18(v, a, t):
    assert fuse(v, a, t).shape == (18,)


@pytest.mark.parametrize("value, expected", [(2.4, 2), (2.5, 3), (4.0, 4), (1.0, 1), (3.5, 4), (1.49, 1)])
def test_round_score(value, expected):
    assert round_score(value) == expected


@pytest.mark.parametrize("bad", [0.9, 4.2, float("nan")])
def test_round_score_out_of_range(bad):
    with pytest.raises(OutOfRange):
        round_score(bad)


@given(st.floats(1, 4))
def test_round_score_idempotent(v):
    r = round_score(v)
    assert round_score(r) == r
    assert abs(r - v) <= 0.5


@settings(deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(2, 40), st.integers(1, 18)),
              elements=st.floats(-1e4, 1e4)))
def test_standardizer_moments(X):
    Z = Standardizer.fit(X).transform(X)
    varying = X.std(axis=0) > 1e-12 * np.maximum(1.0, np.abs(X.mean(axis=0)))
    assert np.all(np.abs(Z.mean(axis=0)) <= 1e-9)
    assert np.all(np.abs(Z.std(axis=0)[varying] - 1.0) <= 1e-9)


def test_standardizer_constant_column_warns(caplog):
    X = np.column_stack([np.arange(5.0), np.full(5, 3.0)])
    with caplog.at_level(logging.WARNING):
        s = Standardizer.fit(X)
    assert s.std[1] == 1.0
    assert "constant" in caplog.text


def test_model_spec_names():
    assert ModelSpec(Family.RANDOM_FOREST, Task.CLASSIFICATION).name == "rf_clf"
    assert ModelSpec("two_layer_feedforward", "regression").name == "mlp_reg"
    assert ModelSpec(Family.SUPPORT_VECTOR, Task.REGRESSION).param_grid()["C"] == [0.1, 1.0, 10.0]


def _linear_data(n=80, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 18))
    y = 2.5 + 0.4 * X[:, 3]
    return X, np.clip(y, 1, 4), [f"L{i % 10}" for i in range(n)]


def test_fit_regression_recovers_linear_signal():
    X, y, g = _linear_data()
    model = fit_model(ModelSpec(Family.SUPPORT_VECTOR, Task.REGRESSION), X[:60], y[:60], groups=g[:60])
    assert pearson(model.predict_values(X[60:]), y[60:]) > 0.95
    again = fit_model(ModelSpec(Family.SUPPORT_VECTOR, Task.REGRESSION), X[:60], y[:60], groups=g[:60])
    assert again.best_params == model.best_params


def test_fit_errors():
    X, y, _ = _linear_data(20)
    with pytest.raises(InsufficientData):
        fit_model(ModelSpec(Family.RANDOM_FOREST, Task.REGRESSION), X[:9], y[:9])
    with pytest.raises(DegenerateLabels):
        fit_model(ModelSpec(Family.RANDOM_FOREST, Task.REGRESSION), X, np.full(20, 3.0))
    with pytest.raises(DegenerateLabels):
        fit_model(ModelSpec(Family.RANDOM_FOREST, Task.CLASSIFICATION), X, np.full(20, 2.9) + np.arange(20) * 0.01)


def test_classifier_outputs_classes_and_model_round_trip(tmp_path):
    X, y, g = _linear_data()
    model = fit_model(ModelSpec(Family.RANDOM_FOREST, Task.CLASSIFICATION, grid={"n_estimators": [20]}), X, y, g)
    e = predict_score(model, X[0], "T1:0")
    assert e.value == float(e.rounded) and e.rounded in (1, 2, 3, 4)
    model.save(tmp_path / "m.pkl")
    back = TrainedModel.load(tmp_path / "m.pkl")
    assert np.array_equal(back.predict_values(X), model.predict_values(X))
    with pytest.raises(DimensionMismatch):
        predict_score(model, X[0, :17])


class Constant:
    def __init__(self, v):
        self.v = v

    def predict(self, X):
        return np.full(len(X), self.v)


def test_regression_clamped():
    m = TrainedModel(ModelSpec(Family.RANDOM_FOREST, Task.REGRESSION), Standardizer(np.zeros(18), np.ones(18)),
                     Constant(4.7), {}, 0.0)
    e = predict_score(m, np.zeros(18))
    assert e.value == 4.0 and e.rounded == 4
    m.estimator = Constant(2.2)
    assert predict_score(m, np.zeros(18)).value == 2.2


def test_combine_examples():
    assert combine([est(2.0, "a"), est(3.0, "b")], EnsembleSpec()).value == 2.5
    spec = EnsembleSpec(EnsembleMode.WEIGHTED, {"a": 0.6, "b": 0.4})
    assert combine([est(2.0, "a"), est(3.0, "b")], spec).value == pytest.approx(2.4, abs=1e-12)
    spec = EnsembleSpec(EnsembleMode.WEIGHTED, {"a": 0.5, "b": -0.2})
    assert combine([est(2.0, "a"), est(3.0, "b")], spec).value == pytest.approx(2 + 0.01 / 0.51, abs=1e-12)
    out = combine([est(2.0, "a"), est(3.0, "b")], EnsembleSpec())
    assert out.source is Source.ENSEMBLE and out.rounded == 3


def test_combine_errors():
    with pytest.raises(MissingTrainPerformance):
        combine([est(2.0, "a"), est(3.0, "b")], EnsembleSpec(EnsembleMode.WEIGHTED, {"a": 0.5}))
    with pytest.raises(ValueError):
        combine([est(2.0, "a")], EnsembleSpec())
    with pytest.raises(ValueError):
        combine([est(2.0, "a"), est(3.0, "b", seg="T1:1")], EnsembleSpec())


@given(st.lists(st.tuples(st.floats(1, 4), st.floats(-1, 1)), min_size=2, max_size=6))
def test_combine_convex_and_hand_computed(parts):
    names = [f"m{i}" for i in range(len(parts))]
    ests = [est(v, n) for (v, _), n in zip(parts, names)]
    spec = EnsembleSpec(EnsembleMode.WEIGHTED, {n: r for (_, r), n in zip(parts, names)})
    raw = [max(r, 0.01) for _, r in parts]
    hand = sum(w / sum(raw) * v for w, (v, _) in zip(raw, parts))
    got = combine(ests, spec).value
    assert abs(got - hand) <= 1e-12
    lo, hi = min(v for v, _ in parts), max(v for v, _ in parts)
    assert lo <= got <= hi


@given(st.floats(1, 4), st.floats(-1, 1), st.floats(-1, 1))
def test_combine_idempotent(v, r1, r2):
    spec = EnsembleSpec(EnsembleMode.WEIGHTED, {"a": r1, "b": r2})
    assert combine([est(v, "a"), est(v, "b")], spec).value == v


def test_estimates_csv_round_trip(tmp_path):
    rows = [est(2.25, "a"), ScoreEstimate("T1:1", 3.0, Source.LLM_ZERO_SHOT, rounded=3, name="llm")]
    write_estimates(tmp_path / "e.csv", rows, fold_of={"T1:0": 0, "T1:1": 1})
    back = read_estimates(tmp_path / "e.csv")
    assert [(e.segment, e.value, e.source, e.name) for e in back] == [(e.segment, e.value, e.source, e.name)
                                                                        for e in rows]
