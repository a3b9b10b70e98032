import json

import pytest

from ewscore.cli import RunConfig, build_parser, main, read_features, run_extract, run_irr
from ewscore.datamodel import FEATURE_NAMES, Utterance
from ewscore.errors import CorpusLayoutError
from ewscore.ingest import LessonRecord, write_corpus
from ewscore.synthetic import SynthSpec, generate_synthetic_corpus


@pytest.fixture(scope="module")
def small_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    return generate_synthetic_corpus(SynthSpec(n_lessons=5, segments_per_lesson=2)).write(root)


def cfg_for(corpus, out, **kw):
    return RunConfig(corpus=str(corpus), out=str(out), **kw).validate()


def test_extract_then_cache_hit(small_corpus, tmp_path):
    cfg = cfg_for(small_corpus, tmp_path, modalities=["visual", "text"])
    first = run_extract(cfg)
    assert first["computed"] == 10 and first["reused"] == 0 and not first["errors"]
    assert all(len(r["values"]) == len(FEATURE_NAMES) for r in first["rows"].values())
    second = run_extract(cfg)
    assert second["computed"] == 0 and second["reused"] == 10
    for sid, row in first["rows"].items():
        assert list(second["rows"][sid]["values"]) == list(row["values"])
    # a different modality set invalidates the cache keys
    third = run_extract(cfg_for(small_corpus, tmp_path, modalities=["text"]))
    assert third["computed"] == 10


def test_corrupt_media_is_isolated(small_corpus, tmp_path):
    import shutil

    root = tmp_path / "corpus"
    shutil.copytree(small_corpus, root)
    (root / "T001" / "video.synth.json").write_text("{broken")
    res = run_extract(cfg_for(root, tmp_path / "out", modalities=["visual", "text"]))
    assert sorted(res["errors"]) == ["T001:0", "T001:1"]
    assert len(res["rows"]) == 10
    rows = read_features(tmp_path / "out" / "features.csv")
    assert rows["T001:0"]["error"] and not rows["T000:0"]["error"]
    # failed rows are retried on the next run
    assert run_extract(cfg_for(root, tmp_path / "out", modalities=["visual", "text"]))["computed"] == 2


def _irr_corpus(root, ratings, with_ratings_file=True):
    lessons = []
    for i, by_segment in enumerate(ratings):
        lessons.append(LessonRecord(f"L{i}", 960.0, (Utterance(1.0, "L", "Hallo"),), None, None, by_segment))
    write_corpus(root, lessons)
    if not with_ratings_file:
        (root / "L0" / "ratings.csv").unlink()
    return root


def test_irr_identical_raters(tmp_path):
    ratings = [{0: [("A", 1 + i % 4), ("B", 1 + i % 4)]} for i in range(8)]
    root = _irr_corpus(tmp_path / "c", ratings)
    rep = run_irr(cfg_for(root, tmp_path / "out"))
    assert rep["mean_r"] == pytest.approx(1.0)
    assert json.loads((tmp_path / "out" / "irr.json").read_text())["count"] == rep["count"]


def test_irr_missing_ratings_raises(tmp_path):
    ratings = [{0: [("A", 2), ("B", 3)]} for _ in range(4)]
    root = _irr_corpus(tmp_path / "c", ratings, with_ratings_file=False)
    with pytest.raises(CorpusLayoutError):
        run_irr(cfg_for(root, tmp_path / "out"))
    assert main(["irr", "--corpus", str(root), "--out", str(tmp_path / "out")]) == 2


def test_config_override_and_hash(tmp_path):
    conf = tmp_path / "conf.json"
    conf.write_text(json.dumps({"folds": 3, "models": ["rf_reg"]}))
    args = build_parser().parse_args(["evaluate", "--config", str(conf), "--seed", "4"])
    cfg = RunConfig.from_args(args)
    assert cfg.folds == 3 and cfg.models == ["rf_reg"] and cfg.seed == 4
    moved = RunConfig(**{**cfg.__dict__, "corpus": "elsewhere", "out": "other"})
    assert moved.hash() == cfg.hash()
    assert RunConfig(**{**cfg.__dict__, "seed": 5}).hash() != cfg.hash()
    conf.write_text(json.dumps({"nonsense": 1}))
    with pytest.raises(ValueError):
        RunConfig.from_args(args)


def test_validation_errors():
    with pytest.raises(ValueError):
        RunConfig(models=["tree"]).validate()
    with pytest.raises(ValueError):
        RunConfig(visual_backend="missing").validate()
    with pytest.raises(ValueError):
        RunConfig(seed=None).validate()


def test_synth_command(tmp_path, capsys):
    assert main(["synth", str(tmp_path / "s"), "--lessons", "3", "--segments-per-lesson", "1"]) == 0
    manifest = json.loads((tmp_path / "s" / "manifest.json").read_text())
    assert len(manifest["lessons"]) == 3
    assert str(tmp_path / "s") in capsys.readouterr().out
