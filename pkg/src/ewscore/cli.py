"""Command-line orchestration: extract, train, annotate, evaluate, irr, explain, synth.

Every subcommand reads a :class:`RunConfig`, built from flags and optionally
overridden by a JSON file passed with ``--config``. Reports embed the config
hash, seeds and backend versions so runs can be traced back to their inputs.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .audiofeat import EMOTIONS as SPEECH_EMOTIONS
from .audiofeat import EmotionHead, extract_audio, load_labeled_embeddings, train_emotion_head
from .backends import AUDIO_BACKENDS, VISUAL_BACKENDS, make_audio, make_visual
from .datamodel import FEATURE_NAMES, ScoreEstimate, Source
from .errors import (
    BackendFailure,
    ConstantInput,
    CorpusLayoutError,
    DimensionMismatch,
    EwScoreError,
    InsufficientData,
    NoAudio,
    NoVideo,
    ZeroDuration,
)
from .evalharness import (
    evaluate_source,
    human_means,
    leave_one_rater_out_irr,
    make_folds,
    pearson,
    split_by_fold,
)
from .explain import DEFAULT_BUDGET, attribute, plot_summary, select_background, summarize, write_attributions
from .ingest import load_corpus
from .llmannotate import (
    DEFAULT_MODEL,
    DEFAULT_TOKEN_BUDGET,
    HeuristicClient,
    LlmResponse,
    OpenAIChatClient,
    ResponseCache,
    RubricPack,
    annotate_segments,
)
from .predict import (
    EnsembleMode,
    EnsembleSpec,
    Family,
    ModelSpec,
    Task,
    combine,
    fit_model,
    round_score,
    write_estimates,
)
from .synthetic import SynthSpec, generate_synthetic_corpus
from .textfeat import LexiconScorer, segment_text_features
from .visualfeat import NEUTRAL_DEFAULT, extract_visual

log = logging.getLogger("ewscore")

MODALITIES = ("visual", "audio", "text")
ALL_MODELS = ("rf_clf", "svm_clf", "mlp_clf", "rf_reg", "svm_reg", "mlp_reg")
FEATURES_FILE = "features.csv"
HEAD_FILE = "emotion_head.pkl"
LLM_SOURCE = "llm"
# fields that only say where things live; left out of the config hash
_LOCATION_FIELDS = ("corpus", "out", "llm_cache", "head", "emotion_corpus", "config")


@dataclass
class RunConfig:
    corpus: str = "corpus"
    out: str = "out"
    modalities: list = field(default_factory=lambda: list(MODALITIES))
    visual_backend: str = "scripted"
    audio_backend: str = "scripted"
    lexicon: Optional[str] = None
    head: Optional[str] = None
    emotion_corpus: Optional[str] = None
    head_seed: int = 0
    models: list = field(default_factory=lambda: list(ALL_MODELS))
    folds: int = 5
    seed: int = 0
    llm: str = "fake"  # fake | openai | none
    llm_model: str = DEFAULT_MODEL
    llm_cache: Optional[str] = None
    llm_workers: int = 1
    llm_per_minute: Optional[float] = None
    token_budget: int = DEFAULT_TOKEN_BUDGET
    ensemble_bases: list = field(default_factory=lambda: ["mlp_reg", LLM_SOURCE])
    explain_model: str = "mlp_reg"
    shap_budget: int = DEFAULT_BUDGET
    background_cap: int = 100
    plot: bool = False
    workers: int = 1
    config: Optional[str] = None

    def validate(self):
        unknown = [m for m in self.modalities if m not in MODALITIES]
        if unknown:
            raise ValueError(f"unknown modalities {unknown}")
        if self.visual_backend not in VISUAL_BACKENDS:
            raise ValueError(f"visual backend {self.visual_backend!r} not registered")
        if self.audio_backend not in AUDIO_BACKENDS:
            raise ValueError(f"audio backend {self.audio_backend!r} not registered")
        bad = [m for m in self.models if m not in ALL_MODELS]
        if bad:
            raise ValueError(f"unknown model names {bad}; choose from {ALL_MODELS}")
        if self.llm not in ("fake", "openai", "none"):
            raise ValueError(f"unknown llm client {self.llm!r}")
        if self.seed is None or self.head_seed is None:
            raise ValueError("seeds are mandatory")
        return self

    def hash(self) -> str:
        d = {k: v for k, v in asdict(self).items() if k not in _LOCATION_FIELDS}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_args(cls, args) -> "RunConfig":
        names = {f.name for f in fields(cls)}
        values = {k: v for k, v in vars(args).items() if k in names and v is not None}
        cfg = cls(**values)
        if cfg.config:
            overrides = json.loads(Path(cfg.config).read_text(encoding="utf-8"))
            stray = set(overrides) - names
            if stray:
                raise ValueError(f"unknown config keys {sorted(stray)}")
            for k, v in overrides.items():
                setattr(cfg, k, v)
        return cfg.validate()


def spec_from_name(name: str, seed: int) -> ModelSpec:
    short, task = name.split("_")
    family = {"rf": Family.RANDOM_FOREST, "svm": Family.SUPPORT_VECTOR, "mlp": Family.TWO_LAYER_FEEDFORWARD}[short]
    return ModelSpec(family, Task.CLASSIFICATION if task == "clf" else Task.REGRESSION, seed=seed)


def _json_dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


# ---------------------------------------------------------------- extraction

_file_hashes = {}


def _file_hash(ref: Optional[str]) -> str:
    if not ref or not os.path.exists(ref):
        return "-"
    st = os.stat(ref)
    key = (ref, st.st_mtime_ns, st.st_size)
    if key not in _file_hashes:
        h = hashlib.sha256()
        with open(ref, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                h.update(chunk)
        _file_hashes[key] = h.hexdigest()
    return _file_hashes[key]


def segment_key(segment, versions: str) -> str:
    """Content hash of a segment's transcript, bounds and media plus backend versions."""
    d = segment.to_dict()
    d.pop("video_ref", None)
    d.pop("audio_ref", None)
    d.pop("ratings", None)
    payload = json.dumps(d, sort_keys=True) + _file_hash(segment.video_ref) + _file_hash(segment.audio_ref) + versions
    return hashlib.sha256(payload.encode()).hexdigest()[:24]


def load_or_train_head(cfg: RunConfig, corpus_root: Path) -> EmotionHead:
    if cfg.head:
        return EmotionHead.load(cfg.head)
    out_head = Path(cfg.out) / HEAD_FILE
    source = Path(cfg.emotion_corpus) if cfg.emotion_corpus else corpus_root / "emotion_corpus.npz"
    if out_head.exists():
        head = EmotionHead.load(out_head)
        if head.metadata.get("corpus_sha256") == _file_hash(str(source)):
            return head
    if not source.exists():
        raise CorpusLayoutError(f"no emotion head given and no labeled corpus at {source}")
    X, labels = load_labeled_embeddings(source)
    head = train_emotion_head(X, labels, split_seed=cfg.head_seed)
    head.metadata["corpus_sha256"] = _file_hash(str(source))
    out_head.parent.mkdir(parents=True, exist_ok=True)
    head.save(out_head)
    return head


def _head_version(head: Optional[EmotionHead]) -> str:
    if head is None:
        return "none"
    m = head.metadata
    return f"head-{m.get('corpus_sha256', 'custom')[:12]}-s{m.get('split_seed')}-h{m.get('hidden')}"


def read_features(path) -> dict:
    """``features.csv`` -> {segment id: row dict with ``values`` as an 18-array}."""
    out = {}
    if not Path(path).exists():
        return out
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            row["values"] = np.array([float(row[n]) for n in FEATURE_NAMES])
            row["visual_missing"] = row["visual_missing"] == "1"
            row["audio_missing"] = row["audio_missing"] == "1"
            out[row["segment_id"]] = row
    return out


def write_features(path, rows: dict):
    header = ["segment_id", "key"] + list(FEATURE_NAMES) + ["visual_missing", "audio_missing", "error"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for sid in sorted(rows):
            r = rows[sid]
            writer.writerow([sid, r["key"]] + [repr(float(v)) for v in r["values"]]
                            + [int(r["visual_missing"]), int(r["audio_missing"]), r.get("error", "")])


def _extract_one(segment, cfg, visual, audio, head, scorer):
    vis, vis_missing = np.array(NEUTRAL_DEFAULT), True
    aud, aud_missing = np.full(len(SPEECH_EMOTIONS), 1.0 / len(SPEECH_EMOTIONS)), True
    txt = np.zeros(4)
    if "visual" in cfg.modalities:
        try:
            vis, vis_missing = extract_visual(segment, visual)
        except NoVideo:
            pass
    if "audio" in cfg.modalities:
        try:
            aud, aud_missing = extract_audio(segment, audio, head)
        except NoAudio:
            pass
    if "text" in cfg.modalities:
        txt = segment_text_features(segment, scorer)
    return np.concatenate([vis, aud, txt]), vis_missing, aud_missing


def run_extract(cfg: RunConfig) -> dict:
    """Extract 18-D rows for every segment, reusing cached rows whose key is unchanged.

    Returns ``{"rows": ..., "computed": n, "reused": n, "errors": {...}, "versions": ...}``.
    """
    corpus = load_corpus(cfg.corpus)
    for lid, msg in sorted(corpus.errors.items()):
        log.error("lesson %s skipped: %s", lid, msg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    visual = make_visual(cfg.visual_backend)
    audio = make_audio(cfg.audio_backend)
    head = load_or_train_head(cfg, Path(cfg.corpus)) if "audio" in cfg.modalities else None
    scorer = LexiconScorer.from_file(cfg.lexicon) if cfg.lexicon else LexiconScorer.default()
    versions = "|".join([
        f"modalities={','.join(sorted(cfg.modalities))}",
        f"visual={getattr(visual, 'version', cfg.visual_backend)}",
        f"audio={getattr(audio, 'version', cfg.audio_backend)}",
        _head_version(head),
        f"lexicon={scorer.version}",
    ])
    cache_path = out / FEATURES_FILE
    cached = read_features(cache_path)
    segments = corpus.segments()
    rows, todo = {}, []
    for seg in segments:
        key = segment_key(seg, versions)
        hit = cached.get(seg.id)
        if hit is not None and hit["key"] == key and not hit.get("error"):
            rows[seg.id] = hit
        else:
            todo.append((seg, key))

    def work(item):
        seg, key = item
        try:
            values, vm, am = _extract_one(seg, cfg, visual, audio, head, scorer)
            return {"key": key, "values": values, "visual_missing": vm, "audio_missing": am, "error": ""}
        except (BackendFailure, DimensionMismatch, ZeroDuration, OSError, ValueError) as exc:
            log.error("segment %s: extraction failed: %s", seg.id, exc)
            return {"key": key, "values": np.full(len(FEATURE_NAMES), np.nan),
                    "visual_missing": True, "audio_missing": True, "error": f"{type(exc).__name__}: {exc}"}

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(work, todo))
    else:
        results = [work(t) for t in todo]
    for (seg, _), res in zip(todo, results):
        rows[seg.id] = res
    write_features(cache_path, rows)
    errors = {sid: r["error"] for sid, r in rows.items() if r.get("error")}
    log.info("features: %d computed, %d reused, %d errors", len(todo), len(rows) - len(todo), len(errors))
    return {"rows": rows, "computed": len(todo), "reused": len(rows) - len(todo), "errors": errors,
            "versions": versions, "segments": segments, "corpus": corpus}


# ---------------------------------------------------------------- LLM

def make_client(cfg: RunConfig):
    if cfg.llm == "openai":
        return OpenAIChatClient()
    return HeuristicClient()


def run_annotate(cfg: RunConfig, segments=None) -> dict:
    """Zero-shot scores for every segment: {segment id: LlmResponse or Exception}."""
    if segments is None:
        segments = load_corpus(cfg.corpus).segments()
    cache_dir = cfg.llm_cache or str(Path(cfg.out) / "llm_cache")
    results = annotate_segments(
        segments,
        RubricPack.default(),
        make_client(cfg),
        model=cfg.llm_model,
        cache=ResponseCache(cache_dir),
        workers=cfg.llm_workers,
        per_minute=cfg.llm_per_minute,
        token_budget=cfg.token_budget,
    )
    estimates = []
    for sid in sorted(results):
        r = results[sid]
        if isinstance(r, LlmResponse) and r.score is not None:
            estimates.append(ScoreEstimate(sid, float(r.score), Source.LLM_ZERO_SHOT, rounded=r.score,
                                           name=LLM_SOURCE, reasoning=r.reasoning))
    Path(cfg.out).mkdir(parents=True, exist_ok=True)
    write_estimates(Path(cfg.out) / "llm_estimates.csv", estimates)
    return results


# ---------------------------------------------------------------- evaluation

@dataclass
class FoldData:
    fold: int
    train_ids: list
    test_ids: list
    X_train: np.ndarray
    y_train: np.ndarray
    groups: list
    X_test: np.ndarray


def _usable(extracted, means) -> list:
    rows = extracted["rows"]
    return sorted(s for s in means if s in rows and not rows[s].get("error"))


def _fold_data(folds, ids, rows, means) -> list[FoldData]:
    out = []
    keep = set(ids)
    for f in range(folds.k):
        tr = [s for s in folds.train_ids(f) if s in keep]
        te = [s for s in folds.test_ids(f) if s in keep]
        out.append(FoldData(
            f, tr, te,
            np.stack([rows[s]["values"] for s in tr]),
            np.array([means[s] for s in tr]),
            [s.rpartition(":")[0] for s in tr],
            np.stack([rows[s]["values"] for s in te]) if te else np.empty((0, len(FEATURE_NAMES))),
        ))
    return out


def _train_fold_models(cfg, data: list[FoldData], names) -> dict:
    """{model name: [TrainedModel or Exception per fold]}."""
    out = {}
    for name in names:
        spec = spec_from_name(name, cfg.seed)
        per_fold = []
        for fd in data:
            try:
                per_fold.append(fit_model(spec, fd.X_train, fd.y_train, groups=fd.groups, fold=fd.fold))
            except EwScoreError as exc:
                log.error("%s fold %d: %s", name, fd.fold, exc)
                per_fold.append(exc)
        out[name] = per_fold
    return out


def _safe_r(est: dict, human: dict) -> Optional[float]:
    ids = sorted(s for s in human if s in est)
    if len(ids) < 3:
        return None
    try:
        return pearson([est[s] for s in ids], [human[s] for s in ids])
    except ConstantInput:
        return None


def _evaluate(per_fold_est, human_folds):
    try:
        return evaluate_source(per_fold_est, human_folds).to_dict()
    except (InsufficientData, ConstantInput) as exc:
        info = {"error": f"{type(exc).__name__}: {exc}"}
        if getattr(exc, "fold", None) is not None:
            info["fold"] = exc.fold
        return info


def _explain(cfg, data, models, names=FEATURE_NAMES):
    rows = []
    for fd, model in zip(data, models):
        if isinstance(model, Exception) or not fd.test_ids:
            continue
        bg = select_background(fd.X_train, fd.y_train, cap=cfg.background_cap, seed=cfg.seed)
        for i, sid in enumerate(fd.test_ids):
            rows.append(attribute(model, bg, fd.X_test[i], budget=max(cfg.shap_budget, 2 * len(names)),
                                  seed=cfg.seed + i, segment=sid, fold=fd.fold))
    return rows


def _provenance(cfg, extracted) -> dict:
    return {
        "package_version": __version__,
        "config_hash": cfg.hash(),
        "config": {k: v for k, v in asdict(cfg).items() if k not in _LOCATION_FIELDS},
        "seeds": {"folds": cfg.seed, "models": cfg.seed, "emotion_head": cfg.head_seed, "shapley": cfg.seed},
        "backend_versions": extracted["versions"],
    }


def _write_table(path, sources: dict, k: int):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["source", "mean_r", "se", "count"] + [f"r_fold{f}" for f in range(k)] + ["error"])
        for name, rep in sources.items():
            if "error" in rep:
                writer.writerow([name, "", "", ""] + [""] * k + [rep["error"]])
                continue
            by_fold = {u["id"]: u["r"] for u in rep["units"]}
            writer.writerow([name, f"{rep['mean_r']:.4f}", f"{rep['se']:.4f}", rep["count"]]
                            + [f"{by_fold[f]:.4f}" if f in by_fold else "" for f in range(k)] + [""])


def run_evaluate(cfg: RunConfig) -> dict:
    """Cross-validate every configured source and write the report files."""
    out = Path(cfg.out)
    extracted = run_extract(cfg)
    segments = extracted["segments"]
    rated = [s for s in segments if s.ratings]
    means = human_means(rated)
    folds = make_folds(rated, k=cfg.folds, seed=cfg.seed)
    ids = _usable(extracted, means)
    rows = extracted["rows"]
    data = _fold_data(folds, ids, rows, means)
    human_folds = split_by_fold({s: means[s] for s in ids}, folds)

    needed = list(dict.fromkeys(list(cfg.models) + [b for b in cfg.ensemble_bases if b != LLM_SOURCE]
                                + [cfg.explain_model]))
    trained = _train_fold_models(cfg, data, needed)

    # per-source, per-fold test estimates and training-side r for the weighted ensemble
    test_est, train_r = {}, {}
    all_estimates = []
    for name in needed:
        test_est[name], train_r[name] = [], []
        for fd, model in zip(data, trained[name]):
            if isinstance(model, Exception) or not fd.test_ids:
                test_est[name].append({})
                train_r[name].append(None)
                continue
            values = model.predict_values(fd.X_test)
            est = {}
            for sid, v in zip(fd.test_ids, values):
                v = float(v)
                if model.spec.task is Task.CLASSIFICATION:
                    v = float(round(v))
                est[sid] = v
                all_estimates.append(ScoreEstimate(sid, v, Source.TRAINED_MODEL, rounded=round_score(v), name=name))
            test_est[name].append(est)
            r = model.inner_score
            train_r[name].append(None if r is None or math.isnan(r) else r)

    sources = {name: _evaluate(test_est[name], human_folds) for name in cfg.models}

    if cfg.llm != "none":
        try:
            llm_results = run_annotate(cfg, [s for s in segments if s.id in set(ids)])
            llm_scores = {sid: float(r.score) for sid, r in llm_results.items()
                          if isinstance(r, LlmResponse) and r.score is not None}
            failures = sorted(sid for sid in llm_results if sid not in llm_scores)
            test_est[LLM_SOURCE] = [{s: llm_scores[s] for s in fd.test_ids if s in llm_scores} for fd in data]
            train_r[LLM_SOURCE] = [_safe_r(llm_scores, {s: means[s] for s in fd.train_ids}) for fd in data]
            for sid in sorted(llm_scores):
                all_estimates.append(ScoreEstimate(sid, llm_scores[sid], Source.LLM_ZERO_SHOT,
                                                   rounded=int(llm_scores[sid]), name=LLM_SOURCE))
            rep = _evaluate(test_est[LLM_SOURCE], human_folds)
            rep["model"] = cfg.llm_model
            rep["failed_segments"] = failures
            sources[LLM_SOURCE] = rep
        except EwScoreError as exc:
            sources[LLM_SOURCE] = {"error": f"{type(exc).__name__}: {exc}"}

    bases = [b for b in cfg.ensemble_bases if b in test_est]
    if len(bases) >= 2:
        for mode in (EnsembleMode.UNWEIGHTED, EnsembleMode.WEIGHTED):
            name = f"ensemble_{mode.value}"
            per_fold = []
            try:
                for f, fd in enumerate(data):
                    spec = EnsembleSpec(mode, {b: train_r[b][f] for b in bases}, name=name)
                    est = {}
                    for sid in fd.test_ids:
                        parts = [ScoreEstimate(sid, test_est[b][f][sid], Source.TRAINED_MODEL, name=b)
                                 for b in bases if sid in test_est[b][f]]
                        if len(parts) == len(bases):
                            e = combine(parts, spec)
                            est[sid] = e.value
                            all_estimates.append(e)
                    per_fold.append(est)
                rep = _evaluate(per_fold, human_folds)
                rep["bases"] = bases
                if mode is EnsembleMode.WEIGHTED:
                    rep["train_r"] = {b: [None if v is None else round(v, 12) for v in train_r[b]] for b in bases}
                sources[name] = rep
            except EwScoreError as exc:
                sources[name] = {"error": f"{type(exc).__name__}: {exc}", "bases": bases}
    elif cfg.ensemble_bases:
        log.warning("ensemble skipped: bases %s not all available", cfg.ensemble_bases)

    try:
        irr = leave_one_rater_out_irr(rated).to_dict()
    except EwScoreError as exc:
        irr = {"error": f"{type(exc).__name__}: {exc}"}

    report = _provenance(cfg, extracted)
    report.update({
        "folds": folds.to_dict(),
        "stratum_deviation": round(folds.stratum_deviation(), 12),
        "n_segments": len(segments),
        "n_scored": len(ids),
        "extraction_errors": extracted["errors"],
        "sources": sources,
        "irr": irr,
    })

    out.mkdir(parents=True, exist_ok=True)
    all_estimates.sort(key=lambda e: (e.name, e.segment))
    write_estimates(out / "estimates.csv", all_estimates, fold_of=folds.fold_of)
    _write_table(out / "results.csv", {**sources, "human_irr": irr}, folds.k)

    attributions = _explain(cfg, data, trained[cfg.explain_model])
    if attributions:
        write_attributions(out / "attributions.csv", attributions)
        summary = summarize(attributions)
        summary["model"] = cfg.explain_model
        summary["max_residual"] = max(r.residual for r in attributions)
        summary["config_hash"] = cfg.hash()
        (out / "summary.json").write_text(_json_dump(_rounded(summary)), encoding="utf-8")
        if cfg.plot:
            try:
                plot_summary(attributions, out / "summary.png")
            except ImportError:
                log.warning("matplotlib not installed; skipping plot")
        report["explain"] = {"model": cfg.explain_model, "top": [e["feature"] for e in summary["ranking"][:5]],
                             "max_residual": round(summary["max_residual"], 12)}
    (out / "report.json").write_text(_json_dump(_rounded(report)), encoding="utf-8")
    return report


def _rounded(obj):
    """Round floats to 12 places so reports compare byte-for-byte across platforms."""
    if isinstance(obj, float):
        return None if math.isnan(obj) else round(obj, 12)
    if isinstance(obj, dict):
        return {str(k): _rounded(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_rounded(v) for v in obj]
    if isinstance(obj, np.generic):
        return _rounded(obj.item())
    return obj


def run_irr(cfg: RunConfig) -> dict:
    corpus = load_corpus(cfg.corpus)
    if corpus.errors:
        lid, msg = sorted(corpus.errors.items())[0]
        raise CorpusLayoutError(f"lesson {lid}: {msg}")
    report = leave_one_rater_out_irr(corpus.segments()).to_dict()
    report["config_hash"] = cfg.hash()
    Path(cfg.out).mkdir(parents=True, exist_ok=True)
    (Path(cfg.out) / "irr.json").write_text(_json_dump(_rounded(report)), encoding="utf-8")
    return report


def run_train_models(cfg: RunConfig) -> dict:
    """Fit every configured model on all rated segments and pickle it under ``out/models``."""
    extracted = run_extract(cfg)
    rated = [s for s in extracted["segments"] if s.ratings]
    means = human_means(rated)
    ids = _usable(extracted, means)
    X = np.stack([extracted["rows"][s]["values"] for s in ids])
    y = np.array([means[s] for s in ids])
    groups = [s.rpartition(":")[0] for s in ids]
    model_dir = Path(cfg.out) / "models"
    model_dir.mkdir(parents=True, exist_ok=True)
    out = {}
    for name in cfg.models:
        model = fit_model(spec_from_name(name, cfg.seed), X, y, groups=groups)
        model.save(model_dir / f"{name}.pkl")
        out[name] = {"best_params": model.best_params, "inner_score": model.inner_score}
    (model_dir / "models.json").write_text(_json_dump(_rounded(out)), encoding="utf-8")
    return out


def run_train_head(cfg: RunConfig) -> dict:
    source = cfg.emotion_corpus or str(Path(cfg.corpus) / "emotion_corpus.npz")
    X, labels = load_labeled_embeddings(source)
    head = train_emotion_head(X, labels, split_seed=cfg.head_seed)
    head.metadata["corpus_sha256"] = _file_hash(source)
    path = Path(cfg.head or Path(cfg.out) / HEAD_FILE)
    path.parent.mkdir(parents=True, exist_ok=True)
    head.save(path)
    return head.metadata


def run_explain(cfg: RunConfig) -> dict:
    """Per-fold attributions for the explain model only."""
    extracted = run_extract(cfg)
    rated = [s for s in extracted["segments"] if s.ratings]
    means = human_means(rated)
    folds = make_folds(rated, k=cfg.folds, seed=cfg.seed)
    data = _fold_data(folds, _usable(extracted, means), extracted["rows"], means)
    models = _train_fold_models(cfg, data, [cfg.explain_model])[cfg.explain_model]
    rows = _explain(cfg, data, models)
    out = Path(cfg.out)
    write_attributions(out / "attributions.csv", rows)
    summary = summarize(rows)
    summary["model"] = cfg.explain_model
    summary["max_residual"] = max(r.residual for r in rows)
    summary["config_hash"] = cfg.hash()
    (out / "summary.json").write_text(_json_dump(_rounded(summary)), encoding="utf-8")
    if cfg.plot:
        plot_summary(rows, out / "summary.png")
    return summary


def run_synth(path, spec: SynthSpec) -> Path:
    return generate_synthetic_corpus(spec).write(path)


# ---------------------------------------------------------------- argparse

def _add_common(p):
    p.add_argument("--config", help="JSON file whose keys override the flags")
    p.add_argument("--corpus", help="corpus root (manifest.json + lesson folders)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--modalities", nargs="+", choices=MODALITIES)
    p.add_argument("--visual-backend", dest="visual_backend")
    p.add_argument("--audio-backend", dest="audio_backend")
    p.add_argument("--lexicon", help="polarity lexicon CSV (token,polarity)")
    p.add_argument("--head", help="trained emotion head pickle")
    p.add_argument("--emotion-corpus", dest="emotion_corpus", help="labeled embeddings (.npz or .csv)")
    p.add_argument("--head-seed", dest="head_seed", type=int)
    p.add_argument("--models", nargs="+", choices=ALL_MODELS)
    p.add_argument("--folds", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--llm", choices=["fake", "openai", "none"])
    p.add_argument("--llm-model", dest="llm_model")
    p.add_argument("--llm-cache", dest="llm_cache")
    p.add_argument("--llm-workers", dest="llm_workers", type=int)
    p.add_argument("--llm-per-minute", dest="llm_per_minute", type=float)
    p.add_argument("--token-budget", dest="token_budget", type=int)
    p.add_argument("--ensemble-bases", dest="ensemble_bases", nargs="+")
    p.add_argument("--explain-model", dest="explain_model", choices=ALL_MODELS)
    p.add_argument("--shap-budget", dest="shap_budget", type=int)
    p.add_argument("--background-cap", dest="background_cap", type=int)
    p.add_argument("--plot", action="store_true", default=None)
    p.add_argument("--workers", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ewscore", description="Score classroom warmth from lesson recordings.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in [
        ("extract", "extract and cache per-segment features"),
        ("annotate", "zero-shot LLM scores for every segment"),
        ("evaluate", "cross-validate all sources and write reports"),
        ("irr", "leave-one-rater-out reliability of the human ratings"),
        ("explain", "Shapley attributions for the explain model"),
    ]:
        _add_common(sub.add_parser(name, help=help_))
    train = sub.add_parser("train", help="train the emotion head or the score models")
    train.add_argument("what", choices=["head", "models"])
    _add_common(train)
    synth = sub.add_parser("synth", help="write a synthetic corpus with a planted signal")
    synth.add_argument("path")
    synth.add_argument("--lessons", type=int, default=SynthSpec.n_lessons)
    synth.add_argument("--segments-per-lesson", type=int, default=SynthSpec.segments_per_lesson)
    synth.add_argument("--target-corr", type=float, default=SynthSpec.target_corr)
    synth.add_argument("--seed", type=int, default=SynthSpec.seed)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "synth":
            spec = SynthSpec(n_lessons=args.lessons, segments_per_lesson=args.segments_per_lesson,
                             target_corr=args.target_corr, seed=args.seed)
            print(run_synth(args.path, spec))
            return 0
        cfg = RunConfig.from_args(args)
        if args.command == "extract":
            res = run_extract(cfg)
            print(f"{len(res['rows'])} segments ({res['computed']} computed, {res['reused']} cached, "
                  f"{len(res['errors'])} errors) -> {Path(cfg.out) / FEATURES_FILE}")
        elif args.command == "train":
            res = run_train_head(cfg) if args.what == "head" else run_train_models(cfg)
            print(json.dumps(_rounded(res), indent=2, sort_keys=True))
        elif args.command == "annotate":
            res = run_annotate(cfg)
            ok = sum(isinstance(r, LlmResponse) and r.score is not None for r in res.values())
            print(f"{ok}/{len(res)} segments scored -> {Path(cfg.out) / 'llm_estimates.csv'}")
        elif args.command == "evaluate":
            report = run_evaluate(cfg)
            for name, rep in report["sources"].items():
                if "error" in rep:
                    print(f"{name:22s} error: {rep['error']}")
                else:
                    print(f"{name:22s} r = {rep['mean_r']:.3f} (SE {rep['se']:.3f})")
        elif args.command == "irr":
            rep = run_irr(cfg)
            print(f"IRR r = {rep['mean_r']:.3f} (SE {rep['se']:.3f}) over {rep['count']} raters")
        elif args.command == "explain":
            summary = run_explain(cfg)
            for e in summary["ranking"][:10]:
                print(f"{e['rank']:2d}. {e['feature']:22s} {e['importance']:.4f}")
    except (EwScoreError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
