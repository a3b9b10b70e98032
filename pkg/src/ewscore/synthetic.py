"""Seeded synthetic corpora with planted feature-label structure.

Each segment gets a latent warmth level; two raters per lesson score it with
independent noise. A planted signal is then built to correlate with the
realized mean rating at exactly ``target_corr`` (the noise component is
orthogonalized against the standardized labels), and it drives the
positive-utterance count of the transcript most strongly, the speech
happiness/anger mix moderately and facial valence weakly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .audiofeat import EMOTIONS as SPEECH_EMOTIONS
from .backends import ScriptedAudioBackend, ScriptedVisualBackend, emotion_corpus
from .datamodel import Utterance, segment_id
from .ingest import SEGMENT_LENGTH, LessonRecord, segment_bounds, write_corpus

POSITIVE_WORDS = ("gut", "super", "toll", "prima", "klasse", "schön", "perfekt", "richtig", "genau",
                  "wunderbar", "spitze", "bravo", "stark", "gelungen")
NEGATIVE_WORDS = ("schlecht", "falsch", "leider", "langweilig", "nervig", "schade", "unruhig")
POSITIVE_FRAMES = ("Das ist {w}.", "{W}, weiter so!", "Sehr {w} gemacht.", "{W}, das stimmt.", "Ja, {w}!")
NEGATIVE_FRAMES = ("Das ist {w}.", "{W}, noch mal bitte.", "Hm, {w}.")
NEUTRAL_LINES = (
    "Schlagt bitte Seite zwölf auf.",
    "Wie lautet die nächste Gleichung?",
    "Wer möchte die Aufgabe an der Tafel vorrechnen?",
    "Wir setzen x gleich zwei ein.",
    "Was kommt bei der Wurzel heraus?",
    "Ich schreibe das mal an.",
    "Nehmt euer Heft raus.",
    "Die Diskriminante ist hier negativ.",
    "Also zwei Lösungen.",
    "Kannst du das wiederholen?",
    "Ich habe minus drei raus.",
    "Welche Formel benutzen wir?",
    "Moment, ich rechne noch.",
    "Ok.",
)


@dataclass(frozen=True)
class SynthSpec:
    n_lessons: int = 20
    segments_per_lesson: int = 3
    target_corr: float = 0.8
    rater_noise: float = 0.5
    n_raters: int = 14
    latent_mean: float = 2.5
    latent_sd: float = 0.8
    lesson_share: float = 0.5  # fraction of latent variance shared within a lesson
    pos_per_min: float = 1.5
    pos_slope: float = 0.5  # extra positive utterances per minute per SD of signal
    neu_per_min: float = 2.0
    neg_per_min: float = 0.3
    audio_noise: float = 3.5
    centroid_seed: int = 7
    emotion_corpus_size: int = 535
    seed: int = 0

    def to_dict(self):
        return asdict(self)


@dataclass
class SyntheticCorpus:
    spec: SynthSpec
    lessons: list
    scripts: dict  # media ref -> script dict
    signal: dict  # segment id -> planted signal (unit variance)
    latent: dict  # segment id -> latent warmth
    emotion_embeddings: np.ndarray = field(repr=False, default=None)
    emotion_labels: list = field(repr=False, default_factory=list)

    def visual_backend(self) -> ScriptedVisualBackend:
        return ScriptedVisualBackend(self.scripts)

    def audio_backend(self) -> ScriptedAudioBackend:
        return ScriptedAudioBackend(self.scripts)

    def segments(self):
        from .ingest import segment_lesson

        out = []
        for lesson in self.lessons:
            out.extend(segment_lesson(lesson))
        return out

    def write(self, root) -> Path:
        """Write the corpus layout plus ``emotion_corpus.npz`` under ``root``."""
        root = Path(root)
        media = {}
        for lesson in self.lessons:
            media[lesson.id] = {
                "video.synth.json": json.dumps(self.scripts[lesson.video_ref], indent=1),
                "audio.synth.json": json.dumps(self.scripts[lesson.audio_ref], indent=1),
            }
        write_corpus(root, self.lessons, media)
        np.savez_compressed(root / "emotion_corpus.npz", embeddings=self.emotion_embeddings,
                            labels=np.array(self.emotion_labels))
        (root / "synth_spec.json").write_text(json.dumps(self.spec.to_dict(), indent=2), encoding="utf-8")
        return root


def _planted_signal(labels: np.ndarray, rho: float, rng) -> np.ndarray:
    noise = rng.standard_normal(len(labels))
    sd = labels.std()
    if sd == 0:
        return (noise - noise.mean()) / noise.std()
    z = (labels - labels.mean()) / sd
    noise = noise - noise.mean()
    noise = noise - (noise @ z) / (z @ z) * z
    noise = noise / noise.std()
    return rho * z + np.sqrt(max(0.0, 1.0 - rho * rho)) * noise


def _utterance_text(kind: str, rng) -> str:
    if kind == "pos":
        w = POSITIVE_WORDS[rng.integers(len(POSITIVE_WORDS))]
        frame = POSITIVE_FRAMES[rng.integers(len(POSITIVE_FRAMES))]
    elif kind == "neg":
        w = NEGATIVE_WORDS[rng.integers(len(NEGATIVE_WORDS))]
        frame = NEGATIVE_FRAMES[rng.integers(len(NEGATIVE_FRAMES))]
    else:
        return NEUTRAL_LINES[rng.integers(len(NEUTRAL_LINES))]
    return frame.format(w=w, W=w.capitalize())


def _speaker(rng) -> str:
    if rng.random() < 0.6:
        return "L"
    return f"S{rng.integers(1, 26):02d}"


def _normalize(p):
    p = np.clip(np.asarray(p, dtype=float), 1e-4, None)
    return (p / p.sum()).tolist()


def generate_synthetic_corpus(spec: SynthSpec = SynthSpec()) -> SyntheticCorpus:
    rng = np.random.default_rng(spec.seed)
    duration = spec.segments_per_lesson * SEGMENT_LENGTH
    bounds = segment_bounds(duration)
    lesson_ids = [f"T{i:03d}" for i in range(spec.n_lessons)]
    raters = [f"R{i:02d}" for i in range(spec.n_raters)]

    # latent warmth and ratings
    latent, ratings, lesson_raters = {}, {}, {}
    shared = np.sqrt(spec.lesson_share)
    own = np.sqrt(1.0 - spec.lesson_share)
    for lid in lesson_ids:
        lz = rng.standard_normal()
        pair = rng.choice(len(raters), size=2, replace=False)
        lesson_raters[lid] = [raters[i] for i in sorted(pair)]
        for idx in range(len(bounds)):
            sid = segment_id(lid, idx)
            latent[sid] = spec.latent_mean + spec.latent_sd * (shared * lz + own * rng.standard_normal())
            ratings[sid] = [
                (r, int(np.clip(np.rint(latent[sid] + spec.rater_noise * rng.standard_normal()), 1, 4)))
                for r in lesson_raters[lid]
            ]
    ids = list(latent)
    means = np.array([np.mean([v for _, v in ratings[s]]) for s in ids])
    signal_arr = _planted_signal(means, spec.target_corr, rng)
    signal = dict(zip(ids, signal_arr.tolist()))

    lessons, scripts = [], {}
    for lid in lesson_ids:
        utterances, vspans, aspans = [], [], []
        by_segment = {}
        for idx, (start, end) in enumerate(bounds):
            sid = segment_id(lid, idx)
            s = signal[sid]
            minutes = (end - start) / 60.0
            n_pos = max(0, int(round(minutes * (spec.pos_per_min + spec.pos_slope * s))))
            n_neg = int(rng.poisson(minutes * spec.neg_per_min))
            n_neu = int(rng.poisson(minutes * spec.neu_per_min))
            kinds = ["pos"] * n_pos + ["neg"] * n_neg + ["neu"] * n_neu
            times = np.sort(rng.integers(int(start), int(end), size=len(kinds)))
            order = rng.permutation(len(kinds))
            for t, j in zip(times, order):
                utterances.append(Utterance(float(t), _speaker(rng), _utterance_text(kinds[j], rng)))
            by_segment[idx] = ratings[sid]

            valence = float(np.clip(0.05 + 0.04 * s + 0.12 * rng.standard_normal(), -1, 1))
            arousal = float(np.clip(0.10 + 0.08 * rng.standard_normal(), -1, 1))
            happy = 0.25 + 0.02 * s + 0.06 * rng.standard_normal()
            face_probs = _normalize([0.5, happy, 0.1, 0.1, 0.05])
            vspans.append({"start": start, "end": end, "valence": valence, "arousal": arousal,
                           "probs": face_probs, "max_faces": 4, "jitter": 0.2, "decoy_rate": 0.1})

            speech = np.array([0.08, 0.12, 0.04, 0.04, 0.18, 0.08, 0.46])
            speech[SPEECH_EMOTIONS.index("happiness")] += 0.06 * s + 0.10 * rng.standard_normal()
            speech[SPEECH_EMOTIONS.index("anger")] -= 0.03 * s + 0.06 * rng.standard_normal()
            aspans.append({"start": start, "end": end, "probs": _normalize(speech)})
        vref, aref = f"synth://{lid}/video", f"synth://{lid}/audio"
        scripts[vref] = {"version": 1, "id": vref, "spans": vspans}
        scripts[aref] = {"version": 1, "id": aref, "spans": aspans, "centroid_seed": spec.centroid_seed,
                         "noise": spec.audio_noise}
        utterances.sort(key=lambda u: u.start_time)
        lessons.append(LessonRecord(lid, duration, tuple(utterances), vref, aref, by_segment))

    X, labels = emotion_corpus(spec.emotion_corpus_size, seed=spec.seed + 1,
                               centroid_seed=spec.centroid_seed, noise=spec.audio_noise)
    return SyntheticCorpus(spec, lessons, scripts, signal, latent, X, labels)
