"""Lesson-independent stratified folds, Pearson evaluation and rater reliability."""

from __future__ import annotations

import math
import random
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
from scipy import stats

from .datamodel import Segment, mean_human_rating
from .errors import ConstantInput, InsufficientData, NoDoubleRatedSegments, TooFewLessons
from .predict import round_score
from .synthetic import SynthSpec, SyntheticCorpus, generate_synthetic_corpus  # noqa: F401

UNRATED = 0


@dataclass
class FoldAssignment:
    k: int
    fold_of: dict  # segment id -> fold index
    stratum_of: dict  # segment id -> rounded mean score (0 if unrated)
    lesson_fold: dict  # lesson id -> fold index
    seed: int = 0

    def test_ids(self, fold: int) -> list[str]:
        return sorted(s for s, f in self.fold_of.items() if f == fold)

    def train_ids(self, fold: int) -> list[str]:
        return sorted(s for s, f in self.fold_of.items() if f != fold)

    def stratum_deviation(self) -> float:
        """Largest |fold proportion - global proportion| over folds and strata."""
        total = Counter(self.stratum_of.values())
        n = sum(total.values())
        worst = 0.0
        for f in range(self.k):
            ids = self.test_ids(f)
            counts = Counter(self.stratum_of[s] for s in ids)
            for s, c in total.items():
                worst = max(worst, abs(counts.get(s, 0) / len(ids) - c / n))
        return worst

    def to_dict(self):
        return {"k": self.k, "seed": self.seed, "lesson_fold": dict(sorted(self.lesson_fold.items()))}


def _stratum(segment: Segment) -> int:
    if not segment.ratings:
        return UNRATED
    return round_score(mean_human_rating(segment).value)


def make_folds(segments: Iterable[Segment], k: int = 5, seed: int = 0, anneal_steps: int = 4000) -> FoldAssignment:
    """Assign whole lessons to ``k`` folds, balancing fold sizes and score strata.

    Lessons are placed largest first (ties broken by a seeded shuffle) into the
    fold that least increases the squared gap between per-fold stratum counts
    and their targets ``N * p_s / k``; single-lesson moves and pairwise swaps
    then polish the assignment until no move lowers that objective. A seeded
    annealing pass over moves and swaps then lowers the largest gap between a
    fold's stratum proportions and the global ones, keeping fold sizes within
    one lesson of ``N / k``; the best assignment seen is kept.
    """
    segments = list(segments)
    by_lesson = defaultdict(list)
    stratum_of = {}
    for seg in segments:
        by_lesson[seg.lesson_id].append(seg.id)
        stratum_of[seg.id] = _stratum(seg)
    lessons = sorted(by_lesson)
    if len(lessons) < k:
        raise TooFewLessons(f"{len(lessons)} lessons cannot fill {k} folds")
    strata = sorted(set(stratum_of.values()))
    col = {s: j for j, s in enumerate(strata)}
    profile = {}
    for lesson in lessons:
        vec = np.zeros(len(strata))
        for sid in by_lesson[lesson]:
            vec[col[stratum_of[sid]]] += 1
        profile[lesson] = vec
    target = sum(profile.values()) / k

    p_global = target / target.sum()
    rng = random.Random(seed)
    order = list(lessons)
    rng.shuffle(order)
    order.sort(key=lambda les: -len(by_lesson[les]))
    assign, counts = _greedy(order, profile, target, k)
    _polish(assign, profile, counts, target, k)
    _anneal(assign, profile, counts, p_global, k, rng, steps=anneal_steps)
    fold_of = {sid: assign[les] for les in lessons for sid in by_lesson[les]}
    return FoldAssignment(k, fold_of, stratum_of, dict(assign), seed)


def _greedy(order, profile, target, k):
    counts = np.zeros_like(target, shape=(k, len(target)))
    assign = {}
    for lesson in order:
        a = profile[lesson]
        delta = ((counts + a - target) ** 2).sum(axis=1) - ((counts - target) ** 2).sum(axis=1)
        sizes = counts.sum(axis=1)
        # fill empty folds first so every fold gets a lesson
        empty = sizes == 0
        remaining = len(order) - len(assign)
        if empty.sum() >= remaining:
            delta = np.where(empty, delta, np.inf)
        best = min(range(k), key=lambda f: (delta[f], sizes[f], f))
        assign[lesson] = best
        counts[best] += a
    return assign, counts


def _polish(assign, profile, counts, target, k, max_rounds=100):
    lessons = sorted(assign)
    n_in = Counter(assign.values())

    def cost(c):
        return float(((c - target) ** 2).sum())

    for _ in range(max_rounds):
        improved = False
        for les in lessons:
            src = assign[les]
            if n_in[src] == 1:
                continue
            for dst in range(k):
                if dst == src:
                    continue
                before = cost(counts[[src, dst]])
                trial = counts[[src, dst]].copy()
                trial[0] -= profile[les]
                trial[1] += profile[les]
                if cost(trial) < before - 1e-9:
                    counts[src], counts[dst] = trial
                    assign[les] = dst
                    n_in[src] -= 1
                    n_in[dst] += 1
                    improved = True
                    break
        for i, a in enumerate(lessons):
            for b in lessons[i + 1:]:
                fa, fb = assign[a], assign[b]
                if fa == fb:
                    continue
                diff = profile[b] - profile[a]
                before = cost(counts[[fa, fb]])
                trial = counts[[fa, fb]].copy()
                trial[0] += diff
                trial[1] -= diff
                if cost(trial) < before - 1e-9:
                    counts[fa], counts[fb] = trial
                    assign[a], assign[b] = fb, fa
                    improved = True
        if not improved:
            break


def _proportion_cost(counts, p_global, size_limit=math.inf):
    sizes = counts.sum(axis=1, keepdims=True)
    if np.any(sizes == 0) or np.abs(sizes - sizes.mean()).max() > size_limit + 1e-9:
        return (math.inf, math.inf)
    gap = counts / sizes - p_global
    return (round(float(np.abs(gap).max()), 12), round(float((gap ** 2).sum()), 12))


def _anneal(assign, profile, counts, p_global, k, rng, steps=4000, t0=0.05):
    lessons = sorted(assign)
    if len(lessons) <= k or steps <= 0:
        return
    sizes = counts.sum(axis=1)
    limit = max(max(p.sum() for p in profile.values()), float(np.abs(sizes - sizes.mean()).max()))

    def energy(c):
        worst, spread = _proportion_cost(c, p_global, limit)
        return worst + 0.1 * spread

    current = energy(counts)
    best, best_assign = _proportion_cost(counts, p_global, limit), dict(assign)
    for step in range(steps):
        temp = t0 * (1 - step / steps) + 1e-6
        a = lessons[rng.randrange(len(lessons))]
        fa = assign[a]
        if rng.random() < 0.5:
            fb = rng.randrange(k - 1)
            fb += fb >= fa
            b, diff = None, profile[a]
        else:
            b = lessons[rng.randrange(len(lessons))]
            fb = assign[b]
            if fb == fa:
                continue
            diff = profile[a] - profile[b]
        counts[fa] -= diff
        counts[fb] += diff
        e = energy(counts)
        if e <= current or rng.random() < math.exp((current - e) / temp):
            current = e
            assign[a] = fb
            if b is not None:
                assign[b] = fa
            c = _proportion_cost(counts, p_global, limit)
            if c < best:
                best, best_assign = c, dict(assign)
        else:
            counts[fa] += diff
            counts[fb] -= diff
    assign.update(best_assign)
    counts[:] = 0
    for les, f in assign.items():
        counts[f] += profile[les]


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("pearson needs two 1D sequences of equal length")
    if len(x) < 3:
        raise ValueError("pearson needs at least 3 pairs")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx <= 1e-24 * max(1.0, float(x @ x)) or syy <= 1e-24 * max(1.0, float(y @ y)):
        raise ConstantInput()
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def pearson_pvalue(r: float, n: int) -> float:
    """Two-sided p-value of r under the null of zero correlation (t test, n-2 df)."""
    if n < 3:
        return float("nan")
    if abs(r) >= 1.0:
        return 0.0
    t = r * math.sqrt((n - 2) / (1.0 - r * r))
    return float(2.0 * stats.t.sf(abs(t), n - 2))


def standard_error(values: Sequence[float]) -> float:
    """Sample standard deviation over units divided by sqrt(unit count)."""
    v = np.asarray(values, dtype=float)
    if len(v) < 2:
        return 0.0
    return float(v.std(ddof=1) / math.sqrt(len(v)))


@dataclass
class CorrelationReport:
    units: list = field(default_factory=list)  # dicts: id, r, p, n
    exclusions: list = field(default_factory=list)  # dicts: id, reason

    @property
    def rs(self) -> list[float]:
        return [u["r"] for u in self.units]

    @property
    def mean_r(self) -> float:
        return float(np.mean(self.rs)) if self.units else float("nan")

    @property
    def se(self) -> float:
        return standard_error(self.rs)

    @property
    def count(self) -> int:
        return len(self.units)

    def to_dict(self):
        return {
            "mean_r": _finite(self.mean_r),
            "se": _finite(self.se),
            "count": self.count,
            "units": self.units,
            "exclusions": self.exclusions,
        }


def _finite(v):
    return None if v is None or (isinstance(v, float) and math.isnan(v)) else round(float(v), 12)


def evaluate_source(
    estimates_per_fold: Sequence[Mapping[str, float]],
    human_per_fold: Sequence[Mapping[str, float]],
) -> CorrelationReport:
    """Per-fold Pearson r between estimates and human means, averaged over folds.

    Segments without an estimate are left out of their fold and listed in the
    report's exclusions. A fold with fewer than 3 scored segments raises
    :class:`InsufficientData`; a constant fold raises :class:`ConstantInput`.
    """
    report = CorrelationReport()
    for fold, (est, human) in enumerate(zip(estimates_per_fold, human_per_fold)):
        ids = sorted(s for s in human if s in est)
        for s in sorted(set(human) - set(est)):
            report.exclusions.append({"id": s, "fold": fold, "reason": "no estimate"})
        if len(ids) < 3:
            raise InsufficientData(f"fold {fold}: {len(ids)} scored segments, need >= 3")
        x = [est[s] for s in ids]
        y = [human[s] for s in ids]
        try:
            r = pearson(x, y)
        except ConstantInput as exc:
            raise ConstantInput(str(exc), fold=fold) from exc
        report.units.append({"id": fold, "r": r, "p": pearson_pvalue(r, len(ids)), "n": len(ids)})
    return report


def leave_one_rater_out_irr(segments: Iterable[Segment], min_shared: int = 3) -> CorrelationReport:
    """Correlate each rater with the mean of their co-raters on shared segments."""
    pairs = defaultdict(lambda: ([], []))
    double = 0
    for seg in segments:
        if len(seg.ratings) < 2:
            continue
        double += 1
        for i, (rater, score) in enumerate(seg.ratings):
            others = [v for j, (_, v) in enumerate(seg.ratings) if j != i]
            xs, ys = pairs[rater]
            xs.append(score)
            ys.append(sum(others) / len(others))
    if double == 0:
        raise NoDoubleRatedSegments("no segment carries two or more ratings")
    report = CorrelationReport()
    for rater in sorted(pairs):
        xs, ys = pairs[rater]
        if len(xs) < min_shared:
            report.exclusions.append({"id": rater, "reason": f"{len(xs)} shared segments"})
            continue
        try:
            r = pearson(xs, ys)
        except ConstantInput:
            report.exclusions.append({"id": rater, "reason": "constant ratings"})
            continue
        report.units.append({"id": rater, "r": r, "p": pearson_pvalue(r, len(xs)), "n": len(xs)})
    return report


def human_means(segments: Iterable[Segment]) -> dict:
    return {s.id: mean_human_rating(s).value for s in segments if s.ratings}


def split_by_fold(values: Mapping[str, float], folds: FoldAssignment) -> list[dict]:
    out = [dict() for _ in range(folds.k)]
    for sid, v in values.items():
        f = folds.fold_of.get(sid)
        if f is not None:
            out[f][sid] = v
    return out
