"""Shapley feature attribution for trained regressors.

Absent features take their values from a background set (the fold's training
rows), so the value of a coalition S for target x is the mean model output
over background rows b with x's values pasted into the columns in S. The
estimator samples feature orderings in antithetic pairs and averages the
marginal contributions along each ordering; every ordering's contributions
telescope to ``f(x) - mean f(b)``, so efficiency holds per sample.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .datamodel import FEATURE_NAMES
from .errors import EmptyBackground

DEFAULT_BUDGET = 64
BACKGROUND_CAP = 100
EXACT_MAX_FEATURES = 10
_CHUNK_ROWS = 200_000


@dataclass
class AttributionRow:
    segment: str
    fold: Optional[int]
    values: np.ndarray  # one attribution per feature
    base: float
    prediction: float
    features: np.ndarray = field(default=None)  # the explained row
    residual: float = 0.0


def _predictor(model, standardizer=None) -> Callable[[np.ndarray], np.ndarray]:
    if hasattr(model, "predict_values"):
        return model.predict_values
    if standardizer is not None:
        return lambda X: np.asarray(model.predict(standardizer.transform(X)), dtype=float)
    if hasattr(model, "predict"):
        return lambda X: np.asarray(model.predict(X), dtype=float)
    return lambda X: np.asarray(model(X), dtype=float)


def attribute(
    model,
    background,
    target,
    budget: int = DEFAULT_BUDGET,
    seed: int = 0,
    standardizer=None,
    segment: str = "",
    fold: Optional[int] = None,
) -> AttributionRow:
    """Sampled Shapley values of ``model`` at ``target``.

    ``model`` may be a :class:`~ewscore.predict.TrainedModel`, an estimator
    (optionally with ``standardizer``) or a plain callable on row arrays.
    ``budget`` is the number of sampled feature orderings.
    """
    f = _predictor(model, standardizer)
    bg = np.atleast_2d(np.asarray(background, dtype=float))
    if bg.size == 0 or len(bg) == 0:
        raise EmptyBackground("attribution needs at least one background row")
    x = np.asarray(target, dtype=float).ravel()
    m = x.shape[0]
    if bg.shape[1] != m:
        raise ValueError(f"background has {bg.shape[1]} columns, target has {m}")
    if budget < 2 * m:
        raise ValueError(f"sampling budget {budget} below 2 x {m} features")

    rng = np.random.default_rng(seed)
    n_pairs = (budget + 1) // 2
    perms = []
    for _ in range(n_pairs):
        p = rng.permutation(m)
        perms.extend((p, p[::-1]))
    perms = perms[:budget]

    base = float(np.mean(f(bg)))
    prediction = float(np.asarray(f(x[None, :]))[0])
    phi = np.zeros(m)
    nb = len(bg)
    per_chunk = max(1, _CHUNK_ROWS // ((m + 1) * nb))
    for start in range(0, len(perms), per_chunk):
        block = perms[start:start + per_chunk]
        # rows: for each ordering, coalitions of size 0..m, each over all background rows
        X = np.broadcast_to(bg, (len(block), m + 1, nb, m)).copy()
        for i, p in enumerate(block):
            for k, j in enumerate(p):
                X[i, k + 1:, :, j] = x[j]
        v = f(X.reshape(-1, m)).reshape(len(block), m + 1, nb).mean(axis=2)
        gains = np.diff(v, axis=1)
        for i, p in enumerate(block):
            phi[p] += gains[i]
    phi /= len(perms)
    residual = abs(base + phi.sum() - prediction)
    return AttributionRow(segment, fold, phi, base, prediction, x.copy(), float(residual))


def exact_shapley(model, background, target, standardizer=None) -> tuple[np.ndarray, float]:
    """Shapley values by enumerating all coalitions (test oracle, <= 10 features)."""
    f = _predictor(model, standardizer)
    bg = np.atleast_2d(np.asarray(background, dtype=float))
    if len(bg) == 0:
        raise EmptyBackground("attribution needs at least one background row")
    x = np.asarray(target, dtype=float).ravel()
    m = x.shape[0]
    if m > EXACT_MAX_FEATURES:
        raise ValueError(f"exact enumeration limited to {EXACT_MAX_FEATURES} features")
    value = {}
    for mask in range(1 << m):
        X = bg.copy()
        for j in range(m):
            if mask >> j & 1:
                X[:, j] = x[j]
        value[mask] = float(np.mean(f(X)))
    phi = np.zeros(m)
    for j in range(m):
        for mask in range(1 << m):
            if mask >> j & 1:
                continue
            s = bin(mask).count("1")
            w = math.factorial(s) * math.factorial(m - s - 1) / math.factorial(m)
            phi[j] += w * (value[mask | (1 << j)] - value[mask])
    return phi, value[0]


def select_background(rows, labels=None, cap: int = BACKGROUND_CAP, seed: int = 0) -> np.ndarray:
    """At most ``cap`` rows, sampled proportionally within rounded-label strata."""
    X = np.asarray(rows, dtype=float)
    if len(X) <= cap:
        return X
    rng = np.random.default_rng(seed)
    if labels is None:
        return X[np.sort(rng.choice(len(X), cap, replace=False))]
    strata = np.floor(np.asarray(labels, dtype=float) + 0.5)
    keys = np.unique(strata)
    quota = {k: cap * np.sum(strata == k) / len(X) for k in keys}
    take = {k: int(math.floor(q)) for k, q in quota.items()}
    # largest remainders fill the gap up to cap
    for k in sorted(keys, key=lambda k: (-(quota[k] - take[k]), k))[: cap - sum(take.values())]:
        take[k] += 1
    chosen = []
    for k in keys:
        idx = np.flatnonzero(strata == k)
        chosen.extend(rng.choice(idx, take[k], replace=False))
    return X[np.sort(chosen)]


def summarize(rows: Sequence[AttributionRow], names: Sequence[str] = FEATURE_NAMES, top: Optional[int] = None):
    """Rank features by summed |attribution| over all rows (all folds pooled)."""
    if not rows:
        raise ValueError("no attribution rows to summarize")
    A = np.stack([r.values for r in rows])
    importance = np.abs(A).sum(axis=0)
    order = sorted(range(len(names)), key=lambda j: (-importance[j], j))
    if top is not None:
        order = order[:top]
    ranking = []
    for rank, j in enumerate(order, start=1):
        pairs = [
            [None if r.features is None else float(r.features[j]), float(r.values[j])]
            for r in rows
        ]
        ranking.append({
            "rank": rank,
            "feature": names[j],
            "importance": float(importance[j]),
            "mean_attribution": float(A[:, j].mean()),
            "dependence": pairs,
        })
    return {"n_rows": len(rows), "ranking": ranking}


def write_attributions(path, rows: Sequence[AttributionRow], names: Sequence[str] = FEATURE_NAMES):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["segment_id", "fold"] + [f"shap.{n}" for n in names] + ["base", "prediction", "residual"]
                        + [f"value.{n}" for n in names])
        for r in rows:
            feats = r.features if r.features is not None else [float("nan")] * len(names)
            writer.writerow([r.segment, "" if r.fold is None else r.fold]
                            + [repr(float(v)) for v in r.values]
                            + [repr(r.base), repr(r.prediction), repr(r.residual)]
                            + [repr(float(v)) for v in feats])


def read_attributions(path, names: Sequence[str] = FEATURE_NAMES) -> list[AttributionRow]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out.append(AttributionRow(
                segment=row["segment_id"],
                fold=int(row["fold"]) if row["fold"] else None,
                values=np.array([float(row[f"shap.{n}"]) for n in names]),
                base=float(row["base"]),
                prediction=float(row["prediction"]),
                features=np.array([float(row[f"value.{n}"]) for n in names]),
                residual=float(row["residual"]),
            ))
    return out


def plot_summary(rows: Sequence[AttributionRow], path, names: Sequence[str] = FEATURE_NAMES, top: int = 10):
    """Beeswarm-style summary plot (needs matplotlib)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    summary = summarize(rows, names, top)
    A = np.stack([r.values for r in rows])
    F = np.stack([r.features for r in rows])
    fig, ax = plt.subplots(figsize=(7, 0.45 * len(summary["ranking"]) + 1.2))
    rng = np.random.default_rng(0)
    for pos, entry in enumerate(reversed(summary["ranking"])):
        j = list(names).index(entry["feature"])
        col = F[:, j]
        span = np.ptp(col) or 1.0
        ax.scatter(A[:, j], pos + rng.uniform(-0.25, 0.25, len(A)), c=(col - col.min()) / span,
                   cmap="coolwarm", s=10)
    ax.set_yticks(range(len(summary["ranking"])))
    ax.set_yticklabels([e["feature"] for e in reversed(summary["ranking"])])
    ax.axvline(0, color="grey", lw=0.8)
    ax.set_xlabel("attribution (impact on predicted score)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def summary_json(summary: dict) -> str:
    return json.dumps(summary, indent=2, sort_keys=True)
