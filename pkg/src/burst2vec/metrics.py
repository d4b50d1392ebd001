"""Evaluation metrics, significance tests, ensembling, and probes.

Everything here is pure numpy on concrete predictions; no autodiff graphs.
The headline score is the harmonic-style combination of emotion concordance,
country recall, and age error:

    score = 3 / (1/ccc + 1/uar + mae_years)

MAE enters directly (not reciprocally) because lower is better; the three
addends are the reciprocals of (ccc, uar, 1/mae). The score is undefined
(returned as None, never clamped) when ccc or uar is nonpositive.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import chdtrc, stdtr

from .data import denormalize_age

CCC_DENOM_EPS = 1e-12


# -- core scalar metrics ------------------------------------------------------

def ccc_score(pred: np.ndarray, ref: np.ndarray):
    """Per-column concordance correlation and its mean, population moments.

    Columns with a degenerate denominator score 0. Mirrors the training
    loss so reported numbers and optimized numbers agree.
    """
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.ndim == 1:
        pred = pred[:, None]
        ref = ref[:, None]
    if pred.shape != ref.shape or pred.ndim != 2:
        raise ValueError(f"ccc_score expects matching (B, K), got {pred.shape} vs {ref.shape}")
    if pred.shape[0] < 2:
        raise ValueError("ccc_score needs at least 2 samples")
    mean_p = pred.mean(axis=0)
    mean_r = ref.mean(axis=0)
    var_p = pred.var(axis=0)
    var_r = ref.var(axis=0)
    cov = ((pred - mean_p) * (ref - mean_r)).mean(axis=0)
    denom = var_p + var_r + (mean_p - mean_r) ** 2
    per = np.where(denom >= CCC_DENOM_EPS, 2.0 * cov / np.where(denom >= CCC_DENOM_EPS, denom, 1.0), 0.0)
    return per, float(per.mean())


def uar(predicted: np.ndarray, reference: np.ndarray, n_classes: int) -> float:
    """Unweighted average recall over the classes present in the reference."""
    predicted = np.asarray(predicted)
    reference = np.asarray(reference)
    if predicted.shape != reference.shape or predicted.size == 0:
        raise ValueError("uar needs matching nonempty label arrays")
    if predicted.min() < 0 or predicted.max() >= n_classes or reference.max() >= n_classes:
        raise ValueError(f"label outside [0, {n_classes})")
    recalls = []
    for c in range(n_classes):
        mask = reference == c
        if not mask.any():
            continue  # absent classes are excluded from the mean
        recalls.append(float((predicted[mask] == c).mean()))
    return float(np.mean(recalls))


def mae_years(pred_norm: np.ndarray, true_years: np.ndarray,
              age_min: float, age_max: float) -> float:
    """Denormalize 0-1 age predictions to years, then mean absolute error."""
    if age_max <= age_min:
        raise ValueError("empty age range")
    pred_years = denormalize_age(np.asarray(pred_norm, dtype=np.float64), age_min, age_max)
    return float(np.abs(pred_years - np.asarray(true_years, dtype=np.float64)).mean())


def multitask_score(ccc: float, country_uar: float, age_mae: float) -> float | None:
    """Combined score; None when ccc or uar is nonpositive (undefined)."""
    if ccc <= 0.0 or country_uar <= 0.0:
        return None
    if age_mae < 0.0:
        raise ValueError("mae must be nonnegative")
    return 3.0 / (1.0 / ccc + 1.0 / country_uar + age_mae)


# -- significance tests ------------------------------------------------------

def ttest_ind(a, b) -> tuple[float, float]:
    """Two-sided pooled-variance (equal-variance) two-sample t test."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValueError("each sample needs at least 2 values")
    na, nb = a.size, b.size
    df = na + nb - 2
    pooled = ((na - 1) * a.var(ddof=1) + (nb - 1) * b.var(ddof=1)) / df
    diff = a.mean() - b.mean()
    if pooled <= 0.0:
        if diff == 0.0:
            return 0.0, 1.0
        return math.copysign(math.inf, diff), 0.0
    t = diff / math.sqrt(pooled * (1.0 / na + 1.0 / nb))
    p = 2.0 * float(stdtr(df, -abs(t)))
    return float(t), p


def cochran_q(correct: np.ndarray) -> tuple[float, int, float]:
    """Cochran's Q over an (N items, k systems) 0/1 correctness matrix.

    Returns (Q, df=k-1, p from the chi-square tail). A degenerate
    denominator (all systems agree on every item) gives Q=0, p=1. At k=2
    this is McNemar's statistic without continuity correction.
    """
    correct = np.asarray(correct)
    if correct.ndim != 2 or correct.shape[1] < 2:
        raise ValueError("need an (N, k>=2) matrix")
    if not np.isin(correct, (0, 1)).all():
        raise ValueError("matrix must be 0/1")
    correct = correct.astype(np.float64)
    k = correct.shape[1]
    col = correct.sum(axis=0)
    row = correct.sum(axis=1)
    denom = k * row.sum() - (row ** 2).sum()
    df = k - 1
    if denom <= 0.0:
        return 0.0, df, 1.0
    q = k * (k - 1) * ((col - col.mean()) ** 2).sum() / denom
    return float(q), df, float(chdtrc(df, q))


# -- prediction sets and reports ------------------------------------------------

@dataclass
class PredictionSet:
    """Per-clip inference outputs: emotion intensities in [0,1], age in
    years, country class probabilities."""

    clip_ids: tuple
    emotions: np.ndarray  # (B, 10)
    age_years: np.ndarray  # (B,)
    country_probs: np.ndarray  # (B, C)

    def validate(self):
        b = len(self.clip_ids)
        if len(set(self.clip_ids)) != b:
            raise ValueError("duplicate clip ids")
        if self.emotions.shape[0] != b or self.age_years.shape != (b,) \
                or self.country_probs.shape[0] != b:
            raise ValueError("prediction arrays disagree on batch size")
        sums = self.country_probs.sum(axis=1)
        if np.abs(sums - 1.0).max() > 1e-6:
            raise ValueError("country probability rows must sum to 1")

    @property
    def country_classes(self) -> np.ndarray:
        return self.country_probs.argmax(axis=1)


def write_predictions(path, preds: PredictionSet):
    preds.validate()
    n_e = preds.emotions.shape[1]
    n_c = preds.country_probs.shape[1]
    header = (["clip_id"] + [f"e{i}" for i in range(n_e)] + ["age_years"]
              + [f"p{i}" for i in range(n_c)])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for i, cid in enumerate(preds.clip_ids):
        row = [cid] + [repr(float(v)) for v in preds.emotions[i]] \
            + [repr(float(preds.age_years[i]))] \
            + [repr(float(v)) for v in preds.country_probs[i]]
        w.writerow(row)
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(buf.getvalue())


def read_predictions(path) -> PredictionSet:
    with open(path, encoding="utf-8", newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise ValueError(f"{path}: empty prediction file")
    header = rows[0]
    n_e = sum(1 for h in header if h.startswith("e") and h[1:].isdigit())
    n_c = sum(1 for h in header if h.startswith("p") and h[1:].isdigit())
    expect = (["clip_id"] + [f"e{i}" for i in range(n_e)] + ["age_years"]
              + [f"p{i}" for i in range(n_c)])
    if header != expect or n_e == 0 or n_c == 0:
        raise ValueError(f"{path}: malformed prediction header")
    ids, emo, age, probs = [], [], [], []
    for row in rows[1:]:
        if len(row) != len(header):
            raise ValueError(f"{path}: ragged row for id {row[0] if row else '?'}")
        ids.append(row[0])
        vals = [float(v) for v in row[1:]]
        emo.append(vals[:n_e])
        age.append(vals[n_e])
        probs.append(vals[n_e + 1:])
    preds = PredictionSet(tuple(ids), np.array(emo, dtype=np.float64),
                          np.array(age, dtype=np.float64),
                          np.array(probs, dtype=np.float64))
    preds.validate()
    return preds


def _mean_about_first(arrays: list) -> np.ndarray:
    """Mean computed as first + mean(deltas), so k identical inputs return
    the first bitwise (plain summation would round twice)."""
    first = np.asarray(arrays[0], dtype=np.float64)
    delta = np.zeros_like(first)
    for a in arrays[1:]:
        delta += np.asarray(a, dtype=np.float64) - first
    return first + delta / len(arrays)


def ensemble(sets: list[PredictionSet]) -> PredictionSet:
    """Average emotion intensities, ages, and country softmax rows across
    models; the ensemble class is the argmax of the mean row."""
    if not sets:
        raise ValueError("need at least one prediction set")
    first = sets[0]
    for s in sets[1:]:
        if s.clip_ids != first.clip_ids:
            raise ValueError("prediction sets cover different clips")
        if s.country_probs.shape != first.country_probs.shape:
            raise ValueError("prediction sets disagree on class count")
    out = PredictionSet(
        first.clip_ids,
        _mean_about_first([s.emotions for s in sets]),
        _mean_about_first([s.age_years for s in sets]),
        _mean_about_first([s.country_probs for s in sets]),
    )
    out.validate()
    return out


@dataclass
class ReferenceLabels:
    emotions: np.ndarray  # (B, 10) in [0, 1]
    age_years: np.ndarray  # (B,)
    country: np.ndarray  # (B,) int

    @classmethod
    def from_records(cls, records) -> "ReferenceLabels":
        return cls(
            emotions=np.array([r.emotions for r in records], dtype=np.float64),
            age_years=np.array([r.age for r in records], dtype=np.float64),
            country=np.array([r.country for r in records], dtype=np.int64),
        )


@dataclass
class MetricsReport:
    per_emotion_ccc: tuple
    emotion_ccc: float
    country_uar: float
    age_mae_years: float
    score: float | None  # combined multitask score; None when undefined
    sample_count: int
    probes: dict = field(default_factory=dict)

    def validate(self):
        if not (-1.0 - 1e-9 <= self.emotion_ccc <= 1.0 + 1e-9):
            raise ValueError("emotion ccc outside [-1, 1]")
        if not (0.0 <= self.country_uar <= 1.0):
            raise ValueError("uar outside [0, 1]")
        if self.age_mae_years < 0.0:
            raise ValueError("negative mae")

    def to_json(self) -> str:
        payload = {
            "per_emotion_ccc": [float(v) for v in self.per_emotion_ccc],
            "emotion_ccc": float(self.emotion_ccc),
            "country_uar": float(self.country_uar),
            "age_mae_years": float(self.age_mae_years),
            "score": None if self.score is None else float(self.score),
            "sample_count": int(self.sample_count),
            "probes": {k: float(v) for k, v in sorted(self.probes.items())},
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        d = json.loads(text)
        return cls(tuple(d["per_emotion_ccc"]), d["emotion_ccc"], d["country_uar"],
                   d["age_mae_years"], d["score"], d["sample_count"],
                   dict(d.get("probes", {})))


def report_from_predictions(preds: PredictionSet, refs: ReferenceLabels,
                            probes: dict | None = None) -> MetricsReport:
    preds.validate()
    if preds.emotions.shape != refs.emotions.shape:
        raise ValueError("emotion shape mismatch between predictions and references")
    per, mean_ccc = ccc_score(preds.emotions, refs.emotions)
    country_uar = uar(preds.country_classes, refs.country, preds.country_probs.shape[1])
    mae = float(np.abs(preds.age_years - refs.age_years).mean())
    report = MetricsReport(
        per_emotion_ccc=tuple(float(v) for v in per),
        emotion_ccc=mean_ccc,
        country_uar=country_uar,
        age_mae_years=mae,
        score=multitask_score(mean_ccc, country_uar, mae),
        sample_count=len(preds.clip_ids),
        probes=dict(probes or {}),
    )
    report.validate()
    return report


# -- per-sample statistics for significance testing ------------------------------

def emotion_sample_errors(preds: PredictionSet, refs: ReferenceLabels) -> np.ndarray:
    """Per-clip mean squared emotion error; feeds the t test. CCC itself is
    set-level, so a per-sample proxy is required."""
    return ((preds.emotions - refs.emotions) ** 2).mean(axis=1)


def age_sample_errors(preds: PredictionSet, refs: ReferenceLabels) -> np.ndarray:
    return np.abs(preds.age_years - refs.age_years)


def country_correctness(preds: PredictionSet, refs: ReferenceLabels) -> np.ndarray:
    return (preds.country_classes == refs.country).astype(np.int64)


# -- linear probe ------------------------------------------------------

def linear_probe(representations: np.ndarray, labels: np.ndarray, n_classes: int,
                 seed: int = 0, train_frac: float = 0.8, steps: int = 400,
                 lr: float = 0.5, l2: float = 1e-4) -> float:
    """Held-out accuracy of a multinomial linear classifier on frozen
    representations. Deliberately linear: a stronger probe would measure its
    own capacity, not the representation's content.
    """
    x = np.asarray(representations, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or y.shape != (x.shape[0],):
        raise ValueError("need (B, d) representations and (B,) labels")
    b = x.shape[0]
    if b < 10 * n_classes:
        raise ValueError(f"probe needs at least {10 * n_classes} samples, got {b}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(b)
    n_train = int(round(train_frac * b))
    tr, te = order[:n_train], order[n_train:]
    if len(np.unique(y[tr])) < n_classes:
        raise ValueError("a class is absent from the probe train split")
    mu = x[tr].mean(axis=0)
    sd = x[tr].std(axis=0) + 1e-8
    xt = np.hstack([(x[tr] - mu) / sd, np.ones((len(tr), 1))])
    xv = np.hstack([(x[te] - mu) / sd, np.ones((len(te), 1))])
    onehot = np.zeros((len(tr), n_classes))
    onehot[np.arange(len(tr)), y[tr]] = 1.0
    w = np.zeros((xt.shape[1], n_classes))
    for _ in range(steps):
        z = xt @ w
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        grad = xt.T @ (p - onehot) / len(tr)
        grad[:-1] += l2 * w[:-1]  # no penalty on the bias row
        w -= lr * grad
    predicted = (xv @ w).argmax(axis=1)
    return float((predicted == y[te]).mean())
