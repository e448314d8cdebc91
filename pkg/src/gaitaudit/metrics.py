"""Imbalance-robust binary metrics and a seeded percentile bootstrap."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np


class UndefinedMetricError(ValueError):
    """Metric has no value on this input (e.g. a single-class sample)."""


class BootstrapInfeasibleError(RuntimeError):
    pass


@dataclass
class PredictionSet:
    trial_id: list[str]
    patient_id: list[str]
    label: np.ndarray
    score: np.ndarray

    def __post_init__(self):
        self.label = np.asarray(self.label, dtype=np.int64)
        self.score = np.asarray(self.score, dtype=np.float64)
        n = len(self.label)
        if not (len(self.trial_id) == len(self.patient_id) == len(self.score) == n):
            raise ValueError("PredictionSet columns have unequal lengths")
        if n and (self.score.min() < 0.0 or self.score.max() > 1.0):
            raise ValueError("scores must lie in [0, 1]")
        if not np.isin(self.label, (0, 1)).all():
            raise ValueError("labels must be 0/1")

    def __len__(self) -> int:
        return len(self.label)

    def save_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["trial_id", "patient_id", "label", "score"])
            for t, p, y, s in zip(self.trial_id, self.patient_id, self.label, self.score):
                w.writerow([t, p, int(y), format(float(s), ".17g")])

    @classmethod
    def load_csv(cls, path) -> "PredictionSet":
        with open(path, newline="", encoding="utf-8") as f:
            rows = list(csv.DictReader(f))
        return cls([r["trial_id"] for r in rows], [r["patient_id"] for r in rows],
                   np.array([int(r["label"]) for r in rows]), np.array([float(r["score"]) for r in rows]))


@dataclass
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass
class MetricWithCI:
    point: float
    ci_low: float
    ci_high: float
    n_bootstrap: int = 1000
    ci_level: float = 0.95

    def to_dict(self) -> dict:
        return {"point": self.point, "ci_low": self.ci_low, "ci_high": self.ci_high}


def sigmoid(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


# ---------------------------------------------------------------- ranking metrics


def _split_classes(labels, scores):
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    return scores[labels == 1], scores[labels == 0]


def roc_auc(labels, scores) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg), ties count one half."""
    pos, neg = _split_classes(labels, scores)
    if len(pos) == 0 or len(neg) == 0:
        raise UndefinedMetricError("ROC-AUC needs both classes")
    neg = np.sort(neg)
    below = np.searchsorted(neg, pos, side="left")
    at_or_below = np.searchsorted(neg, pos, side="right")
    # integer and half-integer counts stay exact in float64
    u = float(below.sum()) + 0.5 * float((at_or_below - below).sum())
    return u / (len(pos) * len(neg))


def pr_auc(labels, scores) -> float:
    """Average precision over descending score thresholds, tied scores as one block."""
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int((labels == 1).sum())
    if n_pos == 0:
        raise UndefinedMetricError("PR-AUC needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    tp = np.cumsum(y == 1)
    fp = np.cumsum(y == 0)
    # last index of each block of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    ap = 0.0
    prev_recall = 0.0
    for e in ends:
        recall = tp[e] / n_pos
        precision = tp[e] / (tp[e] + fp[e])
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return float(ap)


# ---------------------------------------------------------------- threshold metrics


def confusion(labels, scores, threshold: float = 0.5) -> ConfusionCounts:
    labels = np.asarray(labels)
    pred = np.asarray(scores, dtype=np.float64) >= threshold
    pos = labels == 1
    return ConfusionCounts(
        tp=int(np.sum(pred & pos)), fp=int(np.sum(pred & ~pos)),
        tn=int(np.sum(~pred & ~pos)), fn=int(np.sum(~pred & pos)),
    )


def sensitivity_of(c: ConfusionCounts) -> float:
    if c.tp + c.fn == 0:
        raise UndefinedMetricError("sensitivity undefined without positives")
    return c.tp / (c.tp + c.fn)


def specificity_of(c: ConfusionCounts) -> float:
    if c.tn + c.fp == 0:
        raise UndefinedMetricError("specificity undefined without negatives")
    return c.tn / (c.tn + c.fp)


def mcc_of(c: ConfusionCounts) -> float:
    den = (c.tp + c.fp) * (c.tp + c.fn) * (c.tn + c.fp) * (c.tn + c.fn)
    if den == 0:
        return 0.0
    return (c.tp * c.tn - c.fp * c.fn) / math.sqrt(den)


def scalar_metrics(c: ConfusionCounts) -> dict[str, float]:
    sens = sensitivity_of(c)
    spec = specificity_of(c)
    return {"balanced_accuracy": (sens + spec) / 2, "mcc": mcc_of(c), "sensitivity": sens, "specificity": spec}


def balanced_accuracy(labels, scores, threshold: float = 0.5) -> float:
    c = confusion(labels, scores, threshold)
    return (sensitivity_of(c) + specificity_of(c)) / 2


def mcc(labels, scores, threshold: float = 0.5) -> float:
    c = confusion(labels, scores, threshold)
    if c.tp + c.fn == 0 or c.tn + c.fp == 0:
        raise UndefinedMetricError("MCC on a single-class sample")
    return mcc_of(c)


def sensitivity(labels, scores, threshold: float = 0.5) -> float:
    return sensitivity_of(confusion(labels, scores, threshold))


def specificity(labels, scores, threshold: float = 0.5) -> float:
    return specificity_of(confusion(labels, scores, threshold))


# report column order
METRICS: dict[str, Callable] = {
    "roc_auc": roc_auc,
    "pr_auc": pr_auc,
    "balanced_accuracy": balanced_accuracy,
    "mcc": mcc,
    "sensitivity": sensitivity,
    "specificity": specificity,
}


# ---------------------------------------------------------------- bootstrap


def resample_indices(rng: np.random.Generator, n: int, groups: Sequence[np.ndarray] | None) -> np.ndarray:
    if groups is None:
        return rng.integers(0, n, size=n)
    pick = rng.integers(0, len(groups), size=len(groups))
    return np.concatenate([groups[g] for g in pick])


def group_rows(keys: Sequence[str]) -> list[np.ndarray]:
    """Row indices per key, keys in sorted order (for cluster resampling)."""
    keys = np.asarray(keys)
    return [np.flatnonzero(keys == k) for k in sorted(set(keys.tolist()))]


def bootstrap(
    statistic: Callable[[np.ndarray], float | np.ndarray],
    n_rows: int,
    n: int = 1000,
    seed: int = 0,
    level: float = 0.95,
    groups: Sequence[np.ndarray] | None = None,
    max_retries: int = 100,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Percentile bootstrap of ``statistic(row_indices)``.

    Iteration i draws from its own generator seeded (seed, i), so iterations are
    order-independent. Draws on which the statistic raises UndefinedMetricError
    are redrawn up to ``max_retries`` times. Returns (samples, low, high).
    """
    if n_rows < 1:
        raise ValueError("bootstrap needs at least one row")
    samples = []
    for i in range(n):
        rng = np.random.default_rng((seed, i))
        for _ in range(max_retries):
            idx = resample_indices(rng, n_rows, groups)
            try:
                samples.append(np.asarray(statistic(idx), dtype=np.float64))
                break
            except UndefinedMetricError:
                continue
        else:
            raise BootstrapInfeasibleError(
                f"bootstrap iteration {i}: metric undefined on {max_retries} consecutive resamples"
            )
    arr = np.stack(samples)
    alpha = (1.0 - level) / 2
    lo = np.percentile(arr, 100 * alpha, axis=0, method="linear")
    hi = np.percentile(arr, 100 * (1 - alpha), axis=0, method="linear")
    return arr, lo, hi


def bootstrap_ci(
    p: PredictionSet,
    metric: Callable,
    n: int = 1000,
    seed: int = 0,
    level: float = 0.95,
    unit: str = "trial",
) -> MetricWithCI:
    point = float(metric(p.label, p.score))
    groups = _groups_for(p.patient_id, unit)
    _, lo, hi = bootstrap(lambda idx: metric(p.label[idx], p.score[idx]), len(p), n, seed, level, groups)
    return MetricWithCI(point, float(lo), float(hi), n, level)


def _groups_for(patient_ids, unit: str):
    if unit == "trial":
        return None
    if unit == "patient":
        return group_rows(patient_ids)
    raise ValueError(f"unknown bootstrap unit {unit!r}")


def metrics_report(p: PredictionSet, n_bootstrap: int = 1000, seed: int = 0, level: float = 0.95,
                   unit: str = "trial", threshold: float = 0.5) -> dict:
    """Headline metrics, each with a percentile bootstrap CI."""
    out: dict = {}
    for k, (name, fn) in enumerate(METRICS.items()):
        metric = fn if name in ("roc_auc", "pr_auc") else (lambda y, s, fn=fn: fn(y, s, threshold))
        out[name] = bootstrap_ci(p, metric, n_bootstrap, seed + k, level, unit).to_dict()
    out["meta"] = {
        "n_predictions": len(p),
        "n_positive": int(p.label.sum()),
        "n_negative": int(len(p) - p.label.sum()),
        "n_bootstrap": n_bootstrap,
        "ci_level": level,
        "ci_method": "percentile",
        "bootstrap_unit": unit,
        "threshold": threshold,
    }
    return out
