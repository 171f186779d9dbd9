"""Multiclass evaluation: one-vs-rest AUC, PR/ROC/gain curves, F1, log loss, WER."""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from speechcare.data import LABELS
from speechcare.errors import DomainError, UndefinedMetricError

N_CLASSES = len(LABELS)


@dataclass
class PredictionSet:
    uids: list[str]
    probabilities: np.ndarray  # (N, 3)
    labels: np.ndarray         # (N,) class indices
    groups: list[dict] = field(default_factory=list)

    def __post_init__(self):
        self.probabilities = np.asarray(self.probabilities, dtype=np.float64).reshape(-1, N_CLASSES)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.labels) != len(self.probabilities):
            raise DomainError("labels and probabilities differ in length")
        if len(self.labels) and np.any(np.abs(self.probabilities.sum(axis=1) - 1) > 1e-6):
            raise DomainError("probability rows must sum to 1")
        if not self.groups:
            self.groups = [{} for _ in self.uids]

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, mask: np.ndarray) -> "PredictionSet":
        idx = np.flatnonzero(mask)
        return PredictionSet([self.uids[i] for i in idx], self.probabilities[idx], self.labels[idx],
                             [self.groups[i] for i in idx])

    def predicted(self) -> np.ndarray:
        return np.argmax(self.probabilities, axis=1)

    def to_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for uid, p, y, g in zip(self.uids, self.probabilities, self.labels, self.groups):
                row = {"uid": uid, "probs": [float(v) for v in p],
                       "label": LABELS[int(y)] if y >= 0 else None, "groups": g}
                fh.write(json.dumps(row, sort_keys=True) + "\n")

    @classmethod
    def from_jsonl(cls, path) -> "PredictionSet":
        uids, probs, labels, groups = [], [], [], []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                row = json.loads(line)
                uids.append(row["uid"])
                probs.append(row["probs"])
                lab = row.get("label")
                labels.append(LABELS.index(lab) if isinstance(lab, str) else (-1 if lab is None else int(lab)))
                groups.append(row.get("groups", {}))
        return cls(uids, np.array(probs).reshape(-1, N_CLASSES), np.array(labels), groups)


@dataclass
class CurveSeries:
    kind: str
    x: np.ndarray
    y: np.ndarray

    def to_csv(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("x,y\n")
            for a, b in zip(self.x, self.y):
                fh.write(f"{a:.10g},{b:.10g}\n")


# ------------------------------------------------------------------ AUC

def binary_auc(scores: np.ndarray, positives: np.ndarray) -> float:
    """Mann-Whitney AUC with tied scores counted one half."""
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    n_pos = int(positives.sum())
    n_neg = len(positives) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative")
    ranks = rankdata(scores, method="average")
    return float((ranks[positives].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def per_class_auc(preds: PredictionSet) -> dict[int, float]:
    out = {}
    for c in range(N_CLASSES):
        pos = preds.labels == c
        if pos.all() or not pos.any():
            warnings.warn(f"class {LABELS[c]} has no positives or no negatives; skipped", stacklevel=3)
            continue
        out[c] = binary_auc(preds.probabilities[:, c], pos)
    return out


def auc_ovr(preds: PredictionSet, averaging: str = "micro") -> float:
    if averaging not in ("micro", "weighted", "macro"):
        raise DomainError(f"unknown averaging {averaging!r}")
    if len(np.unique(preds.labels)) < 2:
        raise UndefinedMetricError("one-vs-rest AUC undefined for a single-class dataset")
    if averaging == "micro":
        onehot = preds.labels[:, None] == np.arange(N_CLASSES)[None, :]
        return binary_auc(preds.probabilities.reshape(-1), onehot.reshape(-1))
    per = per_class_auc(preds)
    if averaging == "macro":
        return float(np.mean(list(per.values())))
    prevalence = {c: float(np.mean(preds.labels == c)) for c in per}
    total = sum(prevalence.values())
    return float(sum(prevalence[c] * per[c] for c in per) / total)


def roc_curve(scores: np.ndarray, positives: np.ndarray) -> CurveSeries:
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], positives[order]
    cut = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    tps = np.cumsum(y)[cut]
    fps = (cut + 1) - tps
    p, n = max(int(y.sum()), 1), max(int((~y).sum()), 1)
    return CurveSeries("roc", np.r_[0.0, fps / n], np.r_[0.0, tps / p])


def pr_curve(scores: np.ndarray, positives: np.ndarray) -> CurveSeries:
    """Recall (x, non-decreasing) vs precision (y)."""
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    if not positives.any():
        raise UndefinedMetricError("PR curve needs at least one positive")
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], positives[order]
    cut = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    tps = np.cumsum(y)[cut]
    precision = tps / (cut + 1)
    recall = tps / y.sum()
    return CurveSeries("pr", np.r_[0.0, recall], np.r_[1.0, precision])


def average_precision(scores: np.ndarray, positives: np.ndarray) -> float:
    curve = pr_curve(scores, positives)
    return float(np.sum(np.diff(curve.x) * curve.y[1:]))


def micro_curves(preds: PredictionSet) -> dict[str, CurveSeries]:
    onehot = (preds.labels[:, None] == np.arange(N_CLASSES)[None, :]).reshape(-1)
    flat = preds.probabilities.reshape(-1)
    return {"roc_micro": roc_curve(flat, onehot), "pr_micro": pr_curve(flat, onehot)}


# ------------------------------------------------------- confusion matrices

def confusion_matrix(labels: np.ndarray, predicted: np.ndarray) -> np.ndarray:
    m = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    np.add.at(m, (np.asarray(labels, int), np.asarray(predicted, int)), 1)
    return m


def micro_f1(matrix) -> float:
    """Pooled F1; identical to accuracy for single-label multiclass."""
    m = np.asarray(matrix)
    total = int(m.sum())
    if total == 0:
        raise UndefinedMetricError("empty confusion matrix")
    return int(np.trace(m)) / total


def per_class_pr(matrix) -> dict[str, dict[str, float]]:
    m = np.asarray(matrix)
    if m.sum() == 0:
        raise UndefinedMetricError("empty confusion matrix")
    out = {}
    for c, name in enumerate(LABELS[:m.shape[0]]):
        tp = int(m[c, c])
        col, row = int(m[:, c].sum()), int(m[c, :].sum())
        precision = tp / col if col else 0.0
        recall = tp / row if row else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        out[name] = {"precision": precision, "recall": recall, "f1": f1,
                     "zero_division": not col or not row}
    return out


def predict_with_thresholds(probabilities: np.ndarray, thresholds: Sequence[float]) -> np.ndarray:
    """Argmax over p_c / theta_c."""
    theta = np.asarray(thresholds, dtype=np.float64)
    if theta.shape != (N_CLASSES,) or np.any(theta <= 0) or np.any(theta > 1):
        raise DomainError(f"thresholds must be {N_CLASSES} values in (0, 1], got {thresholds}")
    return np.argmax(np.asarray(probabilities) / theta, axis=1)


def threshold_adjust(preds: PredictionSet, thresholds: Sequence[float]) -> np.ndarray:
    return confusion_matrix(preds.labels, predict_with_thresholds(preds.probabilities, thresholds))


def optimize_thresholds(preds: PredictionSet, grid: Sequence[float] | None = None, rounds: int = 3) -> np.ndarray:
    """Coordinate search over per-class thresholds maximizing macro F1."""
    grid = np.linspace(0.05, 0.95, 19) if grid is None else np.asarray(grid)
    theta = np.full(N_CLASSES, 1.0 / N_CLASSES)

    def score(t):
        return float(np.mean([v["f1"] for v in per_class_pr(threshold_adjust(preds, t)).values()]))

    best = score(theta)
    for _ in range(rounds):
        improved = False
        for c in range(N_CLASSES):
            for g in grid:
                trial = theta.copy()
                trial[c] = g
                s = score(trial)
                if s > best + 1e-12:
                    best, theta, improved = s, trial, True
        if not improved:
            break
    return theta


# ------------------------------------------------------------- log loss

def log_loss(probabilities: np.ndarray, labels: np.ndarray, eps: float = 1e-15) -> float:
    p = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    picked = np.clip(p[np.arange(len(labels)), labels], eps, 1.0)
    return float(-np.mean(np.log(picked)))


# ------------------------------------------------------- gain curves

def cumulative_gain(preds: PredictionSet, positive_class: int) -> CurveSeries:
    """x = k/N, y = share of all positives among the k highest-scored records."""
    positives = preds.labels == positive_class
    if not positives.any():
        raise UndefinedMetricError(f"no records of class {LABELS[positive_class]}")
    order = np.argsort(-preds.probabilities[:, positive_class], kind="mergesort")
    captured = np.cumsum(positives[order]) / positives.sum()
    n = len(order)
    return CurveSeries("cumulative_gain", np.arange(n + 1) / n, np.r_[0.0, captured])


def gain_at(curve: CurveSeries, fraction: float) -> float:
    n = len(curve.x) - 1
    return float(curve.y[int(math.ceil(fraction * n - 1e-12))])


def _entropy(counts: np.ndarray) -> float:
    total = counts.sum()
    if total == 0:
        return 0.0
    p = counts[counts > 0] / total
    return float(-(p * np.log2(p)).sum())


def information_gain_curve(preds: PredictionSet, points: int = 50) -> CurveSeries:
    """Bits of label uncertainty removed when acting only on the top-f most confident records.

    Records outside the top-f subset are treated as an explicit "abstain"
    prediction, so the value is the mutual information between the label
    and the (partially abstaining) prediction. It lies in [0, H(prior)] and
    reaches H(prior) at f = 1 for a perfect classifier.
    """
    if len(np.unique(preds.labels)) < 2:
        raise UndefinedMetricError("information gain needs at least two classes present")
    n = len(preds)
    prior = _entropy(np.bincount(preds.labels, minlength=N_CLASSES).astype(float))
    order = np.argsort(-preds.probabilities.max(axis=1), kind="mergesort")
    predicted = preds.predicted()
    xs, ys = [0.0], [0.0]
    for f in np.linspace(0, 1, points + 1)[1:]:
        k = int(math.ceil(f * n - 1e-12))
        decision = np.full(n, N_CLASSES)
        decision[order[:k]] = predicted[order[:k]]
        cond = 0.0
        for d in np.unique(decision):
            sel = decision == d
            cond += sel.mean() * _entropy(np.bincount(preds.labels[sel], minlength=N_CLASSES).astype(float))
        xs.append(float(f))
        ys.append(min(max(prior - cond, 0.0), prior))
    return CurveSeries("information_gain", np.array(xs), np.array(ys))


# ----------------------------------------------------------------- WER

@dataclass
class WERResult:
    wer: float
    substitutions: int
    insertions: int
    deletions: int
    reference_length: int


def _tokens(x) -> list:
    return x.split() if isinstance(x, str) else list(x)


def wer_details(reference, hypothesis) -> WERResult:
    ref, hyp = _tokens(reference), _tokens(hypothesis)
    if not ref:
        raise UndefinedMetricError("WER undefined for an empty reference")
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            d[i, j] = min(sub, d[i - 1, j] + 1, d[i, j - 1] + 1)
    i, j, s, ins, dele = n, m, 0, 0, 0
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and d[i, j] == d[i - 1, j] + 1:
            dele += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return WERResult(float(d[n, m]) / n, int(s), ins, dele, n)


def wer(reference, hypothesis) -> float:
    return wer_details(reference, hypothesis).wer
