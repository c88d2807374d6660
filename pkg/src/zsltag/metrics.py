"""Ranking metrics and the annotation / retrieval evaluation drivers.

Conventions: AUC gives half credit to tied (positive, negative) pairs. AP and
P@K rank by descending score and break ties by ascending object id, so
results are deterministic.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from zsltag.errors import ConfigError, DataError
from zsltag.split import SetupView
from zsltag.train import score_matrix


@dataclass(frozen=True)
class RankedPrediction:
    subject_id: object
    candidates: tuple
    scores: np.ndarray
    ground_truth: frozenset

    def __post_init__(self):
        if len(set(self.candidates)) != len(self.candidates):
            raise DataError("candidate ids must be unique")
        if len(self.scores) != len(self.candidates):
            raise DataError("one score per candidate required")
        if not np.isfinite(self.scores).all():
            raise DataError(f"non-finite scores for subject {self.subject_id!r}")
        if not self.ground_truth <= set(self.candidates):
            raise DataError("ground truth must be a subset of the candidates")

    @classmethod
    def from_arrays(cls, subject_id, candidates, scores, truth) -> "RankedPrediction":
        candidates = tuple(candidates)
        truth = np.asarray(truth).astype(bool)
        return cls(subject_id, candidates, np.asarray(scores, float), frozenset(c for c, t in zip(candidates, truth) if t))

    def truth_mask(self) -> np.ndarray:
        return np.array([c in self.ground_truth for c in self.candidates], dtype=bool)


# -- array-level metrics ---------------------------------------------------------


def auc_score(scores: np.ndarray, truth: np.ndarray) -> float:
    """Mann-Whitney AUC: P(random positive outscores random negative), ties count 1/2."""
    truth = np.asarray(truth, bool)
    n_pos = int(truth.sum())
    n_neg = truth.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("AUC needs at least one positive and one negative")
    ranks = rankdata(scores)
    return float((ranks[truth].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def rank_order(scores: np.ndarray, ids: Sequence) -> np.ndarray:
    """Indices by descending score, ties by ascending id."""
    return np.lexsort((np.asarray(ids), -np.asarray(scores, float)))


def ap_score(scores: np.ndarray, truth: np.ndarray, ids: Sequence) -> float:
    truth = np.asarray(truth, bool)
    if not truth.any():
        raise DataError("AP needs at least one positive")
    hits = truth[rank_order(scores, ids)]
    ranks = np.flatnonzero(hits) + 1
    return float(np.mean(np.arange(1, len(ranks) + 1) / ranks))


def precision_at(scores: np.ndarray, truth: np.ndarray, ids: Sequence, k: int) -> float:
    """Positives among the top ``k`` divided by ``k``, even when fewer than ``k`` candidates exist."""
    if k < 1:
        raise ValueError("k must be >= 1")
    truth = np.asarray(truth, bool)
    return float(truth[rank_order(scores, ids)[:k]].sum() / k)


# -- RankedPrediction wrappers ---------------------------------------------------


def roc_auc(prediction: RankedPrediction) -> float:
    return auc_score(prediction.scores, prediction.truth_mask())


def average_precision(prediction: RankedPrediction) -> float:
    return ap_score(prediction.scores, prediction.truth_mask(), prediction.candidates)


def precision_at_k(prediction: RankedPrediction, k: int) -> float:
    return precision_at(prediction.scores, prediction.truth_mask(), prediction.candidates, k)


# -- reports ---------------------------------------------------------------------


@dataclass
class EvalReport:
    task: str
    train_setup: str
    test_setup: str
    metrics: dict[str, float]
    n_subjects: int
    excluded: dict[str, int] = field(default_factory=dict)
    model: str = "embedding"

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "model": self.model,
            "train_setup": self.train_setup,
            "test_setup": self.test_setup,
            "metrics": self.metrics,
            "n_subjects": self.n_subjects,
            "excluded": self.excluded,
        }


ANNOTATION_METRICS = ("AUC-i", "MAP-i")
RETRIEVAL_METRICS = ("AUC-l", "MAP-l")


def reports_to_csv(reports: Sequence[EvalReport], digits: int = 4) -> str:
    """Table-shaped CSV: one row per (train, test[, model]) pair, one column per metric."""
    metric_names: list[str] = []
    for r in reports:
        metric_names += [m for m in r.metrics if m not in metric_names]
    with_model = len({r.model for r in reports}) > 1
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["train", "test"] + (["model"] if with_model else []) + metric_names)
    for r in reports:
        vals = [f"{r.metrics[m]:.{digits}f}" if m in r.metrics else "" for m in metric_names]
        w.writerow([r.train_setup, r.test_setup] + ([r.model] if with_model else []) + vals)
    return buf.getvalue()


def reports_to_json(reports: Sequence[EvalReport]) -> str:
    return json.dumps([r.to_dict() for r in reports], indent=1, sort_keys=True) + "\n"


def annotation_metrics(scores: np.ndarray, truth: np.ndarray, label_ids: Sequence, ks=(1, 5, 10)) -> tuple[dict, dict, int]:
    """Per-instance metrics averaged over rows of an (instances x labels) score matrix.

    Rows without both a positive and a negative are excluded from AUC-i, rows
    without a positive from MAP-i; P@K uses every row.
    """
    scores = np.asarray(scores, float)
    truth = np.asarray(truth, bool)
    if scores.shape != truth.shape or scores.shape[0] == 0:
        raise DataError("annotation evaluation needs a non-empty score matrix matching the ground truth")
    if not np.isfinite(scores).all():
        raise DataError("non-finite scores")
    auc, ap, pk = [], [], {k: [] for k in ks}
    for s, t in zip(scores, truth):
        n_pos = int(t.sum())
        if 0 < n_pos < len(t):
            auc.append(auc_score(s, t))
        if n_pos > 0:
            ap.append(ap_score(s, t, label_ids))
        for k in ks:
            pk[k].append(precision_at(s, t, label_ids, k))
    n = len(scores)
    metrics = {
        "AUC-i": float(np.mean(auc)) if auc else float("nan"),
        "MAP-i": float(np.mean(ap)) if ap else float("nan"),
    }
    metrics.update({f"P@{k}": float(np.mean(v)) for k, v in pk.items()})
    excluded = {"AUC-i": n - len(auc), "MAP-i": n - len(ap)}
    return metrics, excluded, n


def retrieval_metrics(scores: np.ndarray, truth: np.ndarray, instance_ids: Sequence) -> tuple[dict, dict, int]:
    """Per-label AUC and AP over columns; labels that are all-negative or all-positive are excluded."""
    scores = np.asarray(scores, float)
    truth = np.asarray(truth, bool)
    if scores.shape != truth.shape:
        raise DataError("score matrix does not match the ground truth")
    if not np.isfinite(scores).all():
        raise DataError("non-finite scores")
    auc, ap = [], []
    n_labels = scores.shape[1]
    for j in range(n_labels):
        t = truth[:, j]
        if 0 < t.sum() < len(t):
            auc.append(auc_score(scores[:, j], t))
            ap.append(ap_score(scores[:, j], t, instance_ids))
    if not auc:
        raise DataError("every label is excluded from retrieval evaluation")
    metrics = {"AUC-l": float(np.mean(auc)), "MAP-l": float(np.mean(ap))}
    return metrics, {"AUC-l": n_labels - len(auc), "MAP-l": n_labels - len(ap)}, n_labels


# -- drivers ---------------------------------------------------------------------


def _scores(params, features, table, view):
    return score_matrix(params, features, view.instance_ids, view.label_ids, table)


def evaluate_annotation(
    params, features: Mapping[str, np.ndarray], table, view: SetupView, ks=(1, 5, 10), train_setup: str = ""
) -> EvalReport:
    """Rank the view's labels (Y or X+Y) for each of its instances."""
    if not view.allows("annotation"):
        raise ConfigError(f"{view.name} is not an annotation test setup")
    if not view.instance_ids:
        raise DataError(f"{view.name}: no instances to evaluate")
    metrics, excluded, n = annotation_metrics(_scores(params, features, table, view), view.matrix, view.label_ids, ks)
    return EvalReport("annotation", train_setup or params.meta.get("train_setup", ""), view.name, metrics, n, excluded,
                      params.meta.get("model", "embedding"))


def evaluate_retrieval(
    params, features: Mapping[str, np.ndarray], table, view: SetupView, train_setup: str = "", strict: bool = True
) -> EvalReport:
    """Rank the view's instances for each of its labels.

    ``strict=False`` permits non-retrieval setups such as B-X, which the
    seen-label baseline comparison uses.
    """
    if strict and not view.allows("retrieval"):
        raise ConfigError(f"{view.name} is not a retrieval test setup")
    if not view.instance_ids:
        raise DataError(f"{view.name}: no instances to evaluate")
    metrics, excluded, n = retrieval_metrics(_scores(params, features, table, view), view.matrix, view.instance_ids)
    return EvalReport("retrieval", train_setup or params.meta.get("train_setup", ""), view.name, metrics, n, excluded,
                      params.meta.get("model", "embedding"))
