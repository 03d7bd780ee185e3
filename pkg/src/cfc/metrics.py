"""Accuracy and ranking metrics for open-set node classification.

Reports split accuracy three ways: over the true in-distribution nodes, over
the true OOD nodes (correct means predicting the reserved OOD class), and
micro over their union. AUROC scores how well a per-node OOD score ranks OOD
above ID, with ties counted half. threshold_baseline turns a closed-set
probability matrix into open-set predictions by rejecting low-confidence rows,
which is the standard comparison point for this kind of detector.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

DEFAULT_TAU_GRID = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)


@dataclass(frozen=True)
class EvalReport:
    """Split accuracies plus metadata. overall_accuracy is micro (node
    weighted), so it always equals the count-weighted mean of the ID and OOD
    accuracies. A missing side of the split reports accuracy 0.0 for it."""

    id_accuracy: float
    ood_accuracy: float
    overall_accuracy: float
    per_class_accuracy: dict
    n_id_test: int
    n_ood_test: int
    auroc: float | None = None

    def __post_init__(self):
        for name in ("id_accuracy", "ood_accuracy", "overall_accuracy"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.auroc is not None and not (0.0 <= self.auroc <= 1.0):
            raise ValueError(f"auroc={self.auroc} outside [0, 1]")
        if self.n_id_test < 0 or self.n_ood_test < 0:
            raise ValueError("negative test counts")
        total = self.n_id_test + self.n_ood_test
        if total == 0:
            raise ValueError("report covers no nodes")
        weighted = (self.id_accuracy * self.n_id_test
                    + self.ood_accuracy * self.n_ood_test) / total
        if abs(self.overall_accuracy - weighted) > 1e-9:
            raise ValueError(
                f"overall_accuracy {self.overall_accuracy} inconsistent with "
                f"count-weighted mean {weighted}")

    def to_dict(self) -> dict:
        return {
            "id_accuracy": self.id_accuracy,
            "ood_accuracy": self.ood_accuracy,
            "overall_accuracy": self.overall_accuracy,
            "per_class_accuracy": {str(k): v
                                   for k, v in self.per_class_accuracy.items()},
            "n_id_test": self.n_id_test,
            "n_ood_test": self.n_ood_test,
            "auroc": self.auroc,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(
            id_accuracy=float(d["id_accuracy"]),
            ood_accuracy=float(d["ood_accuracy"]),
            overall_accuracy=float(d["overall_accuracy"]),
            per_class_accuracy={int(k): float(v)
                                for k, v in d["per_class_accuracy"].items()},
            n_id_test=int(d["n_id_test"]),
            n_ood_test=int(d["n_ood_test"]),
            auroc=None if d.get("auroc") is None else float(d["auroc"]),
        )

    def with_auroc(self, value: float) -> "EvalReport":
        return replace(self, auroc=value)


def accuracy_report(predictions: dict, truth: dict, ood_class_index: int,
                    auroc_value: float | None = None) -> EvalReport:
    """Score node→class predictions against node→class truth.

    A node whose true class is ood_class_index counts as OOD and is correct
    only when predicted as ood_class_index; every other node is ID and must
    hit its exact class. Both maps must cover the same non-empty node set.
    """
    if not truth:
        raise ValueError("empty node set")
    if set(predictions) != set(truth):
        raise ValueError("predictions and truth cover different node sets")

    correct_id = n_id = correct_ood = n_ood = 0
    per_class_hit: dict[int, int] = {}
    per_class_n: dict[int, int] = {}
    for node, true_cls in truth.items():
        hit = predictions[node] == true_cls
        per_class_n[true_cls] = per_class_n.get(true_cls, 0) + 1
        per_class_hit[true_cls] = per_class_hit.get(true_cls, 0) + int(hit)
        if true_cls == ood_class_index:
            n_ood += 1
            correct_ood += int(hit)
        else:
            n_id += 1
            correct_id += int(hit)

    return EvalReport(
        id_accuracy=correct_id / n_id if n_id else 0.0,
        ood_accuracy=correct_ood / n_ood if n_ood else 0.0,
        overall_accuracy=(correct_id + correct_ood) / len(truth),
        per_class_accuracy={c: per_class_hit[c] / per_class_n[c]
                            for c in sorted(per_class_n)},
        n_id_test=n_id,
        n_ood_test=n_ood,
        auroc=auroc_value,
    )


def _midranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks, tied values sharing the mean of their rank range."""
    uniq, inverse, counts = np.unique(values, return_inverse=True,
                                      return_counts=True)
    upper = np.cumsum(counts)
    lower = upper - counts + 1
    return ((lower + upper) / 2.0)[inverse]


def auroc(scores: dict, is_ood: dict) -> float:
    """Probability that a random OOD node outscores a random ID node.

    Mann-Whitney over all OOD/ID pairs with ties counting one half, computed
    through mid-ranks. Needs at least one node on each side.
    """
    if set(scores) != set(is_ood):
        raise ValueError("scores and is_ood cover different node sets")
    nodes = sorted(scores)
    vals = np.array([float(scores[n]) for n in nodes])
    pos = np.array([bool(is_ood[n]) for n in nodes])
    n_pos = int(pos.sum())
    n_neg = len(nodes) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auroc needs both OOD and ID nodes")
    ranks = _midranks(vals)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0)
                 / (n_pos * n_neg))


def threshold_baseline(probs: np.ndarray, mode: str, tau: float) -> np.ndarray:
    """Open-set predictions from closed-set class probabilities.

    Row i maps to its argmax class when the max probability reaches tau and
    to the OOD index C (the column count) otherwise. tau=0 therefore never
    rejects. mode names how the probabilities were produced: softmax rows
    must sum to one, sigmoid entries just live in [0, 1].
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] == 0 or probs.shape[1] == 0:
        raise ValueError("probs must be a non-empty 2-d matrix")
    if not (0.0 <= tau <= 1.0):
        raise ValueError(f"tau={tau} outside [0, 1]")
    if np.any(probs < 0.0) or np.any(probs > 1.0):
        raise ValueError("probabilities outside [0, 1]")
    if mode == "softmax":
        if not np.allclose(probs.sum(axis=1), 1.0, atol=1e-6):
            raise ValueError("softmax rows must sum to 1")
    elif mode != "sigmoid":
        raise ValueError(f"unknown mode {mode!r}")

    ood_index = probs.shape[1]
    preds = np.argmax(probs, axis=1)
    preds[probs.max(axis=1) < tau] = ood_index
    return preds


def tune_threshold(probs: np.ndarray, truth: np.ndarray, mode: str,
                   grid=DEFAULT_TAU_GRID):
    """Pick the tau with the best overall accuracy on a validation set.

    truth holds class indices aligned with the rows of probs, with index C
    meaning OOD. Returns (best_tau, {tau: overall_accuracy}); ties go to the
    smallest tau.
    """
    truth = np.asarray(truth)
    if truth.shape != (probs.shape[0],):
        raise ValueError("truth must align with the rows of probs")
    if not grid:
        raise ValueError("empty tau grid")
    sweep = {}
    best_tau, best_acc = None, -1.0
    for tau in grid:
        acc = float(np.mean(threshold_baseline(probs, mode, tau) == truth))
        sweep[tau] = acc
        if acc > best_acc:
            best_tau, best_acc = tau, acc
    return best_tau, sweep


def save_report(report: EvalReport, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_report(path: str) -> EvalReport:
    with open(path, "r", encoding="utf-8") as fh:
        return EvalReport.from_dict(json.load(fh))
