"""Evaluation metrics: Semantic Distance, macro-F1 and accuracy.

Semantic Distance (SD) measures how far the expected label coordinate of a
predicted distribution lands from the true label's coordinate. It is averaged
per true label first and then across labels, so rare classes count as much as
frequent ones. Labels that never occur among the truths are left out of both
macro averages.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .label_space import LabelSpace
from .prob import expectation_in_space


def _pred_matrix(predictions) -> np.ndarray:
    if isinstance(predictions, np.ndarray):
        P = predictions.astype(np.float64, copy=False)
    else:
        P = np.array([np.asarray(p, dtype=np.float64) for p in predictions])
    return np.atleast_2d(P)


def _labels(x) -> np.ndarray:
    return np.asarray(x, dtype=np.int64).reshape(-1)


def sample_distances(predictions, truths, space: LabelSpace) -> np.ndarray:
    """Per-sample ``||E_p[coords] - coords[truth]||_2``."""
    P = _pred_matrix(predictions)
    y = _labels(truths)
    if P.shape[0] != y.size:
        raise ValueError(f"{P.shape[0]} predictions but {y.size} truths")
    if y.size == 0:
        raise ValueError("semantic distance of an empty prediction set")
    if y.min() < 0 or y.max() >= space.n_labels:
        raise ValueError(f"truth labels must be in [0, {space.n_labels})")
    diff = expectation_in_space(P, space) - space.coords[y]
    return np.sqrt((diff * diff).sum(1))


def semantic_distance(predictions, truths, space: LabelSpace) -> tuple[float, np.ndarray]:
    """Return ``(sd, per_label_sd)``; absent labels get NaN and are skipped."""
    d = sample_distances(predictions, truths, space)
    y = _labels(truths)
    counts = np.bincount(y, minlength=space.n_labels)
    sums = np.bincount(y, weights=d, minlength=space.n_labels)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_label = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    return float(np.nanmean(per_label)), per_label


def confusion_matrix(pred_labels, truths, n_labels: int) -> np.ndarray:
    p, t = _labels(pred_labels), _labels(truths)
    if p.size != t.size:
        raise ValueError(f"{p.size} predictions but {t.size} truths")
    if p.size == 0:
        raise ValueError("empty input")
    if min(p.min(), t.min()) < 0 or max(p.max(), t.max()) >= n_labels:
        raise ValueError(f"label indices must be in [0, {n_labels})")
    cm = np.zeros((n_labels, n_labels), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    return cm


def macro_f1(pred_labels, truths, n_labels: int) -> float:
    """Unweighted mean F1 over the labels that occur in ``truths``."""
    cm = confusion_matrix(pred_labels, truths, n_labels)
    tp = np.diag(cm).astype(np.float64)
    support = cm.sum(1)
    denom = cm.sum(0) + support  # 2tp + fp + fn
    f1 = np.where(denom > 0, 2 * tp / np.maximum(denom, 1), 0.0)
    return float(f1[support > 0].mean())


def accuracy(pred_labels, truths) -> float:
    p, t = _labels(pred_labels), _labels(truths)
    if p.size != t.size:
        raise ValueError(f"{p.size} predictions but {t.size} truths")
    if p.size == 0:
        raise ValueError("empty input")
    return float((p == t).mean())


@dataclass(frozen=True)
class EvalReport:
    sd: float
    macro_f1: float
    accuracy: float
    per_label_sd: np.ndarray = field(repr=False)
    n_samples: int
    confusion: np.ndarray = field(repr=False)

    def primary(self, task: str) -> float:
        """Macro-F1, or accuracy for NLI-style tasks."""
        return self.accuracy if str(task).upper() == "NLI" else self.macro_f1


def evaluate(probs, truths, space: LabelSpace) -> EvalReport:
    P = _pred_matrix(probs)
    y = _labels(truths)
    sd, per_label = semantic_distance(P, y, space)
    # np.argmax breaks ties toward the lowest label index
    pred = np.argmax(P, axis=1)
    cm = confusion_matrix(pred, y, space.n_labels)
    return EvalReport(
        sd=sd,
        macro_f1=macro_f1(pred, y, space.n_labels),
        accuracy=accuracy(pred, y),
        per_label_sd=per_label,
        n_samples=int(y.size),
        confusion=cm,
    )
