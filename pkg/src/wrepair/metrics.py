"""Group-error metrics: pairwise confusion, confusion disparity, accuracy, mAP."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import SINGLE_LABEL, MULTI_LABEL, LabeledDataset, TargetSpec, CONFUSION_PAIRS
from .tensor import softmax_probs, _sigmoid

DECISION_THRESHOLD = 0.5


class TaskKindError(ValueError):
    pass


class UndefinedMetricError(ValueError):
    pass


@dataclass
class PredictionSet:
    scores: np.ndarray      # n x C probabilities
    predicted: np.ndarray   # (n,) argmax or n x C binary
    truth: np.ndarray
    task: str = SINGLE_LABEL

    @staticmethod
    def from_scores(scores: np.ndarray, truth: np.ndarray, task: str) -> "PredictionSet":
        scores = np.asarray(scores, dtype=np.float64)
        if task == SINGLE_LABEL:
            predicted = scores.argmax(axis=1)  # numpy argmax breaks ties low, as required
        else:
            predicted = (scores >= DECISION_THRESHOLD).astype(np.int8)
        return PredictionSet(scores, predicted, np.asarray(truth), task)

    @staticmethod
    def from_logits(logits: np.ndarray, truth: np.ndarray, task: str) -> "PredictionSet":
        if task == SINGLE_LABEL:
            scores = softmax_probs(logits)
        else:
            scores = _sigmoid(np.asarray(logits, dtype=np.float64))
        return PredictionSet.from_scores(scores, truth, task)

    @property
    def n(self):
        return self.scores.shape[0]

    @property
    def num_classes(self):
        return self.scores.shape[1]


def predict(model, ds: LabeledDataset) -> PredictionSet:
    logits = model.predict_logits(ds.features)
    return PredictionSet.from_logits(logits, ds.labels, ds.task)


@dataclass
class ConfusionMatrix:
    matrix: np.ndarray   # C x C, row i = P(pred j | true i)
    support: np.ndarray  # per-class true counts
    class_names: list[str] | None = None


def confusion_matrix(preds: PredictionSet, class_names=None) -> ConfusionMatrix:
    if preds.task != SINGLE_LABEL:
        raise TaskKindError("confusion_matrix requires single-label predictions")
    c = preds.num_classes
    counts = np.zeros((c, c), dtype=np.float64)
    np.add.at(counts, (preds.truth, preds.predicted), 1.0)
    support = counts.sum(axis=1)
    matrix = np.zeros_like(counts)
    nz = support > 0
    matrix[nz] = counts[nz] / support[nz, None]
    return ConfusionMatrix(matrix, support.astype(np.int64), class_names)


def type1conf(cm: ConfusionMatrix, a: int, b: int) -> float:
    """Mean of the two cross-misclassification rates between classes a and b."""
    if a == b:
        raise ValueError("type1conf needs two distinct classes")
    for k in (a, b):
        if cm.support[k] == 0:
            raise UndefinedMetricError(f"class {k} has zero support")
    return float((cm.matrix[a, b] + cm.matrix[b, a]) / 2.0)


def type2conf(preds: PredictionSet, a: int, b: int) -> float:
    """Mean probability of predicting both classes when only one is present."""
    if preds.task != MULTI_LABEL:
        raise TaskKindError("type2conf requires multi-label predictions")
    truth, pred = preds.truth, preds.predicted
    both_pred = (pred[:, a] == 1) & (pred[:, b] == 1)
    rates = []
    for present, absent in ((a, b), (b, a)):
        cond = (truth[:, present] == 1) & (truth[:, absent] == 0)
        if not cond.any():
            raise UndefinedMetricError(
                f"no samples with class {present} present and class {absent} absent")
        rates.append(both_pred[cond].mean())
    return float(np.mean(rates))


def pair_error(preds: PredictionSet, a: int, b: int,
               cm: ConfusionMatrix | None = None) -> float:
    """type1conf or type2conf depending on the task."""
    if preds.task == SINGLE_LABEL:
        if cm is None:
            cm = confusion_matrix(preds)
        return type1conf(cm, a, b)
    return type2conf(preds, a, b)


def cd_bias(preds: PredictionSet, triplet: tuple[int, int, int]) -> float:
    """|err(a,c) - err(b,c)| where err is the task's pairwise confusion."""
    a, b, c = triplet
    cm = confusion_matrix(preds) if preds.task == SINGLE_LABEL else None
    return abs(pair_error(preds, a, c, cm) - pair_error(preds, b, c, cm))


def target_error(preds: PredictionSet, target: TargetSpec) -> float:
    """Mean of the targeted pair errors, or mean cd over the triplets."""
    if target.kind == CONFUSION_PAIRS:
        cm = confusion_matrix(preds) if preds.task == SINGLE_LABEL else None
        return float(np.mean([pair_error(preds, a, b, cm) for a, b in target.groups]))
    return float(np.mean([cd_bias(preds, t) for t in target.groups]))


def accuracy(preds: PredictionSet) -> float:
    if preds.task != SINGLE_LABEL:
        raise TaskKindError("accuracy is defined for single-label predictions")
    return float(np.mean(preds.predicted == preds.truth))


def mean_average_precision(preds: PredictionSet) -> float:
    """Ranking AP per class (ties by sample index), averaged over classes
    that have at least one positive."""
    if preds.task != MULTI_LABEL:
        raise TaskKindError("mean_average_precision requires multi-label predictions")
    aps = []
    for k in range(preds.num_classes):
        truth = preds.truth[:, k]
        if truth.sum() == 0:
            continue
        order = np.argsort(-preds.scores[:, k], kind="stable")
        hits = truth[order]
        ranks = np.nonzero(hits)[0] + 1
        cum = np.cumsum(hits)[ranks - 1]
        aps.append(float(np.mean(cum / ranks)))
    if not aps:
        raise UndefinedMetricError("no class has a positive sample")
    return float(np.mean(aps))


def overall_quality(preds: PredictionSet) -> float:
    """Accuracy for single-label tasks, mAP for multi-label tasks."""
    if preds.task == SINGLE_LABEL:
        return accuracy(preds)
    return mean_average_precision(preds)


def export_confusion_csv(cm: ConfusionMatrix, path) -> None:
    names = cm.class_names or [f"class{k}" for k in range(cm.matrix.shape[0])]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("," + ",".join(names) + "\n")
        for name, row in zip(names, cm.matrix):
            fh.write(name + "," + ",".join(repr(float(v)) for v in row) + "\n")
