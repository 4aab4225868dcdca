"""Weighted F1 scoring, checkpoint evaluation, embedding export, and
multi-seed aggregation."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import model as M
from . import tensor as T
from .errors import ContractError, DataError


@dataclass
class MetricsReport:
    weighted_f1: float
    per_class_f1: list
    per_class_support: list
    accuracy: float

    def to_dict(self):
        return {"weighted_f1": self.weighted_f1,
                "per_class_f1": self.per_class_f1,
                "per_class_support": self.per_class_support,
                "accuracy": self.accuracy}


def confusion_matrix(true_labels, predicted_labels, num_classes) -> np.ndarray:
    """C x C counts, rows = true class, columns = predicted class."""
    true_labels = np.asarray(true_labels, dtype=np.int64)
    predicted_labels = np.asarray(predicted_labels, dtype=np.int64)
    if true_labels.shape != predicted_labels.shape or true_labels.ndim != 1:
        raise DataError("label arrays must be 1-D and equally long")
    if true_labels.size == 0:
        raise DataError("cannot score an empty label set")
    for arr, kind in ((true_labels, "true"), (predicted_labels, "predicted")):
        if arr.min() < 0 or arr.max() >= num_classes:
            raise DataError(f"{kind} labels outside [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (true_labels, predicted_labels), 1)
    return counts


def weighted_f1(true_labels, predicted_labels, num_classes) -> MetricsReport:
    """Support-weighted mean of per-class F1 (0/0 convention: F1 = 0)."""
    counts = confusion_matrix(true_labels, predicted_labels, num_classes)
    support = counts.sum(axis=1)
    predicted = counts.sum(axis=0)
    diag = np.diag(counts)

    f1 = np.zeros(num_classes, dtype=np.float64)
    for c in range(num_classes):
        pr_den = predicted[c]
        rc_den = support[c]
        precision = diag[c] / pr_den if pr_den else 0.0
        recall = diag[c] / rc_den if rc_den else 0.0
        if precision + recall > 0:
            f1[c] = 2 * precision * recall / (precision + recall)

    total = support.sum()
    weighted = float((support * f1).sum() / total)
    accuracy = float(diag.sum() / total)
    return MetricsReport(weighted_f1=weighted,
                         per_class_f1=[float(v) for v in f1],
                         per_class_support=[int(v) for v in support],
                         accuracy=accuracy)


def predict_dataset(model: M.SheddModel, images: np.ndarray, batch_size=256) -> np.ndarray:
    preds = []
    for start in range(0, images.shape[0], batch_size):
        x = T.Tensor(images[start:start + batch_size])
        preds.append(model.infer(x))
    return np.concatenate(preds)


def evaluate_model(model: M.SheddModel, images, labels, num_classes,
                   batch_size=256) -> MetricsReport:
    preds = predict_dataset(model, images, batch_size=batch_size)
    return weighted_f1(labels, preds, num_classes)


def evaluate(checkpoint_path, dataset, batch_size=256) -> MetricsReport:
    """Score a saved checkpoint on a dataset (the unlabelled/test pool).
    EMA shadows, when present, are the weights that get evaluated."""
    model = M.model_from_checkpoint(checkpoint_path)
    return evaluate_model(model, dataset.images, dataset.labels,
                          dataset.manifest.num_classes, batch_size=batch_size)


def export_embeddings(checkpoint_path, dataset, per_class: int, seed: int,
                      out_csv) -> int:
    """Write per-sample invariant embeddings for a class-balanced random
    selection; returns the number of rows written."""
    model = M.model_from_checkpoint(checkpoint_path)
    rng = np.random.Generator(np.random.PCG64(seed))
    chosen = []
    for c in range(dataset.manifest.num_classes):
        members = np.flatnonzero(dataset.labels == c)
        if members.size < per_class:
            raise DataError(f"class {c} has {members.size} samples, needs >= {per_class}")
        chosen.append(rng.choice(members, size=per_class, replace=False))
    chosen = np.concatenate(chosen)

    with T.no_grad():
        pair = model.encode_target(T.Tensor(dataset.images[chosen]))
    z = pair.invariant.data

    with open(out_csv, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["sample_id", "true_class"] + [f"inv_{i}" for i in range(z.shape[1])])
        for row, idx in enumerate(chosen):
            writer.writerow([int(idx), int(dataset.labels[idx])] +
                            [f"{v:.7g}" for v in z[row]])
    return len(chosen)


def aggregate_runs(values):
    """Mean and sample standard deviation (n-1) of a metric across runs."""
    values = [float(v) for v in values]
    if len(values) < 2:
        raise ContractError("aggregation needs at least 2 runs for a std")
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std(ddof=1))
