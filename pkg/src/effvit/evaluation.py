"""Confusion matrices, one-vs-rest metrics, k-fold harness, feature export.

Multiclass precision/recall/F1 are computed one-vs-rest per class and
macro-averaged; accuracy is trace/total on the multiclass matrix.
Zero-denominator metrics are reported as 0 with a flag.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .configs import TrainConfig
from .data import CLASSES, Sample, make_kfold_split
from .tensor import Tensor, cross_entropy

__all__ = [
    "EvalReport",
    "confusion_matrix",
    "compute_metrics",
    "evaluate",
    "kfold_evaluate",
    "export_features",
    "format_metrics_row",
    "report_csv_lines",
]


@dataclass
class EvalReport:
    cm: np.ndarray  # rows = true class, columns = predicted
    accuracy: float
    precision: list[float]  # per class, one-vs-rest
    recall: list[float]
    f1: list[float]
    macro_precision: float
    macro_recall: float
    macro_f1: float
    n: int
    zero_denominator: list[str] = field(default_factory=list)


def confusion_matrix(y_true, y_pred, n_classes: int = len(CLASSES)) -> np.ndarray:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def compute_metrics(cm: np.ndarray) -> EvalReport:
    cm = np.asarray(cm, dtype=np.int64)
    total = int(cm.sum())
    if total == 0:
        raise ValueError("empty confusion matrix")
    if (cm < 0).any():
        raise ValueError("confusion matrix entries must be nonnegative")
    c = cm.shape[0]
    precision, recall, f1, flags = [], [], [], []
    for k in range(c):
        tp = cm[k, k]
        fp = cm[:, k].sum() - tp
        fn = cm[k, :].sum() - tp
        if tp + fp == 0:
            precision.append(0.0)
            flags.append(f"precision[{k}]")
        else:
            precision.append(tp / (tp + fp))
        if tp + fn == 0:
            recall.append(0.0)
            flags.append(f"recall[{k}]")
        else:
            recall.append(tp / (tp + fn))
        if precision[k] + recall[k] == 0:
            f1.append(0.0)
            flags.append(f"f1[{k}]")
        else:
            f1.append(2 * precision[k] * recall[k] / (precision[k] + recall[k]))
    return EvalReport(
        cm=cm,
        accuracy=float(np.trace(cm)) / total,
        precision=precision,
        recall=recall,
        f1=f1,
        macro_precision=float(np.mean(precision)),
        macro_recall=float(np.mean(recall)),
        macro_f1=float(np.mean(f1)),
        n=total,
        zero_denominator=flags,
    )


def _predict(model, samples: list[Sample], batch_size: int = 32, dtype=None):
    preds = np.empty(len(samples), dtype=np.int64)
    losses = []
    for lo in range(0, len(samples), batch_size):
        batch = samples[lo : lo + batch_size]
        images = np.stack([s.image for s in batch])
        if dtype is not None:
            images = images.astype(dtype)
        labels = np.array([s.label_index for s in batch])
        logits = model.forward(Tensor(images), train=False)
        losses.append(cross_entropy(logits, labels).item() * len(batch))
        # np.argmax breaks ties toward the lowest class index
        preds[lo : lo + len(batch)] = logits.data.argmax(axis=1)
    return preds, sum(losses) / len(samples)


def evaluate(model, samples: list[Sample], batch_size: int = 32) -> EvalReport:
    """Argmax predictions over a split, accumulated into a report."""
    dtype = next(iter(model.registry().items()))[1].dtype
    preds, _ = _predict(model, samples, batch_size, dtype)
    truth = [s.label_index for s in samples]
    return compute_metrics(confusion_matrix(truth, preds))


def kfold_evaluate(
    model_factory,
    dataset: list[Sample],
    k: int = 5,
    seed: int = 0,
    train_cfg: TrainConfig | None = None,
) -> tuple[list[EvalReport], dict]:
    """Train a fresh model per fold on the other k-1 folds, evaluate on
    the held-out fold, and arithmetic-mean the metrics.

    `model_factory(fold_index)` must return a freshly seeded model.
    """
    from .training import train

    train_cfg = train_cfg or TrainConfig(epochs=5, seed=seed)
    subjects = sorted({(s.subject_id, s.label) for s in dataset})
    plan = make_kfold_split(subjects, k=k, seed=seed)
    folds = [plan.assignments[f"fold{i}"] for i in range(k)]
    reports = []
    for i in range(k):
        held_out = folds[i]
        train_ids = [sid for j, fold in enumerate(folds) if j != i for sid in fold]
        model = model_factory(i)
        train(model, dataset, (train_ids, held_out), train_cfg)
        held = set(held_out)
        reports.append(evaluate(model, [s for s in dataset if s.subject_id in held]))
    averaged = {
        "accuracy": float(np.mean([r.accuracy for r in reports])),
        "macro_precision": float(np.mean([r.macro_precision for r in reports])),
        "macro_recall": float(np.mean([r.macro_recall for r in reports])),
        "macro_f1": float(np.mean([r.macro_f1 for r in reports])),
    }
    return reports, averaged


FEATURE_LAYERS = ("cls", "tap", "bridged")


def export_features(model, samples: list[Sample], layer: str) -> list[list]:
    """One row per sample: label then the flattened feature vector."""
    if layer not in FEATURE_LAYERS:
        raise ValueError(f"unknown feature layer {layer!r}; expected {FEATURE_LAYERS}")
    rows = []
    for s in samples:
        x = Tensor(s.image[None])
        if layer == "cls":
            vit = getattr(model, "vit", model)
            if not hasattr(vit, "cls_features"):
                raise ValueError(f"model kind has no 'cls' features")
            if hasattr(model, "bridged"):
                x = model.bridged(x)
            feat = vit.cls_features(x).data[0]
        elif layer == "tap":
            backbone = getattr(model, "backbone", None)
            if backbone is None:
                raise ValueError("model kind has no 'tap' features")
            feat = backbone.forward(x).data[0].reshape(-1)
        else:  # bridged
            if not hasattr(model, "bridged"):
                raise ValueError("model kind has no 'bridged' features")
            feat = model.bridged(x).data[0].reshape(-1)
        rows.append([s.label] + [repr(float(v)) for v in feat])
    return rows


def format_metrics_row(accuracy, precision, recall, f1) -> str:
    """Percentages with two decimals, e.g. '92.52 / 92.66 / 92.87 / 92.76'."""
    return " / ".join(f"{100.0 * v:.2f}" for v in (accuracy, precision, recall, f1))


def report_csv_lines(reports: list[tuple[str, object]]) -> list[str]:
    """Table-3-style CSV: Accuracy,Precision,Recall,F1 as percentages."""
    lines = ["name,accuracy,precision,recall,f1"]
    for name, r in reports:
        if isinstance(r, dict):
            acc, p, rec, f1 = (
                r["accuracy"],
                r["macro_precision"],
                r["macro_recall"],
                r["macro_f1"],
            )
        else:
            acc, p, rec, f1 = r.accuracy, r.macro_precision, r.macro_recall, r.macro_f1
        lines.append(
            f"{name},{100 * acc:.2f},{100 * p:.2f},{100 * rec:.2f},{100 * f1:.2f}"
        )
    return lines


def cm_csv_lines(cm: np.ndarray) -> list[str]:
    lines = ["true\\pred," + ",".join(CLASSES)]
    for i, row in enumerate(np.asarray(cm)):
        lines.append(CLASSES[i] + "," + ",".join(str(int(v)) for v in row))
    return lines


def write_lines(path: Path | str, lines: list[str]) -> None:
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def write_features_csv(path: Path | str, rows: list[list]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        writer = csv.writer(f, lineterminator="\n")
        width = len(rows[0]) - 1 if rows else 0
        writer.writerow(["label"] + [f"f{i}" for i in range(width)])
        writer.writerows(rows)
