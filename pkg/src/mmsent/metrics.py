"""Classification metrics: weighted accuracy, per-class precision,
recall and F-beta, macro-F1, confusion matrices, and averaging over
repeated runs.

Zero-denominator conventions: precision, recall and F all come out 0
when their denominator is empty, so a class nobody predicted and
nobody held still contributes 0 to the macro average.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError

AVERAGED_RUN = -1


class MetricsReport:
    def __init__(self, accuracy, per_class, macro_f1, confusion, run_id=0):
        self.accuracy = float(accuracy)
        self.per_class = per_class  # list of dicts: precision, recall, f1
        self.macro_f1 = float(macro_f1)
        self.confusion = confusion  # (K, K), rows gold, columns predicted
        self.run_id = run_id

    @property
    def n_classes(self):
        return self.confusion.shape[0]

    @property
    def total(self):
        return int(self.confusion.sum())

    def lines(self):
        """Human-readable summary, one metric per line."""
        out = [f"accuracy {self.accuracy:.4f}", f"macro_f1 {self.macro_f1:.4f}"]
        for k, row in enumerate(self.per_class):
            out.append(
                f"class {k}: precision {row['precision']:.4f} "
                f"recall {row['recall']:.4f} f1 {row['f1']:.4f}"
            )
        return out


def f_beta(precision: float, recall: float, beta: float = 1.0) -> float:
    """F-measure; beta weighs recall against precision.  Returns 0 when
    both inputs are 0 (the measure is undefined there)."""
    denom = beta * beta * precision + recall
    if denom == 0.0:
        return 0.0
    return (1.0 + beta * beta) * precision * recall / denom


def confusion_matrix(predictions, golds, n_classes: int) -> np.ndarray:
    if len(predictions) != len(golds):
        raise ContractError(
            f"{len(predictions)} predictions vs {len(golds)} golds"
        )
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    for pred, gold in zip(predictions, golds):
        if not 0 <= gold < n_classes:
            raise ContractError(f"gold label {gold} outside 0..{n_classes - 1}")
        if not 0 <= pred < n_classes:
            raise ContractError(f"prediction {pred} outside 0..{n_classes - 1}")
        cm[gold, pred] += 1
    return cm


def compute_metrics(predictions, golds, n_classes: int, run_id=0) -> MetricsReport:
    cm = confusion_matrix(predictions, golds, n_classes)
    total = cm.sum()
    if total == 0:
        raise ContractError("no predictions to score")
    accuracy = float(np.trace(cm)) / float(total)
    per_class = []
    for k in range(n_classes):
        predicted = cm[:, k].sum()
        held = cm[k, :].sum()
        precision = float(cm[k, k]) / float(predicted) if predicted else 0.0
        recall = float(cm[k, k]) / float(held) if held else 0.0
        per_class.append({
            "precision": precision,
            "recall": recall,
            "f1": f_beta(precision, recall),
        })
    macro_f1 = float(np.mean([row["f1"] for row in per_class]))
    return MetricsReport(accuracy, per_class, macro_f1, cm, run_id)


def multi_run_average(reports) -> MetricsReport:
    """Scalar metrics averaged arithmetically, confusion matrices
    summed; the result carries the sentinel run id."""
    reports = list(reports)
    if not reports:
        raise ContractError("nothing to average")
    k = reports[0].n_classes
    for r in reports[1:]:
        if r.n_classes != k:
            raise ContractError(
                f"class count mismatch: {r.n_classes} vs {k}"
            )
    accuracy = float(np.mean([r.accuracy for r in reports]))
    macro_f1 = float(np.mean([r.macro_f1 for r in reports]))
    per_class = []
    for c in range(k):
        per_class.append({
            key: float(np.mean([r.per_class[c][key] for r in reports]))
            for key in ("precision", "recall", "f1")
        })
    confusion = np.sum([r.confusion for r in reports], axis=0)
    return MetricsReport(accuracy, per_class, macro_f1, confusion, AVERAGED_RUN)
