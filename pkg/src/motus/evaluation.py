"""Confusion matrices, UAF1 and result tables.

Classes that are neither present in the ground truth nor ever predicted are
left out of the unweighted average; any other class with no true positive
scores F1 = 0.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

CLASS_NAMES = (
    "still", "roll left", "roll right", "pivot left", "pivot right",
    "proto movement", "elementary movement", "fluent movement", "transition",
)
NUM_CLASSES = len(CLASS_NAMES)
REPORT_SCHEMA_VERSION = 1


class EvaluationError(ValueError):
    pass


@dataclass
class ConfusionMatrix:
    counts: np.ndarray = field(default_factory=lambda: np.zeros((NUM_CLASSES, NUM_CLASSES), np.int64))

    @property
    def num_classes(self) -> int:
        return len(self.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accumulate(self, true_label, pred_label) -> "ConfusionMatrix":
        """Add (true, pred) pairs; scalars or equal-length arrays."""
        t = np.atleast_1d(np.asarray(true_label, dtype=np.int64))
        p = np.atleast_1d(np.asarray(pred_label, dtype=np.int64))
        if t.shape != p.shape:
            raise EvaluationError("true and predicted labels differ in shape")
        k = self.num_classes
        if t.size and (t.min() < 0 or p.min() < 0 or t.max() >= k or p.max() >= k):
            raise EvaluationError(f"label out of range [0, {k})")
        np.add.at(self.counts, (t, p), 1)
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)


@dataclass
class Scores:
    uaf1: float
    f1: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    included: np.ndarray  # bool per class

    @property
    def mean_precision(self) -> float:
        return float(self.precision[self.included].mean())

    @property
    def mean_recall(self) -> float:
        return float(self.recall[self.included].mean())


def uaf1(cm: ConfusionMatrix | np.ndarray) -> Scores:
    c = np.asarray(cm.counts if isinstance(cm, ConfusionMatrix) else cm, dtype=np.float64)
    if c.sum() == 0:
        raise EvaluationError("empty confusion matrix")
    tp = np.diag(c)
    n_true = c.sum(axis=1)
    n_pred = c.sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(n_pred > 0, tp / n_pred, 0.0)
        recall = np.where(n_true > 0, tp / n_true, 0.0)
        denom = precision + recall
        f1 = np.where(denom > 0, 2 * precision * recall / denom, 0.0)
    included = (n_true > 0) | (n_pred > 0)
    return Scores(uaf1=float(f1[included].mean()), f1=f1, precision=precision,
                  recall=recall, included=included)


def recall_view(cm: ConfusionMatrix) -> tuple[np.ndarray, np.ndarray]:
    """Row-normalised matrix and a flag per row with no true instances."""
    c = cm.counts.astype(np.float64)
    rows = c.sum(axis=1, keepdims=True)
    empty = rows[:, 0] == 0
    view = np.divide(c, rows, out=np.zeros_like(c), where=rows > 0)
    return view, empty


@dataclass
class EvalReport:
    arm: str
    label_fraction: float
    seed: int
    confusion: ConfusionMatrix
    fold_seeds: list[int]
    fold_uaf1: list[float]
    extra: dict = field(default_factory=dict)

    @property
    def scores(self) -> Scores:
        return uaf1(self.confusion)

    def to_dict(self) -> dict:
        s = self.scores
        view, empty = recall_view(self.confusion)
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "arm": self.arm,
            "label_fraction": self.label_fraction,
            "seed": self.seed,
            "uaf1": s.uaf1,
            "mean_precision": s.mean_precision,
            "mean_recall": s.mean_recall,
            "per_class": [
                {"class": CLASS_NAMES[i] if i < NUM_CLASSES else str(i),
                 "precision": float(s.precision[i]), "recall": float(s.recall[i]),
                 "f1": float(s.f1[i]), "included": bool(s.included[i])}
                for i in range(len(s.f1))
            ],
            "confusion": self.confusion.counts.tolist(),
            "recall_view": view.tolist(),
            "empty_rows": empty.tolist(),
            "fold_seeds": list(self.fold_seeds),
            "fold_uaf1": list(self.fold_uaf1),
            "zero_support_rule": "classes never true nor predicted are excluded from the average",
            "extra": self.extra,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        if d.get("schema_version") != REPORT_SCHEMA_VERSION:
            raise EvaluationError(f"unsupported report schema {d.get('schema_version')}")
        return cls(arm=d["arm"], label_fraction=d["label_fraction"], seed=d["seed"],
                   confusion=ConfusionMatrix(np.asarray(d["confusion"], dtype=np.int64)),
                   fold_seeds=d["fold_seeds"], fold_uaf1=d["fold_uaf1"], extra=d.get("extra", {}))


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def results_table(reports: list[EvalReport]) -> dict:
    """Group reports into arm x label-fraction cells, averaging over seeds."""
    cells: dict[str, dict[str, list[float]]] = {}
    for r in reports:
        cells.setdefault(r.arm, {}).setdefault(f"{r.label_fraction:g}", []).append(r.scores.uaf1)
    fractions = sorted({f for row in cells.values() for f in row}, key=float)
    rows = []
    for arm in sorted(cells):
        row = {"arm": arm}
        for f in fractions:
            vals = cells[arm].get(f)
            row[f] = None if vals is None else {"mean_uaf1": float(np.mean(vals)), "n_seeds": len(vals)}
        rows.append(row)
    return {"schema_version": REPORT_SCHEMA_VERSION, "fractions": fractions, "rows": rows}


def render_table(table: dict) -> str:
    fractions = table["fractions"]
    width = max([len("model")] + [len(r["arm"]) for r in table["rows"]])
    head = f"{'model':<{width}}  " + "  ".join(f"{float(f) * 100:>6g}%" for f in fractions)
    lines = [head, "-" * len(head)]
    for row in table["rows"]:
        cells = []
        for f in fractions:
            c = row[f]
            cells.append(f"{'--':>7}" if c is None else f"{c['mean_uaf1'] * 100:7.1f}")
        lines.append(f"{row['arm']:<{width}}  " + "  ".join(cells))
    return "\n".join(lines) + "\n"


def render_recall_matrix(cm: ConfusionMatrix) -> str:
    view, empty = recall_view(cm)
    names = [n[:6] for n in CLASS_NAMES[:cm.num_classes]]
    lines = ["true\\pred " + " ".join(f"{n:>6}" for n in names)]
    for i, name in enumerate(names):
        flag = " (no true frames)" if empty[i] else ""
        lines.append(f"{name:>9} " + " ".join(f"{v:6.3f}" for v in view[i]) + flag)
    return "\n".join(lines) + "\n"
