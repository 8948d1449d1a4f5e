"""Accuracy, weighted precision/recall/F1, confusion matrices and report rendering."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np


@dataclass
class ClassMetrics:
    id: int
    name: str
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class EvalReport:
    task: str
    kind: str
    accuracy: float
    precision_w: float
    recall_w: float
    f1_w: float
    per_class: list
    confusion: list
    timings: dict = field(default_factory=dict)

    def to_dict(self, timings: bool = True) -> dict:
        d = asdict(self)
        if not timings:
            d.pop("timings")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        d = dict(d)
        d["per_class"] = [ClassMetrics(**c) for c in d["per_class"]]
        d.setdefault("timings", {})
        return cls(**d)

    def confusion_matrix(self) -> np.ndarray:
        return np.asarray(self.confusion, dtype=np.int64)


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ValueError(f"label vectors differ in length: {y_true.shape} vs {y_pred.shape}")
    for name, y in (("true", y_true), ("predicted", y_pred)):
        if y.size and (y.min() < 0 or y.max() >= n_classes):
            raise ValueError(f"{name} labels outside [0, {n_classes})")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def _ratio(num: int, den: int) -> Fraction:
    return Fraction(num, den) if den else Fraction(0)


def metrics_from_confusion(cm: np.ndarray, class_names=None, task: str = "",
                           kind: str = "") -> EvalReport:
    # exact rationals, rounded once, so weighted recall equals accuracy bit for bit
    cm = np.asarray(cm, dtype=np.int64)
    n = cm.shape[0]
    names = list(class_names) if class_names is not None else [str(i) for i in range(n)]
    tp = [int(v) for v in np.diag(cm)]
    support = [int(v) for v in cm.sum(axis=1)]
    predicted = [int(v) for v in cm.sum(axis=0)]
    total = int(cm.sum())
    precision = [_ratio(t, p) for t, p in zip(tp, predicted)]
    recall = [_ratio(t, s) for t, s in zip(tp, support)]
    f1 = [2 * p * r / (p + r) if p + r else Fraction(0) for p, r in zip(precision, recall)]

    def weighted(values):
        return float(sum(s * v for s, v in zip(support, values)) / total) if total else 0.0

    per_class = [ClassMetrics(i, names[i], float(precision[i]), float(recall[i]), float(f1[i]),
                              support[i]) for i in range(n)]
    return EvalReport(
        task=task,
        kind=kind,
        accuracy=float(_ratio(sum(tp), total)),
        precision_w=weighted(precision),
        recall_w=weighted(recall),
        f1_w=weighted(f1),
        per_class=per_class,
        confusion=cm.tolist(),
    )


def compute_metrics(y_true, y_pred, n_classes: int, class_names=None, task: str = "",
                    kind: str = "") -> EvalReport:
    """Per-class and support-weighted metrics; undefined ratios count as 0."""
    cm = confusion_matrix(y_true, y_pred, n_classes)
    return metrics_from_confusion(cm, class_names, task, kind)


def metrics_from_labels(y_true, y_pred, n_classes: int) -> dict:
    """Same quantities as compute_metrics, counted straight from the label vectors.

    Kept independent of the confusion-matrix path so the two can be compared.
    """
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    total = len(y_true)
    prec, rec, f1, sup = [], [], [], []
    for c in range(n_classes):
        is_true = y_true == c
        is_pred = y_pred == c
        tp = int(np.sum(is_true & is_pred))
        p = tp / int(is_pred.sum()) if is_pred.any() else 0.0
        r = tp / int(is_true.sum()) if is_true.any() else 0.0
        prec.append(p)
        rec.append(r)
        f1.append(2 * p * r / (p + r) if p + r > 0 else 0.0)
        sup.append(int(is_true.sum()))
    w = [s / total for s in sup] if total else [0.0] * n_classes
    return {
        "accuracy": float(np.sum(y_true == y_pred)) / total if total else 0.0,
        "precision_w": sum(a * b for a, b in zip(w, prec)),
        "recall_w": sum(a * b for a, b in zip(w, rec)),
        "f1_w": sum(a * b for a, b in zip(w, f1)),
    }


# rendering

METRIC_COLUMNS = (("accuracy", "Accuracy"), ("precision_w", "Precision"),
                  ("recall_w", "Recall"), ("f1_w", "F1"))


def report_json(report: EvalReport, timings: bool = False) -> str:
    return json.dumps(report.to_dict(timings=timings), indent=2, sort_keys=True) + "\n"


def parse_report(text: str) -> EvalReport:
    return EvalReport.from_dict(json.loads(text))


def confusion_csv(report: EvalReport) -> str:
    names = [c.name for c in report.per_class]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["true\\pred"] + names)
    for name, row in zip(names, report.confusion):
        writer.writerow([name] + list(row))
    return buf.getvalue()


def comparison_table(reports) -> str:
    """Aligned text table of the four headline metrics, in percent, per task."""
    lines = []
    for task in sorted({r.task for r in reports}):
        rows = [r for r in reports if r.task == task]
        header = ["Pipeline"] + [label for _, label in METRIC_COLUMNS]
        body = [[r.kind] + [f"{100 * getattr(r, key):.2f}" for key, _ in METRIC_COLUMNS] for r in rows]
        widths = [max(len(x) for x in col) for col in zip(header, *body)]
        lines.append(f"task: {task}")
        lines.append("  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip())
        lines.append("  ".join("-" * w for w in widths))
        for row in body:
            lines.append("  ".join([row[0].ljust(widths[0])] + [v.rjust(w) for v, w in zip(row[1:], widths[1:])]))
        lines.append("")
    return "\n".join(lines)


def comparison_csv(reports) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["task", "kind"] + [key for key, _ in METRIC_COLUMNS])
    for r in reports:
        writer.writerow([r.task, r.kind] + [f"{getattr(r, key):.6f}" for key, _ in METRIC_COLUMNS])
    return buf.getvalue()


def render(reports) -> dict:
    """JSON, text table and per-report confusion CSVs for one or more reports."""
    reports = list(reports)
    if not reports:
        raise ValueError("render needs at least one report")
    return {
        "json": json.dumps([r.to_dict(timings=False) for r in reports], indent=2, sort_keys=True) + "\n",
        "table": comparison_table(reports),
        "csv": comparison_csv(reports),
        "confusion": {f"{r.task}/{r.kind}": confusion_csv(r) for r in reports},
    }
