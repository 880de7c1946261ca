"""Evaluation metrics and report assembly.

Classification: accuracy and F1 from thresholded scores (positive = the
later-stage class), AUC from the midrank statistic. Regression: MAE, RMSE
and Pearson correlation. Reports collect one row per
task x combination x seed and summarize as mean(std).
"""

import json
import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np
from scipy.stats import rankdata

from .errors import DataError, UndefinedMetricError

REPORT_SCHEMA_VERSION = 1

REPORT_COLUMNS = (
    "task",
    "combination",
    "fraction",
    "init",
    "seed",
    "n_subjects",
    "acc",
    "auc",
    "f1",
    "mae",
    "rmse",
    "pcc",
)


class ClassificationMetrics(NamedTuple):
    acc: float
    auc: float
    f1: float


class RegressionMetrics(NamedTuple):
    mae: float
    rmse: float
    pcc: float


def compute_classification_metrics(
    labels, scores, threshold: float = 0.5
) -> ClassificationMetrics:
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    if labels.shape != scores.shape or labels.ndim != 1 or len(labels) == 0:
        raise DataError("labels and scores must be equal-length nonempty vectors")
    if not np.isin(labels, (0, 1)).all():
        raise DataError("labels must be binary (0/1)")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC undefined for a single-class label vector")

    preds = (scores >= threshold).astype(int)
    acc = float((preds == labels).mean())

    tp = int(((preds == 1) & (labels == 1)).sum())
    fp = int(((preds == 1) & (labels == 0)).sum())
    fn = int(((preds == 0) & (labels == 1)).sum())
    denom = 2 * tp + fp + fn
    f1 = 2 * tp / denom if denom else 0.0

    ranks = rankdata(scores, method="average")
    auc = (ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg)
    return ClassificationMetrics(acc=acc, auc=float(auc), f1=float(f1))


def compute_regression_metrics(y, y_hat) -> RegressionMetrics:
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape or y.ndim != 1 or len(y) == 0:
        raise DataError("targets and predictions must be equal-length nonempty vectors")
    err = y_hat - y
    mae = float(np.abs(err).mean())
    rmse = float(np.sqrt((err**2).mean()))
    vy = float(((y - y.mean()) ** 2).mean())
    vh = float(((y_hat - y_hat.mean()) ** 2).mean())
    if vy == 0.0 or vh == 0.0:
        raise UndefinedMetricError("PCC undefined when either vector has zero variance")
    cov = float(((y - y.mean()) * (y_hat - y_hat.mean())).mean())
    pcc = cov / (np.sqrt(vy) * np.sqrt(vh) + 1e-12)
    return RegressionMetrics(mae=mae, rmse=rmse, pcc=float(pcc))


@dataclass
class MetricsReport:
    """Rows of per-(task, combination, seed) results plus free metadata."""

    rows: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def add(self, task: str, combination: str, seed: int, n_subjects: int, metrics, **extra):
        row = {c: "" for c in REPORT_COLUMNS}
        row.update(
            task=task, combination=combination, seed=seed, n_subjects=n_subjects
        )
        for key, value in metrics._asdict().items():
            row[key] = value
        for key, value in extra.items():
            if key not in REPORT_COLUMNS:
                raise DataError(f"unknown report column {key!r}")
            row[key] = value
        self.rows.append(row)

    def values(self, metric: str, **where) -> list[float]:
        out = []
        for row in self.rows:
            if all(str(row.get(k)) == str(v) for k, v in where.items()) and row[metric] != "":
                out.append(float(row[metric]))
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
            writer.writeheader()
            writer.writerows(self.rows)

    @classmethod
    def read_csv(cls, path) -> "MetricsReport":
        path = Path(path)
        if not path.exists():
            raise DataError(f"report {path} does not exist")
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or tuple(reader.fieldnames) != REPORT_COLUMNS:
                raise DataError(f"report {path} has unexpected columns {reader.fieldnames}")
            return cls(rows=[dict(r) for r in reader])

    def summary(self) -> dict:
        """Mean and std per (task, combination, fraction, init) group."""
        groups: dict[tuple, dict[str, list[float]]] = {}
        for row in self.rows:
            key = (row["task"], row["combination"], str(row["fraction"]), str(row["init"]))
            bucket = groups.setdefault(key, {})
            for metric in ("acc", "auc", "f1", "mae", "rmse", "pcc"):
                if row[metric] != "":
                    bucket.setdefault(metric, []).append(float(row[metric]))
        out = {"schema_version": REPORT_SCHEMA_VERSION, "groups": []}
        for (task, combination, fraction, init), bucket in sorted(groups.items()):
            entry = {
                "task": task,
                "combination": combination,
                "fraction": fraction,
                "init": init,
                "metrics": {
                    m: {"mean": float(np.mean(v)), "std": float(np.std(v)), "n": len(v)}
                    for m, v in sorted(bucket.items())
                },
            }
            out["groups"].append(entry)
        return out

    def write_summary(self, path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=2) + "\n")
