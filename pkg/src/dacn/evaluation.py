"""Confusion-matrix metrics, per-mode breakdowns and the worst-of-N protocol."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


def confusion(y_true, y_pred, n_classes: int) -> np.ndarray:
    """Entry (i, j) counts samples of true class i predicted as j."""
    y_true = np.asarray(y_true, dtype=np.int64).ravel()
    y_pred = np.asarray(y_pred, dtype=np.int64).ravel()
    if y_true.shape != y_pred.shape:
        raise ValueError("y_true and y_pred differ in length")
    for name, y in (("true", y_true), ("predicted", y_pred)):
        if len(y) and (y.min() < 0 or y.max() >= n_classes):
            raise ValueError(f"{name} label outside [0, {n_classes})")
    m = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(m, (y_true, y_pred), 1)
    return m


def accuracy(m: np.ndarray) -> float:
    total = m.sum()
    if total == 0:
        raise ValueError("empty confusion matrix")
    return float(np.trace(m) / total)


def class_counts(m: np.ndarray, l: int) -> dict[str, int]:
    tp = int(m[l, l])
    fn = int(m[l].sum() - tp)
    fp = int(m[:, l].sum() - tp)
    tn = int(m.sum() - tp - fn - fp)
    return {"TP": tp, "FN": fn, "FP": fp, "TN": tn}


def _ratio(num: int, den: int) -> float | None:
    return None if den == 0 else num / den


def fdr(m: np.ndarray, l: int) -> float | None:
    """TP / (TP + FN); None when class l has no samples."""
    c = class_counts(m, l)
    return _ratio(c["TP"], c["TP"] + c["FN"])


def fpr(m: np.ndarray, l: int) -> float | None:
    """FP / (FP + TN); None when every sample belongs to class l."""
    c = class_counts(m, l)
    return _ratio(c["FP"], c["FP"] + c["TN"])


def mean_defined(values: Sequence[float | None]) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def per_mode_accuracy(y_true, y_pred, modes) -> dict[str, float]:
    y_true, y_pred, modes = np.asarray(y_true), np.asarray(y_pred), np.asarray(modes)
    out = {}
    for mode in sorted(set(modes.tolist())):
        sel = modes == mode
        out[str(mode)] = float(np.mean(y_true[sel] == y_pred[sel]))
    return out


@dataclass
class MetricsReport:
    confusion: list
    acc: float
    fdr: list
    fpr: list
    per_mode_acc: dict = field(default_factory=dict)
    n: int = 0
    n_params_train: int | None = None
    n_params_infer: int | None = None
    train_s_per_epoch: float | None = None
    infer_s: float | None = None

    @classmethod
    def from_predictions(cls, y_true, y_pred, n_classes: int, modes=None, **extra) -> "MetricsReport":
        m = confusion(y_true, y_pred, n_classes)
        return cls(
            confusion=m.tolist(),
            acc=accuracy(m),
            fdr=[fdr(m, l) for l in range(n_classes)],
            fpr=[fpr(m, l) for l in range(n_classes)],
            per_mode_acc=per_mode_accuracy(y_true, y_pred, modes) if modes is not None else {},
            n=int(m.sum()),
            **extra,
        )

    @property
    def mean_fdr(self) -> float | None:
        return mean_defined(self.fdr)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunReport:
    """Metrics of one trained model on both test sets."""

    seed: int
    variant: str
    test1: MetricsReport
    test2: MetricsReport | None = None
    record_path: str | None = None
    checkpoint: str | None = None

    @property
    def test2_acc(self) -> float | None:
        return None if self.test2 is None else self.test2.acc

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "variant": self.variant,
            "test1": self.test1.to_dict(),
            "test2": None if self.test2 is None else self.test2.to_dict(),
            "record_path": self.record_path,
            "checkpoint": self.checkpoint,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        return cls(
            d["seed"],
            d["variant"],
            MetricsReport(**d["test1"]),
            None if d.get("test2") is None else MetricsReport(**d["test2"]),
            d.get("record_path"),
            d.get("checkpoint"),
        )

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2))
        return path


def worst_of_runs(runs: Sequence[RunReport]) -> RunReport:
    """Run with the lowest test2 accuracy (test1 when no test2); ties go to the earliest seed."""
    if not runs:
        raise ValueError("worst_of_runs needs at least one run")

    def key(r):
        acc = r.test2_acc if r.test2_acc is not None else r.test1.acc
        return (acc, r.seed)

    return min(runs, key=key)


def export_features(g: np.ndarray, labels, modes, path: str | Path) -> Path:
    """CSV with g_0..g_{d-1}, label and mode columns, one row per sample."""
    g = np.asarray(g)
    labels, modes = np.asarray(labels), np.asarray(modes)
    if not (len(g) == len(labels) == len(modes)):
        raise ValueError("features, labels and modes must have equal length")
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"g{i}" for i in range(g.shape[1])] + ["label", "mode"])
        for row, lab, mode in zip(g, labels, modes):
            w.writerow([repr(float(x)) for x in row] + [int(lab), str(mode)])
    return path


def read_features(path: str | Path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    body = rows[1:]
    g = np.array([[float(x) for x in r[:-2]] for r in body])
    return g, np.array([int(r[-2]) for r in body]), np.array([r[-1] for r in body], dtype=object)
