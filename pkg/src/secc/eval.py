"""Prediction modes and open-set metrics.

All metric functions take predicted ids and true class ids; true ids are
collapsed through the partition so every non-known class becomes the single
UNKNOWN id (``partition.unknown_id``).
"""
from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .datagen import ClassPartition, Sample, ValidationError
from .network import forward_student


class Mode(str, enum.Enum):
    CLOSED = "closed"
    OPEN_NCLASS = "open_nclass"
    OPEN_REJECT = "open_reject"


@dataclass
class MetricsReport:
    os: float
    os_star: float
    knwn: float
    mean: float
    overall: float
    os_macro: float
    per_class: dict
    confusion: np.ndarray
    flags: list = field(default_factory=list)

    SCALARS = ("os", "os_star", "knwn", "mean", "overall", "os_macro")

    def scalars(self) -> dict:
        return {k: getattr(self, k) for k in self.SCALARS}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k in self.SCALARS:
            w.writerow([k, _num(getattr(self, k))])
        for c in sorted(self.per_class):
            w.writerow([f"class_{c}", _num(self.per_class[c])])
        for f in self.flags:
            w.writerow(["flag", f])
        w.writerow([])
        n = self.confusion.shape[0]
        w.writerow(["confusion"] + [str(j) for j in range(n)])
        for i in range(n):
            w.writerow([str(i)] + [str(int(v)) for v in self.confusion[i]])
        return buf.getvalue()

    def save(self, path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def from_csv(cls, text: str) -> "MetricsReport":
        rows = list(csv.reader(io.StringIO(text)))
        vals, per_class, flags, conf = {}, {}, [], []
        i = 1
        while i < len(rows) and rows[i]:
            key, value = rows[i]
            if key == "flag":
                flags.append(value)
            elif key.startswith("class_"):
                per_class[int(key[6:])] = float(value)
            else:
                vals[key] = float(value)
            i += 1
        for r in rows[i + 2:]:
            if r:
                conf.append([int(v) for v in r[1:]])
        return cls(per_class=per_class, confusion=np.array(conf, dtype=np.int64), flags=flags, **vals)

    @classmethod
    def load(cls, path) -> "MetricsReport":
        return cls.from_csv(Path(path).read_text())


def _num(v: float) -> str:
    return "nan" if isinstance(v, float) and math.isnan(v) else format(v, ".17g")


def predict_labels(p: np.ndarray, mode: Mode, threshold: float, n_known: int) -> np.ndarray:
    """Map classifier distributions (rows of ``p``) to class ids."""
    p = np.atleast_2d(p)
    mode = Mode(mode)
    head = p.shape[1]
    if mode is Mode.OPEN_NCLASS and head != n_known + 1:
        raise ValidationError(f"OPEN_NCLASS needs an {n_known + 1}-way head, got {head}")
    if mode is Mode.OPEN_REJECT and head != n_known:
        raise ValidationError(f"OPEN_REJECT needs an {n_known}-way head, got {head}")
    pred = p.argmax(1)
    if mode is Mode.OPEN_REJECT:
        pred = np.where(p.max(1) < threshold, n_known, pred)
    return pred.astype(np.int64)


def predict(student, x, mode: Mode, threshold: float, n_known: int) -> int:
    feats = x.features if isinstance(x, Sample) else x
    p = forward_student(student, feats, with_cluster=False, with_mi=False).p_cls
    return int(predict_labels(p, mode, threshold, n_known)[0])


def default_mode(head_size: int, partition: ClassPartition) -> Mode:
    if head_size == partition.n_known + 1:
        return Mode.OPEN_NCLASS
    if partition.unknown_target:
        return Mode.OPEN_REJECT
    return Mode.CLOSED


def confusion(preds, true_labels, N: int) -> np.ndarray:
    preds, true_labels = np.asarray(preds, dtype=np.int64), np.asarray(true_labels, dtype=np.int64)
    if len(preds) != len(true_labels):
        raise ValidationError("preds and labels differ in length")
    if preds.size and (preds.min() < 0 or preds.max() >= N or true_labels.min() < 0 or true_labels.max() >= N):
        raise ValidationError(f"class ids must lie in [0, {N})")
    m = np.zeros((N, N), dtype=np.int64)
    np.add.at(m, (true_labels, preds), 1)
    return m


def office_metrics(preds, true_labels, partition: ClassPartition) -> tuple:
    """(OS, OS*, flags). OS* is NaN with a flag when no known-class samples exist."""
    preds = np.asarray(preds, dtype=np.int64)
    truth = partition.eval_label(true_labels)
    if truth.size == 0:
        raise ValidationError("empty target set")
    correct = preds == truth
    os_ = float(correct.mean())
    known = truth != partition.unknown_id
    flags = []
    if known.any():
        os_star = float(correct[known].mean())
    else:
        os_star = float("nan")
        flags.append("os_star_undefined_no_known_samples")
    return os_, os_star, flags


def _per_class(preds, truth, classes):
    out = {}
    for c in classes:
        mask = truth == c
        if mask.any():
            out[int(c)] = float((preds[mask] == c).mean())
    return out


def visda_metrics(preds, true_labels, partition: ClassPartition) -> tuple:
    """(Knwn, Mean, Overall, per_class, flags)."""
    preds = np.asarray(preds, dtype=np.int64)
    truth = partition.eval_label(true_labels)
    if truth.size == 0:
        raise ValidationError("empty target set")
    per_class = _per_class(preds, truth, list(partition.known) + [partition.unknown_id])
    flags = [f"class_{c}_absent" for c in partition.known if c not in per_class]
    known_acc = [per_class[c] for c in partition.known if c in per_class]
    knwn = float(np.mean(known_acc)) if known_acc else float("nan")
    all_acc = list(known_acc)
    if partition.unknown_id in per_class:
        all_acc.append(per_class[partition.unknown_id])
    mean = float(np.mean(all_acc)) if all_acc else float("nan")
    overall = float((preds == truth).mean())
    return knwn, mean, overall, per_class, flags


def evaluate_predictions(preds, true_labels, partition: ClassPartition) -> MetricsReport:
    os_, os_star, f1 = office_metrics(preds, true_labels, partition)
    knwn, mean, overall, per_class, f2 = visda_metrics(preds, true_labels, partition)
    conf = confusion(preds, partition.eval_label(true_labels), partition.n_total_classes)
    # class-averaged OS variant over every class that has target samples
    return MetricsReport(os_, os_star, knwn, mean, overall, mean, per_class, conf, f1 + f2)


def project_2d(features) -> np.ndarray:
    """PCA onto the top two directions; each loading vector's first nonzero entry is positive."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or len(x) < 2 or x.shape[1] < 2:
        raise ValidationError("project_2d needs at least 2 samples of dimension >= 2")
    xc = x - x.mean(0)
    if not np.any(xc):
        return np.zeros((len(x), 2))
    cov = xc.T @ xc / len(x)
    vals, vecs = np.linalg.eigh(cov)
    top = vecs[:, np.argsort(vals)[::-1][:2]]
    for j in range(2):
        nz = np.flatnonzero(np.abs(top[:, j]) > 1e-12)
        if nz.size and top[nz[0], j] < 0:
            top[:, j] = -top[:, j]
    return xc @ top


def evaluate_model(student, target_features, true_labels, partition: ClassPartition,
                   mode: Optional[Mode] = None, threshold: float = 0.5) -> tuple:
    """Run the student on target features. Returns (report, preds, pooled)."""
    out = forward_student(student, target_features, with_cluster=False, with_mi=False)
    mode = default_mode(out.p_cls.shape[1], partition) if mode is None else Mode(mode)
    preds = predict_labels(out.p_cls, mode, threshold, partition.n_known)
    return evaluate_predictions(preds, true_labels, partition), preds, out.pooled
