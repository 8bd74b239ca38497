"""Attack-quality metrics: confusion matrix, classification report, top-k, near misses.

Rates with an empty denominator are reported as 0.
"""
from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, LabelError, ShapeError
from .layout import KEYS, QWERTY, KeyboardLayout


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    """``counts[t, p]``: samples of true class t predicted as p."""

    counts: np.ndarray

    @property
    def n_classes(self):
        return self.counts.shape[0]

    @property
    def total(self):
        return int(self.counts.sum())

    @property
    def support(self):
        return self.counts.sum(axis=1)

    def off_diagonal_total(self):
        return self.total - int(np.trace(self.counts))


def confusion_matrix(true_labels, predicted_labels, n_classes=36) -> ConfusionMatrix:
    t = np.asarray(true_labels, dtype=np.int64).ravel()
    p = np.asarray(predicted_labels, dtype=np.int64).ravel()
    if t.shape != p.shape:
        raise ShapeError(f"{len(t)} true labels vs {len(p)} predictions")
    for arr in (t, p):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise LabelError(f"labels must lie in [0, {n_classes})")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (t, p), 1)
    return ConfusionMatrix(counts)


@dataclass
class ClassificationReport:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    accuracy: float
    macro: dict
    weighted: dict

    def as_text(self, names=None, digits=2):
        """Aligned table: per-class rows, then accuracy / macro avg / weighted avg."""
        n = len(self.support)
        names = list(names) if names is not None else [KEYS[i] if n <= len(KEYS) else str(i) for i in range(n)]
        width = max(len("weighted avg"), *(len(s) for s in names))
        head = f"{'':>{width}} {'precision':>9} {'recall':>9} {'f1-score':>9} {'support':>9}"
        lines = [head, ""]
        fmt = f"{{:>{width}}} {{:>9.{digits}f}} {{:>9.{digits}f}} {{:>9.{digits}f}} {{:>9d}}"
        for i in range(n):
            lines.append(fmt.format(names[i], self.precision[i], self.recall[i], self.f1[i], int(self.support[i])))
        total = int(self.support.sum())
        lines.append("")
        lines.append(f"{'accuracy':>{width}} {'':>9} {'':>9} {self.accuracy:>9.{digits}f} {total:>9d}")
        for label, avg in (("macro avg", self.macro), ("weighted avg", self.weighted)):
            lines.append(fmt.format(label, avg["precision"], avg["recall"], avg["f1"], total))
        return "\n".join(lines) + "\n"


def _safe_div(num, den):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=den > 0)
    return out


def classification_report(cm: ConfusionMatrix) -> ClassificationReport:
    counts = cm.counts
    if cm.total == 0:
        raise DataError("confusion matrix is empty")
    tp = np.diag(counts).astype(np.float64)
    support = counts.sum(axis=1)
    precision = _safe_div(tp, counts.sum(axis=0))
    recall = _safe_div(tp, support)
    f1 = _safe_div(2 * precision * recall, precision + recall)
    w = support / support.sum()
    macro = {"precision": precision.mean(), "recall": recall.mean(), "f1": f1.mean()}
    weighted = {"precision": float(w @ precision), "recall": float(w @ recall), "f1": float(w @ f1)}
    return ClassificationReport(precision, recall, f1, support, float(tp.sum() / cm.total),
                                {k: float(v) for k, v in macro.items()}, weighted)


def top_k_accuracy(topk_predictions, true_labels, k) -> float:
    """Fraction of samples whose true label is among their first ``k`` guesses."""
    preds = np.asarray(topk_predictions)
    truth = np.asarray(true_labels).ravel()
    if preds.ndim != 2 or preds.shape[0] != truth.shape[0]:
        raise ShapeError("need one prediction list per sample")
    if k < 1 or k > preds.shape[1]:
        raise ConfigError(f"k={k} exceeds the {preds.shape[1]} ranked predictions available")
    if truth.size == 0:
        raise DataError("no samples")
    hits = (preds[:, :k] == truth[:, None]).any(axis=1)
    return float(hits.mean())


@dataclass
class NearMissProfile:
    histogram: dict  # key distance -> error count
    total_errors: int
    within_1: float
    within_2: float


def near_miss_profile(cm: ConfusionMatrix, layout: KeyboardLayout = QWERTY) -> NearMissProfile:
    """Distribution of keyboard distance between true and predicted key over errors."""
    if len(layout.positions) < cm.n_classes:
        raise ConfigError("layout does not cover every class")
    hist = Counter()
    rows, cols = np.nonzero(cm.counts)
    for t, p in zip(rows, cols):
        if t != p:
            hist[layout.distance(int(t), int(p))] += int(cm.counts[t, p])
    total = sum(hist.values())
    if total == 0:
        return NearMissProfile({}, 0, 0.0, 0.0)
    within = lambda d: sum(c for dist, c in hist.items() if dist <= d) / total  # noqa: E731
    return NearMissProfile(dict(sorted(hist.items())), total, within(1), within(2))


def write_confusion_csv(cm: ConfusionMatrix, path, names=KEYS):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["true\\pred", *names[: cm.n_classes]])
        for i in range(cm.n_classes):
            w.writerow([names[i], *map(int, cm.counts[i])])


def save_confusion_png(cm: ConfusionMatrix, path, cell=8):
    """Grayscale heatmap, rows = true class, columns = predicted class, dark = frequent."""
    from PIL import Image

    counts = cm.counts.astype(np.float64)
    peak = counts.max()
    scaled = counts / peak if peak > 0 else counts
    img = (255.0 * (1.0 - scaled)).round().astype(np.uint8)
    img = np.kron(img, np.ones((cell, cell), dtype=np.uint8))
    Image.fromarray(img).save(path, format="PNG")
