"""Confusion-matrix segmentation metrics (IoU, F1, recall-style accuracy)."""

from __future__ import annotations

import math
from typing import Dict, Optional

import numpy as np


class ConfusionMatrix:
    """Integer counts, rows = ground truth, columns = prediction."""

    def __init__(self, classes: int, counts: Optional[np.ndarray] = None):
        if classes < 1:
            raise ValueError("need at least one class")
        self.classes = classes
        self.counts = np.zeros((classes, classes), np.int64) if counts is None else np.asarray(counts, np.int64)
        if self.counts.shape != (classes, classes) or (self.counts < 0).any():
            raise ValueError("confusion matrix must be a nonnegative square array")

    def accumulate(self, truth, pred) -> "ConfusionMatrix":
        truth, pred = np.asarray(truth), np.asarray(pred)
        if truth.shape != pred.shape:
            raise ValueError(f"shape mismatch {truth.shape} vs {pred.shape}")
        for name, a in (("truth", truth), ("prediction", pred)):
            if a.size and (a.min() < 0 or a.max() >= self.classes):
                raise ValueError(f"{name} labels outside [0, {self.classes})")
        idx = truth.astype(np.int64).ravel() * self.classes + pred.astype(np.int64).ravel()
        self.counts += np.bincount(idx, minlength=self.classes ** 2).reshape(self.classes, self.classes)
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.classes, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def _parts(self):
        if self.total == 0:
            raise ValueError("empty confusion matrix")
        tp = np.diag(self.counts).astype(np.float64)
        fp = self.counts.sum(axis=0) - tp
        fn = self.counts.sum(axis=1) - tp
        return tp, fp, fn

    def _present(self, all_classes: bool) -> np.ndarray:
        if all_classes:
            return np.ones(self.classes, bool)
        return (self.counts.sum(axis=0) + self.counts.sum(axis=1)) > 0

    def iou(self) -> np.ndarray:
        tp, fp, fn = self._parts()
        return _ratio(tp, tp + fp + fn)

    def f1(self) -> np.ndarray:
        tp, fp, fn = self._parts()
        return _ratio(2 * tp, 2 * tp + fp + fn)

    def acc(self) -> np.ndarray:
        tp, _, fn = self._parts()
        return _ratio(tp, tp + fn)

    def miou(self, all_classes: bool = False) -> float:
        return _mean(self.iou()[self._present(all_classes)])

    def m_f1(self, all_classes: bool = False) -> float:
        return _mean(self.f1()[self._present(all_classes)])

    def m_acc(self, all_classes: bool = False) -> float:
        return _mean(self.acc()[self._present(all_classes)])

    def report(self, all_classes: bool = False) -> Dict[str, object]:
        return {"pixels": self.total, "iou": self.iou().tolist(), "miou": self.miou(all_classes),
                "m_f1": self.m_f1(all_classes), "m_acc": self.m_acc(all_classes)}


def _mean(values) -> float:
    # correctly rounded, independent of summation order
    return math.fsum(values.tolist()) / len(values)


def _ratio(num, den):
    out = np.zeros_like(num, dtype=np.float64)
    np.divide(num, den, out=out, where=den > 0)
    return out


def accumulate(cm: ConfusionMatrix, truth, pred) -> ConfusionMatrix:
    return cm.accumulate(truth, pred)


def miou(cm: ConfusionMatrix, all_classes: bool = False) -> float:
    return cm.miou(all_classes)


def m_f1(cm: ConfusionMatrix, all_classes: bool = False) -> float:
    return cm.m_f1(all_classes)


def m_acc(cm: ConfusionMatrix, all_classes: bool = False) -> float:
    return cm.m_acc(all_classes)


def format_report(cm: ConfusionMatrix, all_classes: bool = False) -> str:
    """Line-oriented key=value report."""
    rep = cm.report(all_classes)
    lines = [f"class={c} iou={v:.6f}" for c, v in enumerate(rep["iou"])]
    lines += [f"miou={rep['miou']:.6f}", f"m_f1={rep['m_f1']:.6f}", f"m_acc={rep['m_acc']:.6f}",
              f"pixels={rep['pixels']}"]
    return "\n".join(lines) + "\n"


def parse_report(text: str) -> Dict[str, float]:
    out: Dict[str, float] = {}
    for line in text.splitlines():
        fields = dict(tok.split("=", 1) for tok in line.split())
        if "class" in fields:
            out[f"iou_{fields['class']}"] = float(fields["iou"])
        else:
            out.update({k: float(v) for k, v in fields.items()})
    return out
