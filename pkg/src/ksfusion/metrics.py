"""Evaluation metrics: concordance index and macro classification scores."""

from __future__ import annotations

import csv
from dataclasses import dataclass, fields
from typing import Protocol

import numpy as np

from .autodiff import ContractError

CSV_HEADER = ("epoch", "split", "auc", "acc", "sen", "spec", "f1", "cindex")


class SurvivalLike(Protocol):
    time: np.ndarray
    event: np.ndarray


@dataclass(frozen=True)
class SurvivalBatch:
    """Times, event flags and interval bins for a set of samples."""

    time: np.ndarray
    event: np.ndarray
    bin: np.ndarray

    def __len__(self):
        return len(self.time)


@dataclass(frozen=True)
class MetricReport:
    auc: float | None = None
    acc: float | None = None
    sen: float | None = None
    spec: float | None = None
    f1: float | None = None
    c_index: float | None = None

    def values(self) -> tuple[float | None, ...]:
        return tuple(getattr(self, f.name) for f in fields(self))

    def csv_row(self, epoch: int, split: str) -> list[str]:
        return [str(epoch), split] + ["" if v is None else f"{v:.10f}" for v in self.values()]

    @classmethod
    def from_csv_row(cls, row: dict[str, str]) -> MetricReport:
        def _get(key):
            return None if row[key] == "" else float(row[key])

        return cls(_get("auc"), _get("acc"), _get("sen"), _get("spec"), _get("f1"), _get("cindex"))

    @property
    def primary(self) -> float:
        """The headline number: AUC for classification, C-index for survival."""
        return self.auc if self.auc is not None else self.c_index


def read_metrics_csv(path) -> list[tuple[int, str, MetricReport]]:
    with open(path, newline="") as fh:
        return [(int(r["epoch"]), r["split"], MetricReport.from_csv_row(r)) for r in csv.DictReader(fh)]


def c_index(risks, records: SurvivalLike) -> float:
    """Harrell's concordance: over pairs with an observed event at the shorter time,
    the fraction where that sample has the higher risk (ties count one half)."""
    risks = np.asarray(risks, dtype=np.float64).ravel()
    time = np.asarray(records.time, dtype=np.float64)
    event = np.asarray(records.event, dtype=bool)
    if risks.size != time.size:
        raise ContractError(f"{risks.size} risks for {time.size} records")
    comparable = event[:, None] & (time[:, None] < time[None, :])
    n = int(comparable.sum())
    if n == 0:
        return 0.5
    diff = risks[:, None] - risks[None, :]
    score = np.where(diff > 0, 1.0, np.where(diff == 0, 0.5, 0.0))
    return float(score[comparable].sum() / n)


def binary_auc(scores, positive) -> float:
    """Area under the ROC curve via the tie-aware rank statistic (equal to trapezoidal ROC area)."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ContractError("AUC is undefined without both positives and negatives")
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    ranks = np.empty(scores.size)
    # average ranks within tied groups
    starts = np.flatnonzero(np.r_[True, sorted_scores[1:] != sorted_scores[:-1]])
    ends = np.r_[starts[1:], scores.size]
    for s, e in zip(starts, ends):
        ranks[order[s:e]] = 0.5 * (s + e - 1) + 1.0
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def classification_metrics(probs, labels) -> MetricReport:
    """Macro one-vs-rest AUC, accuracy, and macro sensitivity/specificity/F1.

    Per-class ratios with a zero denominator are left out of the macro mean.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    b, k = probs.shape
    if labels.shape != (b,) or np.any((labels < 0) | (labels >= k)):
        raise ContractError(f"labels must be {b} indices in [0, {k})")
    if np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-6):
        raise ContractError("probability rows must sum to 1")
    present = np.unique(labels)
    if present.size < 2:
        raise ContractError("AUC is undefined for a single-class label set")

    aucs = [binary_auc(probs[:, c], labels == c) for c in present]
    pred = probs.argmax(axis=1)
    sens, specs, f1s = [], [], []
    for c in range(k):
        tp = int(np.sum((pred == c) & (labels == c)))
        fp = int(np.sum((pred == c) & (labels != c)))
        fn = int(np.sum((pred != c) & (labels == c)))
        tn = b - tp - fp - fn
        if tp + fn:
            sens.append(tp / (tp + fn))
        if tn + fp:
            specs.append(tn / (tn + fp))
        if 2 * tp + fp + fn:
            f1s.append(2 * tp / (2 * tp + fp + fn))
    return MetricReport(
        auc=float(np.mean(aucs)),
        acc=float(np.mean(pred == labels)),
        sen=float(np.mean(sens)),
        spec=float(np.mean(specs)),
        f1=float(np.mean(f1s)),
    )
