"""Confidence-guided gradient coordination between the tumour and TME branches.

When the two branch gradients over the shared classifier point in opposing
directions (negative cosine), the gradient of the branch with the lower
summed confidence is projected onto the normal plane of the other one. The
more confident branch is never touched.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .autodiff import ContractError, cosine_similarity
from .metrics import SurvivalLike, c_index


@dataclass
class BranchGradients:
    grad_t: np.ndarray
    grad_e: np.ndarray
    conf_t: float
    conf_e: float

    def __post_init__(self):
        self.grad_t = np.asarray(self.grad_t, dtype=np.float64).ravel()
        self.grad_e = np.asarray(self.grad_e, dtype=np.float64).ravel()
        if self.grad_t.shape != self.grad_e.shape:
            raise ContractError(f"branch gradients differ in length: {self.grad_t.size} vs {self.grad_e.size}")


class Coordinated(NamedTuple):
    grad_t: np.ndarray
    grad_e: np.ndarray
    applied: bool


def branch_confidence_cls(logits, labels) -> float:
    """Sum over the batch of each sample's softmax probability on its true label."""
    logits = np.asarray(getattr(logits, "data", logits), dtype=np.float64)
    labels = np.asarray(labels)
    k = logits.shape[1]
    if labels.shape != (logits.shape[0],) or np.any((labels < 0) | (labels >= k)):
        raise ContractError(f"labels must be {logits.shape[0]} indices in [0, {k})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(shifted)
    probs /= probs.sum(axis=1, keepdims=True)
    return float(probs[np.arange(len(labels)), labels].sum())


def branch_confidence_surv(risks, records: SurvivalLike) -> float:
    """Mini-batch concordance of a branch's risk scores (0.5 when nothing is comparable)."""
    return c_index(risks, records)


def project_perpendicular(x1, x2) -> np.ndarray:
    """Remove from ``x1`` its component along ``x2``; ``x1`` is returned as is when ``x2`` is zero."""
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    denom = float(x2 @ x2)
    if denom == 0.0:
        return x1.copy()
    return x1 - (float(x1 @ x2) / denom) * x2


def coordinate(bg: BranchGradients) -> Coordinated:
    if cosine_similarity(bg.grad_t, bg.grad_e) >= 0.0:
        return Coordinated(bg.grad_t, bg.grad_e, False)
    if bg.conf_t < bg.conf_e:
        return Coordinated(project_perpendicular(bg.grad_t, bg.grad_e), bg.grad_e, True)
    if bg.conf_e < bg.conf_t:
        return Coordinated(bg.grad_t, project_perpendicular(bg.grad_e, bg.grad_t), True)
    return Coordinated(bg.grad_t, bg.grad_e, False)


def flatten(arrays: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate([np.ravel(a) for a in arrays])


def unflatten(vec: np.ndarray, like: Sequence[np.ndarray]) -> list[np.ndarray]:
    out, start = [], 0
    for a in like:
        out.append(vec[start : start + a.size].reshape(a.shape))
        start += a.size
    return out
