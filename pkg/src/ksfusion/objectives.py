"""Task losses and the subspace-weighted total objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .errors import ConfigError

TASKS = ("diagnosis", "grading", "survival")


@dataclass(frozen=True)
class LossWeights:
    """``alpha`` weighs the tumour consistency term and ``1 - alpha`` the TME one."""

    alpha: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")


def _one_hot(labels, k: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1 or np.any((labels < 0) | (labels >= k)):
        raise ContractError(f"labels must be indices in [0, {k})")
    out = np.zeros((labels.size, k))
    out[np.arange(labels.size), labels] = 1.0
    return out


def ce_loss(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of B x K logits against integer labels."""
    logits = ad.as_tensor(logits)
    target = _one_hot(labels, logits.shape[1])
    if target.shape[0] != logits.shape[0]:
        raise ContractError(f"{target.shape[0]} labels for {logits.shape[0]} rows")
    picked = ad.sum_(ad.mul(ad.log_softmax(logits, axis=1), target))
    return ad.scale(picked, -1.0 / logits.shape[0])


def nll_survival_loss(hazard_logits: Tensor, records) -> Tensor:
    """Discrete-time survival negative log-likelihood.

    Bin hazards are ``sigmoid(logit_j)`` and survival past bin ``j`` is the
    product of ``1 - h_m`` for ``m <= j``. A death in bin ``j`` scores
    ``log S_{j-1} + log h_j``; a censoring in bin ``j`` scores ``log S_j``.
    """
    hazard_logits = ad.as_tensor(hazard_logits)
    b, k = hazard_logits.shape
    bins = np.asarray(records.bin)
    event = np.asarray(records.event, dtype=bool)
    if bins.shape != (b,) or np.any((bins < 0) | (bins >= k)):
        raise ContractError(f"survival bins must be {b} indices in [0, {k})")
    log_h = ad.log_sigmoid(hazard_logits)
    log_1mh = ad.log_sigmoid(ad.scale(hazard_logits, -1.0))
    # cumulative sum over bins as a product with an upper-triangular ones matrix
    log_surv = ad.matmul(log_1mh, np.triu(np.ones((k, k))))

    hazard_mask = np.zeros((b, k))
    surv_mask = np.zeros((b, k))
    rows = np.arange(b)
    hazard_mask[rows[event], bins[event]] = 1.0
    died_late = event & (bins > 0)
    surv_mask[rows[died_late], bins[died_late] - 1] = 1.0
    surv_mask[rows[~event], bins[~event]] = 1.0

    ll = ad.add(ad.sum_(ad.mul(log_h, hazard_mask)), ad.sum_(ad.mul(log_surv, surv_mask)))
    return ad.scale(ll, -1.0 / b)


def survival_risk(hazard_logits) -> np.ndarray:
    """Risk score ``1 - S_last``: probability of the event by the final bin."""
    logits = np.asarray(getattr(hazard_logits, "data", hazard_logits), dtype=np.float64)
    log_1mh = np.minimum(-logits, 0.0) - np.log1p(np.exp(-np.abs(logits)))
    return -np.expm1(log_1mh.sum(axis=1))


def total_loss(task: str, task_loss, l_batch_t, l_batch_e, w: LossWeights):
    """``task_loss + alpha * l_batch_t + (1 - alpha) * l_batch_e``; same form for every task."""
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}")
    if not isinstance(w, LossWeights):
        w = LossWeights(float(w))
    for v in (task_loss, l_batch_t, l_batch_e):
        value = v.data if isinstance(v, Tensor) else np.asarray(v, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise ContractError("loss terms must be finite")
    if any(isinstance(v, Tensor) for v in (task_loss, l_batch_t, l_batch_e)):
        return ad.add(ad.add(task_loss, ad.scale(ad.as_tensor(l_batch_t), w.alpha)), ad.scale(ad.as_tensor(l_batch_e), 1.0 - w.alpha))
    return float(task_loss) + w.alpha * float(l_batch_t) + (1.0 - w.alpha) * float(l_batch_e)
