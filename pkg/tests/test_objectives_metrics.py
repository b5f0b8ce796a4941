import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import roc_auc_score

from oracles import auc_pairs, c_index_pairs, cross_entropy_direct, survival_nll_direct
from ksfusion.autodiff import ContractError, Tensor
from ksfusion.errors import ConfigError
from ksfusion.metrics import (
    CSV_HEADER,
    MetricReport,
    SurvivalBatch,
    binary_auc,
    c_index,
    classification_metrics,
    read_metrics_csv,
)
from ksfusion.objectives import LossWeights, ce_loss, nll_survival_loss, survival_risk, total_loss


def recs(time, event, bins=None):
    time = np.asarray(time, dtype=float)
    bins = np.zeros(len(time), dtype=int) if bins is None else np.asarray(bins)
    return SurvivalBatch(time, np.asarray(event, dtype=bool), bins)


# ---------------------------------------------------------------------------
# losses


def test_ce_uniform_is_log_k():
    assert abs(ce_loss(Tensor(np.zeros((3, 4))), [0, 1, 2]).item() - math.log(4)) <= 1e-15


def test_ce_saturated_is_zero():
    logits = np.array([[50.0, -50.0], [-50.0, 50.0]])
    assert ce_loss(Tensor(logits), [0, 1]).item() < 1e-40


def test_ce_matches_direct(rng):
    logits, labels = rng.normal(size=(6, 5)) * 4, rng.integers(0, 5, size=6)
    assert abs(ce_loss(Tensor(logits), labels).item() - cross_entropy_direct(logits, labels)) <= 1e-12


def test_ce_bad_label():
    with pytest.raises(ContractError):
        ce_loss(Tensor(np.zeros((2, 3))), [0, 3])


def test_nll_single_bin_cases():
    assert abs(nll_survival_loss(Tensor(np.zeros((1, 1))), recs([1.0], [True])).item() - math.log(2)) <= 1e-15
    assert abs(nll_survival_loss(Tensor(np.zeros((1, 4))), recs([1.0], [False])).item() - math.log(2)) <= 1e-15


def test_nll_matches_product_form(rng):
    logits = rng.normal(size=(16, 4)) * 2
    bins, event = rng.integers(0, 4, size=16), rng.random(16) < 0.7
    got = nll_survival_loss(Tensor(logits), recs(rng.uniform(size=16), event, bins)).item()
    assert abs(got - survival_nll_direct(logits, bins, event)) <= 1e-12


def test_nll_nonnegative_and_sharpening_helps():
    r = recs([1.0], [True], [2])
    losses = []
    for s in np.linspace(0, 5, 11):
        logits = np.array([[-s, -s, s, 0.0]])
        losses.append(nll_survival_loss(Tensor(logits), r).item())
    assert min(losses) >= 0
    assert all(a > b for a, b in zip(losses, losses[1:]))


def test_survival_risk_is_one_minus_last_survival(rng):
    logits = rng.normal(size=(5, 4))
    h = 1 / (1 + np.exp(-logits))
    assert np.allclose(survival_risk(logits), 1 - np.prod(1 - h, axis=1), atol=1e-15)


def test_total_loss_examples():
    assert total_loss("diagnosis", 1.0, 0.2, 0.4, LossWeights(0.5)) == pytest.approx(1.3, abs=1e-15)
    assert total_loss("grading", 1.0, 0.2, 0.4, LossWeights(0.0)) == pytest.approx(1.4, abs=1e-15)
    assert total_loss("survival", 1.0, 0.2, 0.4, LossWeights(1.0)) == pytest.approx(1.2, abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 5), st.floats(0, 2), st.floats(0, 2), st.floats(0, 1), st.floats(0, 1))
def test_total_loss_affine_in_alpha(task, lt, le, a1, a2):
    f1 = total_loss("diagnosis", task, lt, le, LossWeights(a1))
    f2 = total_loss("diagnosis", task, lt, le, LossWeights(a2))
    assert f1 - f2 == pytest.approx((a1 - a2) * (lt - le), abs=1e-12)


def test_alpha_out_of_range():
    with pytest.raises(ConfigError):
        LossWeights(1.2)
    with pytest.raises(ConfigError):
        total_loss("staging", 1.0, 0.0, 0.0, LossWeights(0.5))


# ---------------------------------------------------------------------------
# concordance


def test_c_index_examples():
    t = np.arange(1.0, 6.0)
    assert c_index(-t, recs(t, [True] * 5)) == 1.0
    assert c_index(np.zeros(5), recs(t, [True] * 5)) == 0.5
    assert c_index(-t, recs(t, [False] * 5)) == 0.5


def test_c_index_matches_pairs_exactly():
    rng = np.random.default_rng(7)
    for _ in range(200):
        b = int(rng.integers(2, 33))
        time = rng.integers(0, 10, size=b).astype(float)  # ties in time
        event = rng.random(b) < 0.6
        risks = rng.integers(0, 5, size=b).astype(float)  # ties in risk
        assert c_index(risks, recs(time, event)) == c_index_pairs(risks, time, event)


def test_c_index_symmetry_and_monotone_invariance(rng):
    time, event, risks = rng.uniform(size=20), rng.random(20) < 0.7, rng.normal(size=20)
    r = recs(time, event)
    assert c_index(risks, r) + c_index(-risks, r) == pytest.approx(1.0, abs=1e-15)
    assert c_index(np.exp(3 * risks), r) == c_index(risks, r)


# ---------------------------------------------------------------------------
# classification metrics


def test_auc_matches_pairs_and_sklearn(rng):
    for _ in range(50):
        n = int(rng.integers(4, 60))
        scores = rng.integers(0, 6, size=n).astype(float)
        pos = rng.random(n) < 0.4
        if pos.all() or not pos.any():
            continue
        auc = binary_auc(scores, pos)
        assert auc == pytest.approx(auc_pairs(scores, pos), abs=1e-12)
        assert auc == pytest.approx(roc_auc_score(pos, scores), abs=1e-12)


def test_auc_monotone_invariance(rng):
    scores, pos = rng.normal(size=40), rng.random(40) < 0.5
    assert binary_auc(scores, pos) == binary_auc(np.tanh(scores) * 3 + 1, pos)


def test_random_scores_give_chance_auc():
    rng = np.random.default_rng(0)
    labels = np.repeat([0, 1], 2000)
    p1 = rng.uniform(size=4000)
    rep = classification_metrics(np.stack([1 - p1, p1], axis=1), labels)
    assert abs(rep.auc - 0.5) <= 0.05


def test_perfect_predictions():
    labels = np.array([0, 1, 2, 0, 1, 2])
    rep = classification_metrics(np.eye(3)[labels], labels)
    assert (rep.auc, rep.acc, rep.sen, rep.spec, rep.f1) == (1.0, 1.0, 1.0, 1.0, 1.0)
    assert rep.c_index is None


def test_hand_confusion_matrix():
    labels = np.array([1, 1, 1, 1, 0, 0, 0, 0])
    pred = np.array([1, 1, 1, 0, 1, 0, 0, 0])  # TP=3 FN=1 FP=1 TN=3
    rep = classification_metrics(np.eye(2)[pred], labels)
    assert (rep.acc, rep.sen, rep.spec, rep.f1) == (0.75, 0.75, 0.75, 0.75)


def test_macro_metrics_match_sklearn(rng):
    from sklearn.metrics import f1_score, recall_score

    labels = rng.integers(0, 4, size=80)
    logits = rng.normal(size=(80, 4)) + 1.5 * np.eye(4)[labels]
    probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    rep = classification_metrics(probs, labels)
    pred = probs.argmax(axis=1)
    assert rep.sen == pytest.approx(recall_score(labels, pred, average="macro"), abs=1e-12)
    assert rep.f1 == pytest.approx(f1_score(labels, pred, average="macro"), abs=1e-12)
    assert rep.auc == pytest.approx(roc_auc_score(labels, probs, multi_class="ovr", average="macro"), abs=1e-12)


def test_metric_contract_errors():
    with pytest.raises(ContractError):
        classification_metrics(np.array([[0.5, 0.5], [0.5, 0.5]]), np.array([0, 0]))
    with pytest.raises(ContractError):
        classification_metrics(np.array([[0.9, 0.9], [0.5, 0.5]]), np.array([0, 1]))


def test_report_csv_round_trip(tmp_path):
    rep = MetricReport(0.9, 0.8, 0.7, 0.6, 0.5, None)
    path = tmp_path / "m.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        w.writerow(rep.csv_row(3, "val"))
    [(epoch, split, back)] = read_metrics_csv(path)
    assert (epoch, split) == (3, "val")
    assert back == rep
