"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v`` (the verdict lines are
printed even without ``-s``) or ``python tests/test_acceptance.py``.
"""

import math
import time

import numpy as np
import pytest

import gradsuite
from oracles import attention_loops, c_index_pairs, survival_nll_direct
from ksfusion import autodiff as ad
from ksfusion import data, trainer
from ksfusion.autodiff import Tensor
from ksfusion.coord import BranchGradients, coordinate
from ksfusion.data import SynthConfig
from ksfusion.fusion import CrossAttention, FusionConfig, SubspaceStream, ge_con_loss
from ksfusion.metrics import SurvivalBatch, c_index, read_metrics_csv
from ksfusion.objectives import nll_survival_loss

# desk-scale settings for the directional checks: weak gene signal so no
# variant sits at the metric ceiling, 5 training seeds on one cohort
DIRECTIONAL_FUSION = FusionConfig(embed_dim=32, heads=4)
DIRECTIONAL_TRAIN = dict(task="diagnosis", epochs=6, fusion=DIRECTIONAL_FUSION, hidden=64)
DIRECTIONAL_SEEDS = range(5)
CONFLICT_DATA = SynthConfig(n_samples=300, channels=32, snr=0.25, hist_snr=0.5, conflict_strength=0.3)
SYMMETRIC_DATA = SynthConfig(
    n_samples=300, n_tumour=210, n_tme=210, channels=32, snr=0.25, hist_snr=0.5, symmetric=True
)


@pytest.fixture
def verdict(capsys):
    def report(criterion: int, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}")
        assert ok, detail

    return report


def test_criterion_1_gradient_suite(verdict):
    rng = np.random.default_rng(2024)
    tic = time.perf_counter()
    worst = {}
    for case in gradsuite.OP_CASES + gradsuite.LOSS_CASES:
        worst[case.name] = max(gradsuite.run_case(case, rng) for _ in range(100))
    stream_worst = max(gradsuite.stream_case(rng) for _ in range(100))
    elapsed = time.perf_counter() - tic
    failing = {k: v for k, v in worst.items() if v > 1e-5}
    ok = not failing and stream_worst <= 1e-4 and elapsed < 60
    verdict(
        1,
        ok,
        f"{len(worst)} ops/losses x 100 cases, worst rel err {max(worst.values()):.2e} (limit 1e-5)"
        f"{', failing ' + str(failing) if failing else ''}; end-to-end stream worst {stream_worst:.2e} "
        f"(limit 1e-4); {elapsed:.1f}s (limit 60s)",
    )


def test_criterion_2_oracle_equivalence(verdict):
    rng = np.random.default_rng(7)
    c_mismatch = 0
    for _ in range(200):
        b = int(rng.integers(2, 33))
        time_ = rng.integers(0, 12, size=b).astype(float)
        event = rng.random(b) < 0.6
        risks = np.round(rng.normal(size=b), 1)
        rec = SurvivalBatch(time_, event, np.zeros(b, dtype=int))
        c_mismatch += c_index(risks, rec) != c_index_pairs(risks, time_, event)

    nll_err = 0.0
    for _ in range(200):
        b = int(rng.integers(1, 33))
        logits = rng.normal(scale=2.0, size=(b, 4))
        bins, event = rng.integers(0, 4, size=b), rng.random(b) < 0.7
        got = nll_survival_loss(Tensor(logits), SurvivalBatch(rng.uniform(size=b), event, bins)).item()
        nll_err = max(nll_err, abs(got - survival_nll_direct(logits, bins, event)))

    att_err = 0.0
    for _ in range(50):
        heads = int(rng.integers(1, 5))
        c = heads * int(rng.integers(1, 5))
        hg, wg = (int(v) for v in rng.integers(1, 4, size=2))
        cfg = FusionConfig(embed_dim=c, heads=heads, grid=(hg, wg))
        att = CrossAttention(cfg, rng)
        for p in att.parameters():
            p.data[...] = rng.normal(scale=0.5, size=p.shape)
        bsz = int(rng.integers(1, 4))
        teacher, deformed = rng.normal(size=(bsz, hg * wg, c)), rng.normal(size=(bsz, hg * wg, c))
        params = [t.data for lin in (att.wq, att.wk, att.wv, att.wo) for t in (lin.weight, lin.bias)]
        ref = attention_loops(teacher, deformed, *params, heads)
        att_err = max(att_err, float(np.abs(att(Tensor(teacher), Tensor(deformed)).numpy() - ref).max()))

    ok = c_mismatch == 0 and nll_err <= 1e-9 and att_err <= 1e-12
    verdict(
        2,
        ok,
        f"c_index mismatches {c_mismatch}/200 (exact); nll max abs err {nll_err:.1e} (limit 1e-9); "
        f"attention max abs err {att_err:.1e} over 50 configs (limit 1e-12)",
    )


def test_criterion_3_cg_coord_properties(verdict):
    rng = np.random.default_rng(11)
    conflicts = passthrough = bad = 0
    while conflicts < 10_000:
        d = int(rng.integers(1, 257))
        gt, ge = rng.normal(size=d), rng.normal(size=d)
        ct, ce = rng.uniform(0, 8, size=2)
        if rng.random() < 0.05:
            ce = ct  # exercise the tie branch
        res = coordinate(BranchGradients(gt, ge, ct, ce))
        if gt @ ge >= 0 or ct == ce:
            passthrough += 1
            bad += res.applied or not (np.array_equal(res.grad_t, gt) and np.array_equal(res.grad_e, ge))
            continue
        conflicts += 1
        if ct < ce:
            adj, kept, orig, other_out = res.grad_t, ge, gt, res.grad_e
        else:
            adj, kept, orig, other_out = res.grad_e, gt, ge, res.grad_t
        checks = [
            res.applied,
            np.array_equal(other_out, kept),  # the more confident branch is untouched
            abs(adj @ kept) <= 1e-9 * np.linalg.norm(orig) * np.linalg.norm(kept),
            np.linalg.norm(adj) <= np.linalg.norm(orig),
        ]
        bad += not all(checks)
    verdict(
        3,
        bad == 0,
        f"{conflicts} conflicting pairs and {passthrough} non-conflicting/tied pairs (dims 1-256); {bad} violations",
    )


def test_criterion_4_ge_con_properties(verdict):
    rng = np.random.default_rng(5)
    min_loss, zero_err, scale_err = math.inf, 0.0, 0.0
    for _ in range(500):
        b, d = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        hg, wg = (int(v) for v in rng.integers(1, 4, size=2))
        gene, pts = rng.normal(size=(b, d)), rng.uniform(-1, 1, size=(b, hg, wg, 2))
        loss = ge_con_loss(Tensor(gene), Tensor(pts)).item()
        min_loss = min(min_loss, loss)
        # rotating the flattened points leaves their Gram unchanged
        flat = pts.reshape(b, -1)
        q, _ = np.linalg.qr(rng.normal(size=(flat.shape[1], flat.shape[1])))
        zero_err = max(zero_err, ge_con_loss(Tensor(flat @ q), Tensor(pts)).item())
        scales = rng.uniform(0.01, 100, size=(b, 1))
        scale_err = max(scale_err, abs(ge_con_loss(Tensor(gene * scales), Tensor(pts)).item() - loss))
    hand = ge_con_loss(Tensor(np.eye(2)), Tensor(np.ones((2, 1, 1, 2)))).item()
    hand_err = abs(hand - math.sqrt(2) / 2)
    ok = min_loss >= 0 and zero_err <= 1e-12 and scale_err <= 1e-12 and hand_err <= 1e-12
    verdict(
        4,
        ok,
        f"min loss {min_loss:.3g} (>= 0); equal-Gram loss max {zero_err:.1e}; "
        f"row-rescaling change max {scale_err:.1e}; hand case {hand:.15f} (err {hand_err:.1e})",
    )


def test_criterion_5_end_to_end(verdict, tmp_path):
    ds = data.generate(SynthConfig(), seed=0)
    runs = []
    for name in ("a", "b"):
        cfg = trainer.TrainConfig(task="diagnosis", epochs=50, seed=0, out_dir=str(tmp_path / name))
        tic = time.perf_counter()
        trainer.train(cfg, ds)
        runs.append(time.perf_counter() - tic)
    rows = read_metrics_csv(tmp_path / "a" / "metrics.csv")
    val = [(epoch, rep.acc) for epoch, split, rep in rows if split == "val"]
    hit = next((epoch for epoch, acc in val if acc >= 0.95), None)
    same = (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    ok = hit is not None and runs[0] < 300 and same
    verdict(
        5,
        ok,
        f"600 samples, seed 0: val acc >= 0.95 first at epoch {hit} (best {max(a for _, a in val):.4f}); "
        f"50 epochs in {runs[0]:.0f}s (limit 300s); metrics.csv byte-identical across runs: {same}",
    )


def _mean_over_seeds(ds, metric, **overrides):
    vals = []
    for seed in DIRECTIONAL_SEEDS:
        cfg = trainer.TrainConfig(seed=seed, **{**DIRECTIONAL_TRAIN, **overrides})
        vals.append(getattr(trainer.train(cfg, ds).report, metric))
    return float(np.mean(vals)), vals


def test_criterion_6_ablation_direction(verdict):
    ds = data.generate(CONFLICT_DATA, seed=0)
    full, _ = _mean_over_seeds(ds, "auc")
    no_ge, _ = _mean_over_seeds(ds, "auc", ge_con_enabled=False)
    no_cg, _ = _mean_over_seeds(ds, "auc", cg_coord_enabled=False)
    verdict(
        6,
        full >= no_ge and full >= no_cg,
        f"mean val AUC over 5 seeds: full {full:.4f}, w/o Ge-Con {no_ge:.4f}, w/o CG-Coord {no_cg:.4f}",
    )


def test_criterion_7_alpha_sensitivity(verdict):
    ds = data.generate(SYMMETRIC_DATA, seed=0)
    acc = {a: _mean_over_seeds(ds, "acc", alpha=a)[0] for a in (0.1, 0.5, 0.9)}
    verdict(
        7,
        acc[0.5] >= acc[0.1] and acc[0.5] >= acc[0.9],
        "mean val accuracy over 5 seeds: " + ", ".join(f"alpha={a} {v:.4f}" for a, v in acc.items()),
    )


def test_criterion_8_identity_deformation(verdict):
    rng = np.random.default_rng(8)
    cfg = FusionConfig()
    mismatches = 0
    for _ in range(20):
        stream = SubspaceStream(59, 64, cfg, rng)
        genes, grid = rng.normal(size=(4, 59)), rng.normal(size=(4, 7, 7, 64))
        out = stream(genes, grid)
        tokens = ad.reshape(stream.projector(grid), (4, 49, 64))
        plain = stream.attention(ad.reshape(out.teacher, (4, 49, 64)), tokens).numpy()
        mismatches += not np.array_equal(out.fused.numpy(), plain)
    verdict(8, mismatches == 0, f"{20 - mismatches}/20 random inputs bitwise equal to undeformed attention")


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-v"]))
