"""Training, evaluation and ablation of the two-stream subspace fusion model."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tensor
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .coord import BranchGradients, branch_confidence_cls, branch_confidence_surv, coordinate, flatten, unflatten
from .data import N_BINS, Dataset, load
from .encoders import select_subspace
from .errors import ConfigError, TrainingError
from .fusion import FusionConfig, SubspaceStream
from .metrics import CSV_HEADER, MetricReport, c_index, classification_metrics
from .nn import Linear, Module
from .objectives import TASKS, LossWeights, ce_loss, nll_survival_loss, survival_risk, total_loss

logger = logging.getLogger(__name__)

DEFAULT_EPOCHS = {"diagnosis": 20, "grading": 20, "survival": 10}
VARIANTS = ("full", "no_ge_con", "no_cg_coord")


@dataclass
class TrainConfig:
    task: str = "diagnosis"
    alpha: float = 0.5
    epochs: int | None = None
    batch_size: int = 8
    lr: float = 1e-3
    seed: int = 0
    data_dir: str | None = None
    out_dir: str | None = None
    fusion: FusionConfig = field(default_factory=FusionConfig)
    cg_coord_enabled: bool = True
    ge_con_enabled: bool = True
    hidden: int = 128

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; choose from {', '.join(TASKS)}")
        if self.epochs is None:
            self.epochs = DEFAULT_EPOCHS[self.task]
        if self.epochs < 1 or self.batch_size < 1 or self.hidden < 1:
            raise ConfigError("epochs, batch_size and hidden must be positive")
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")
        LossWeights(self.alpha)
        if isinstance(self.fusion, dict):
            self.fusion = FusionConfig(**{**self.fusion, "grid": tuple(self.fusion["grid"])})

    def to_dict(self) -> dict:
        out = asdict(self)
        out["fusion"]["grid"] = list(self.fusion.grid)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        return cls(**d)


@dataclass
class Batch:
    genes: np.ndarray
    patches: np.ndarray
    diagnosis: np.ndarray
    grade: np.ndarray
    survival: object

    @classmethod
    def take(cls, ds: Dataset, idx: np.ndarray) -> Batch:
        return cls(ds.genes[idx], ds.patches[idx], ds.diagnosis[idx], ds.grade[idx], ds.survival(idx))


@dataclass
class ModelOutput:
    z_t: Tensor
    z_e: Tensor
    logits: Tensor
    ge_con_t: Tensor | None
    ge_con_e: Tensor | None


class SubspaceFusionModel(Module):
    """Tumour stream, TME stream and the shared linear classifier over [z_t, z_e]."""

    def __init__(self, n_tumour: int, n_tme: int, in_channels: int, n_outputs: int, cfg: FusionConfig, rng, hidden: int = 128):
        self.dims = {"n_tumour": n_tumour, "n_tme": n_tme, "in_channels": in_channels, "n_outputs": n_outputs}
        self.tumour = SubspaceStream(n_tumour, in_channels, cfg, rng, hidden=hidden)
        self.tme = SubspaceStream(n_tme, in_channels, cfg, rng, hidden=hidden)
        self.classifier = Linear(2 * cfg.embed_dim, n_outputs, rng)

    def forward(self, genes, patches, partition, with_ge_con: bool = True) -> ModelOutput:
        out_t = self.tumour(select_subspace(genes, partition, "t"), patches, with_ge_con)
        out_e = self.tme(select_subspace(genes, partition, "e"), patches, with_ge_con)
        logits = self.classifier(ad.concat([out_t.fused, out_e.fused], axis=1))
        return ModelOutput(out_t.fused, out_e.fused, logits, out_t.ge_con, out_e.ge_con)

    def branch_logits(self, z: Tensor, branch: str) -> Tensor:
        """Classifier applied to one branch with the other half of its input zeroed."""
        z = z.detach()
        zero = Tensor(np.zeros(z.shape))
        parts = [z, zero] if branch == "t" else [zero, z]
        return self.classifier(ad.concat(parts, axis=1))


def n_outputs(task: str, ds: Dataset) -> int:
    return {"diagnosis": ds.n_diagnosis, "grading": ds.n_grade, "survival": N_BINS}[task]


def build_model(cfg: TrainConfig, ds: Dataset, rng=None) -> SubspaceFusionModel:
    h, w, c = ds.grid_shape
    if (h, w) != cfg.fusion.grid:
        raise ConfigError(f"dataset grid {h}x{w} does not match configured grid {cfg.fusion.grid[0]}x{cfg.fusion.grid[1]}")
    rng = rng if rng is not None else init_rng(cfg.seed)
    return SubspaceFusionModel(
        ds.partition.tumour.size, ds.partition.tme.size, c, n_outputs(cfg.task, ds), cfg.fusion, rng, cfg.hidden
    )


def init_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng([seed, 0])


def order_rng(seed: int, task: str) -> np.random.Generator:
    # separate stream so architecture changes do not perturb the data order
    return np.random.default_rng([seed, 1, TASKS.index(task)])


def task_loss(task: str, logits: Tensor, batch: Batch) -> Tensor:
    if task == "diagnosis":
        return ce_loss(logits, batch.diagnosis)
    if task == "grading":
        return ce_loss(logits, batch.grade)
    return nll_survival_loss(logits, batch.survival)


def branch_confidence(task: str, logits: Tensor, batch: Batch) -> float:
    if task == "diagnosis":
        return branch_confidence_cls(logits, batch.diagnosis)
    if task == "grading":
        return branch_confidence_cls(logits, batch.grade)
    return branch_confidence_surv(survival_risk(logits), batch.survival)


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            update = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.data[...] = p.data - update

    def state(self) -> tuple[dict, dict[str, np.ndarray]]:
        tensors = {f"adam.m/{k}": v for k, v in self.m.items()}
        tensors.update({f"adam.v/{k}": v for k, v in self.v.items()})
        return {"t": self.t, "lr": self.lr}, tensors

    def load(self, t: int, m: dict[str, np.ndarray], v: dict[str, np.ndarray]) -> None:
        self.t = t
        self.m = {k: m[k].copy() for k in self.params}
        self.v = {k: v[k].copy() for k in self.params}


@dataclass
class StepResult:
    grads: dict[str, np.ndarray]
    loss: float
    task_loss: float
    logits: np.ndarray
    applied: bool = False


def compute_gradients(model: SubspaceFusionModel, batch: Batch, partition, cfg: TrainConfig) -> StepResult:
    """Gradients of one training step, after gradient coordination when enabled.

    Encoders and fusion streams always receive the joint-objective gradient.
    With coordination on, the classifier instead receives the sum of the two
    branch gradients after :func:`coordinate`.
    """
    out = model(batch.genes, batch.patches, partition, with_ge_con=cfg.ge_con_enabled)
    t_loss = task_loss(cfg.task, out.logits, batch)
    if cfg.ge_con_enabled:
        loss = total_loss(cfg.task, t_loss, out.ge_con_t, out.ge_con_e, LossWeights(cfg.alpha))
    else:
        loss = t_loss
    named = dict(model.named_parameters())
    found = ad.backward(loss)
    grads = {k: found.get(p, np.zeros_like(p.data)) for k, p in named.items()}
    applied = False

    if cfg.cg_coord_enabled:
        cls_params = dict(model.classifier.named_parameters("classifier."))
        tensors = list(cls_params.values())
        logits_t = model.branch_logits(out.z_t, "t")
        logits_e = model.branch_logits(out.z_e, "e")
        g_t = ad.grad(task_loss(cfg.task, logits_t, batch), tensors)
        g_e = ad.grad(task_loss(cfg.task, logits_e, batch), tensors)
        bg = BranchGradients(
            flatten(g_t),
            flatten(g_e),
            branch_confidence(cfg.task, logits_t, batch),
            branch_confidence(cfg.task, logits_e, batch),
        )
        adj_t, adj_e, applied = coordinate(bg)
        for k, g in zip(cls_params, unflatten(adj_t + adj_e, tensors)):
            grads[k] = g
    return StepResult(grads, loss.item(), t_loss.item(), out.logits.data, applied)


def predict(model: SubspaceFusionModel, ds: Dataset, idx: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Logits for ``idx`` in the given order; no graph is kept."""
    chunks = []
    for start in range(0, len(idx), batch_size):
        sel = idx[start : start + batch_size]
        out = model(ds.genes[sel], ds.patches[sel], ds.partition, with_ge_con=False)
        chunks.append(out.logits.data)
    return np.concatenate(chunks, axis=0)


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def report_from_logits(task: str, logits: np.ndarray, ds: Dataset, idx: np.ndarray) -> MetricReport:
    if task == "survival":
        return MetricReport(c_index=c_index(survival_risk(logits), ds.survival(idx)))
    labels = ds.diagnosis[idx] if task == "diagnosis" else ds.grade[idx]
    return classification_metrics(softmax_rows(logits), labels)


def evaluate_model(model: SubspaceFusionModel, ds: Dataset, idx: np.ndarray, task: str) -> MetricReport:
    """Metrics on ``idx``; samples are visited in sample-id order so the result ignores input order."""
    idx = np.asarray(idx)
    canonical = idx[np.argsort([ds.sample_ids[i] for i in idx], kind="stable")]
    return report_from_logits(task, predict(model, ds, canonical), ds, canonical)


@dataclass
class TrainResult:
    report: MetricReport
    model: SubspaceFusionModel
    history: list[tuple[int, str, MetricReport]]
    losses: list[float]
    coord_rate: float
    out_dir: Path | None = None


def _checkpoint_for(cfg: TrainConfig, model: SubspaceFusionModel, opt: Adam, epoch: int, rng) -> Checkpoint:
    opt_meta, opt_tensors = opt.state()
    meta = {
        "config": cfg.to_dict(),
        "dims": model.dims,
        "epoch": epoch,
        "optimizer": opt_meta,
        "order_rng": rng.bit_generator.state,
    }
    tensors = {f"param/{k}": v for k, v in model.state_dict().items()}
    tensors.update(opt_tensors)
    return Checkpoint(meta, tensors)


def train(cfg: TrainConfig, dataset: Dataset | None = None) -> TrainResult:
    ds = dataset if dataset is not None else _load_for(cfg)
    model = build_model(cfg, ds)
    opt = Adam(dict(model.named_parameters()), cfg.lr)
    rng = order_rng(cfg.seed, cfg.task)
    train_idx, val_idx = ds.split_indices("train"), ds.split_indices("val")

    out_dir = Path(cfg.out_dir) if cfg.out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    history: list[tuple[int, str, MetricReport]] = []
    losses: list[float] = []
    steps = applied = 0
    report = None
    for epoch in range(1, cfg.epochs + 1):
        tic = time.perf_counter()
        order = train_idx[rng.permutation(train_idx.size)]
        seen, logits = [], []
        for start in range(0, order.size, cfg.batch_size):
            sel = order[start : start + cfg.batch_size]
            steps += 1
            try:
                step = compute_gradients(model, Batch.take(ds, sel), ds.partition, cfg)
            except NonFiniteError as exc:
                raise TrainingError(f"non-finite loss at step {steps}: {exc}") from None
            if not np.isfinite(step.loss):
                raise TrainingError(f"non-finite loss at step {steps}")
            if not all(np.all(np.isfinite(g)) for g in step.grads.values()):
                raise TrainingError(f"non-finite gradient at step {steps}")
            opt.step(step.grads)
            applied += step.applied
            losses.append(step.loss)
            seen.append(sel)
            logits.append(step.logits)
        seen_idx = np.concatenate(seen)
        history.append((epoch, "train", report_from_logits(cfg.task, np.concatenate(logits), ds, seen_idx)))
        report = evaluate_model(model, ds, val_idx, cfg.task)
        history.append((epoch, "val", report))
        logger.info(
            "epoch %d/%d loss %.4f val %.4f (%.1fs)",
            epoch,
            cfg.epochs,
            float(np.mean(losses[-len(seen) :])),
            report.primary,
            time.perf_counter() - tic,
        )

    if out_dir:
        write_metrics_csv(out_dir / "metrics.csv", history)
        save_checkpoint(out_dir / "model.sfck", _checkpoint_for(cfg, model, opt, cfg.epochs, rng))
    return TrainResult(report, model, history, losses, applied / max(steps, 1), out_dir)


def write_metrics_csv(path, history) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for epoch, split, rep in history:
            writer.writerow(rep.csv_row(epoch, split))


def _load_for(cfg: TrainConfig) -> Dataset:
    if not cfg.data_dir:
        raise ConfigError("no dataset given: set data_dir")
    return load(cfg.data_dir)


def restore(checkpoint_path) -> tuple[TrainConfig, SubspaceFusionModel, Checkpoint]:
    ckpt = load_checkpoint(checkpoint_path)
    cfg = TrainConfig.from_dict(ckpt.meta["config"])
    dims = ckpt.meta["dims"]
    model = SubspaceFusionModel(
        dims["n_tumour"], dims["n_tme"], dims["in_channels"], dims["n_outputs"], cfg.fusion, init_rng(cfg.seed), cfg.hidden
    )
    model.load_state_dict(ckpt.group("param"))
    return cfg, model, ckpt


def evaluate(checkpoint_path, data_dir, split: str = "val") -> MetricReport:
    cfg, model, _ = restore(checkpoint_path)
    ds = load(data_dir)
    dims = model.dims
    h, w, c = ds.grid_shape
    if (ds.partition.tumour.size, ds.partition.tme.size, c) != (dims["n_tumour"], dims["n_tme"], dims["in_channels"]):
        raise ConfigError("dataset dimensions do not match the checkpoint")
    if (h, w) != cfg.fusion.grid or n_outputs(cfg.task, ds) != dims["n_outputs"]:
        raise ConfigError("dataset grid or class count does not match the checkpoint")
    return evaluate_model(model, ds, ds.split_indices(split), cfg.task)


def ablate(cfg: TrainConfig, seeds=(0,), dataset: Dataset | None = None) -> list[dict]:
    """Train the full model and each single-component ablation for every seed.

    Returns one row per variant with metrics averaged over seeds; writes
    ``ablation.csv`` when ``cfg.out_dir`` is set.
    """
    ds = dataset if dataset is not None else _load_for(cfg)
    flags = {
        "full": {},
        "no_ge_con": {"ge_con_enabled": False},
        "no_cg_coord": {"cg_coord_enabled": False},
    }
    rows = []
    for variant in VARIANTS:
        reports = []
        for seed in seeds:
            run_cfg = replace(cfg, seed=seed, out_dir=None, **flags[variant])
            reports.append(train(run_cfg, ds).report)
        row = {"variant": variant, "n_seeds": len(seeds)}
        for key, name in zip(CSV_HEADER[2:], ("auc", "acc", "sen", "spec", "f1", "c_index")):
            vals = [getattr(r, name) for r in reports]
            row[key] = None if vals[0] is None else float(np.mean(vals))
        rows.append(row)
        logger.info("ablation %s: %s", variant, row)
    if cfg.out_dir:
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            header = ["variant", "n_seeds", *CSV_HEADER[2:]]
            writer.writerow(header)
            for row in rows:
                writer.writerow([row["variant"], row["n_seeds"]] + ["" if row[k] is None else f"{row[k]:.10f}" for k in CSV_HEADER[2:]])
    return rows
