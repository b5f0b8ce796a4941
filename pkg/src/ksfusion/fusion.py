"""Knowledge-driven subspace fusion.

One :class:`SubspaceStream` per gene subspace. Each stream fuses its gene
embedding with the histology grid into a teacher map, predicts bounded
offsets from the teacher, samples the histology map at the deformed points
and runs multi-head cross-attention with teacher queries against the
deformed keys and values. The gene-guided consistency loss compares the
batch Gram matrix of the gene embeddings with that of the sample points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoders import GenomicEncoder, HistologyProjector, select_subspace
from .errors import ConfigError
from .nn import Conv3x3, Linear, Module


@dataclass(frozen=True)
class FusionConfig:
    embed_dim: int = 64
    heads: int = 4
    grid: tuple[int, int] = (7, 7)
    offset_scale: float = 0.5

    def __post_init__(self):
        if self.heads < 1 or self.embed_dim < 1:
            raise ConfigError("heads and embed_dim must be positive")
        if self.embed_dim % self.heads:
            raise ConfigError(f"{self.heads} heads do not divide embed_dim {self.embed_dim}")
        if min(self.grid) < 1:
            raise ConfigError(f"grid must be at least 1x1, got {self.grid}")
        if not 0 < self.offset_scale <= 1:
            raise ConfigError(f"offset_scale must lie in (0, 1], got {self.offset_scale}")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def n_tokens(self) -> int:
        return self.grid[0] * self.grid[1]


@dataclass
class SubspaceFusionOutput:
    gene_emb: Tensor  # B x C
    teacher: Tensor  # B x H x W x C
    offsets: Tensor  # B x H x W x 2
    sample_points: Tensor  # B x H x W x 2
    fused: Tensor  # B x C
    ge_con: Tensor | None = None


def reference_grid(height: int, width: int) -> np.ndarray:
    """Cell-centre coordinates in [-1, 1]; entry [i, j] is (x_j, y_i)."""
    if height < 1 or width < 1:
        raise ConfigError(f"grid must be at least 1x1, got {height}x{width}")
    # integer numerators keep the grid exactly symmetric under negation
    xs = (2.0 * np.arange(width) + 1.0 - width) / width
    ys = (2.0 * np.arange(height) + 1.0 - height) / height
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy], axis=-1)


class TeacherFusion(Module):
    """Linear 2C -> C over [gene features broadcast to every cell, histology features]."""

    def __init__(self, embed_dim: int, rng: np.random.Generator):
        self.embed_dim = embed_dim
        self.mix = Linear(2 * embed_dim, embed_dim, rng)

    def forward(self, gene_feat: Tensor, hist_feat: Tensor) -> Tensor:
        if gene_feat.ndim != 2 or hist_feat.ndim != 4:
            raise ad.DimensionError(f"teacher expects B x C and B x H x W x C, got {gene_feat.shape}, {hist_feat.shape}")
        b, h, w, c = hist_feat.shape
        if gene_feat.shape != (b, c) or c != self.embed_dim:
            raise ad.DimensionError(f"teacher got gene {gene_feat.shape} against histology {hist_feat.shape}")
        spread = ad.broadcast_to(ad.reshape(gene_feat, (b, 1, 1, c)), (b, h, w, c))
        return self.mix(ad.concat([spread, hist_feat], axis=-1))


class OffsetNetwork(Module):
    """conv3x3 C->C, ReLU, conv3x3 C->2, then ``offset_scale * tanh``.

    The last convolution starts at zero so training begins from the
    undeformed reference grid.
    """

    def __init__(self, embed_dim: int, offset_scale: float, rng: np.random.Generator, zero_last: bool = True):
        self.offset_scale = offset_scale
        self.conv1 = Conv3x3(embed_dim, embed_dim, rng)
        self.conv2 = Conv3x3(embed_dim, 2, rng, zero=zero_last)

    def forward(self, teacher: Tensor) -> Tensor:
        return ad.scale(ad.tanh(self.conv2(ad.relu(self.conv1(teacher)))), self.offset_scale)


def deform_sample(hist_feat: Tensor, points: Tensor) -> Tensor:
    """Bilinearly sample B x H x W x C features at B x H_G x W_G x 2 points -> B x N x C."""
    hist_feat, points = ad.as_tensor(hist_feat), ad.as_tensor(points)
    if points.ndim != 4 or points.shape[-1] != 2:
        raise ad.DimensionError(f"points must be B x H_G x W_G x 2, got {points.shape}")
    b, hg, wg, _ = points.shape
    flat = ad.reshape(points, (b, hg * wg, 2))
    return ad.bilinear_sample(hist_feat, flat)


class CrossAttention(Module):
    """Multi-head attention: queries from teacher tokens, keys/values from deformed tokens.

    Head outputs are concatenated, projected by the output layer and
    mean-pooled over tokens.
    """

    def __init__(self, cfg: FusionConfig, rng: np.random.Generator):
        c = cfg.embed_dim
        self.heads = cfg.heads
        self.head_dim = cfg.head_dim
        self.wq = Linear(c, c, rng)
        self.wk = Linear(c, c, rng)
        self.wv = Linear(c, c, rng)
        self.wo = Linear(c, c, rng)

    def _split(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        return ad.transpose(ad.reshape(x, (b, n, self.heads, self.head_dim)), (0, 2, 1, 3))

    def attend(self, teacher: Tensor, deformed: Tensor) -> tuple[Tensor, Tensor]:
        """Unpooled B x N x C output and the B x M x N x N attention weights."""
        if teacher.ndim != 3 or deformed.ndim != 3 or teacher.shape[::2] != deformed.shape[::2]:
            raise ad.DimensionError(f"attention got teacher {teacher.shape} and deformed {deformed.shape}")
        b, n, _ = teacher.shape
        q = self._split(self.wq(teacher))
        k = self._split(self.wk(deformed))
        v = self._split(self.wv(deformed))
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(self.head_dim))
        weights = ad.softmax(scores, axis=-1)
        heads = ad.matmul(weights, v)
        merged = ad.reshape(ad.transpose(heads, (0, 2, 1, 3)), (b, n, self.heads * self.head_dim))
        return self.wo(merged), weights

    def forward(self, teacher: Tensor, deformed: Tensor) -> Tensor:
        out, _ = self.attend(teacher, deformed)
        return ad.mean(out, axis=1)


def ge_con_loss(gene_emb: Tensor, sample_points: Tensor) -> Tensor:
    """Frobenius distance between gene and sample-point batch Gram matrices, divided by B."""
    gene_emb, sample_points = ad.as_tensor(gene_emb), ad.as_tensor(sample_points)
    b = gene_emb.shape[0]
    if sample_points.shape[0] != b:
        raise ad.DimensionError(f"batch mismatch: {b} gene rows vs {sample_points.shape[0]} point sets")
    flat = ad.reshape(sample_points, (b, -1))
    diff = ad.sub(ad.gram_matrix(gene_emb), ad.gram_matrix(flat))
    return ad.scale(ad.frobenius_norm(diff), 1.0 / b)


class SubspaceStream(Module):
    """Everything one subspace owns; the tumour and TME streams share no parameters."""

    def __init__(
        self,
        n_genes: int,
        in_channels: int,
        cfg: FusionConfig,
        rng: np.random.Generator,
        hidden: int = 128,
    ):
        self.cfg = cfg
        self.encoder = GenomicEncoder(n_genes, cfg.embed_dim, rng, hidden=hidden)
        self.projector = HistologyProjector(in_channels, cfg.embed_dim, rng)
        self.teacher = TeacherFusion(cfg.embed_dim, rng)
        self.offsets = OffsetNetwork(cfg.embed_dim, cfg.offset_scale, rng)
        self.attention = CrossAttention(cfg, rng)
        self._ref = reference_grid(*cfg.grid)

    def forward(self, genes_sub, grid, with_ge_con: bool = True) -> SubspaceFusionOutput:
        gene_emb = self.encoder(ad.as_tensor(genes_sub))
        hist = self.projector(grid)
        b, h, w, c = hist.shape
        if (h, w) != self.cfg.grid:
            raise ConfigError(f"histology grid {h}x{w} does not match fusion grid {self.cfg.grid}")
        teacher = self.teacher(gene_emb, hist)
        offsets = self.offsets(teacher)
        points = ad.clip(ad.add(offsets, self._ref), -1.0, 1.0)
        deformed = deform_sample(hist, points)
        fused = self.attention(ad.reshape(teacher, (b, h * w, c)), deformed)
        loss = ge_con_loss(gene_emb, points) if with_ge_con else None
        return SubspaceFusionOutput(gene_emb, teacher, offsets, points, fused, loss)


def run_subspace_stream(stream: SubspaceStream, genes, hist_grid, partition, subspace: str, with_ge_con: bool = True):
    """Select the subspace's gene columns and run its stream."""
    return stream(select_subspace(genes, partition, subspace), hist_grid, with_ge_con)
