"""Genomic and histology encoders feeding the two fusion streams."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError
from .nn import Linear, Module

SUBSPACES = ("t", "e")


class GenomicEncoder(Module):
    """Two SELU layers mapping one gene subspace to the embedding width.

    Weights use LeCun-normal initialisation (variance 1/fan_in) and zero
    biases, the self-normalising recipe. No dropout.
    """

    def __init__(self, n_genes: int, embed_dim: int, rng: np.random.Generator, hidden: int = 128):
        if n_genes < 1:
            raise ConfigError("genomic encoder needs at least one gene")
        self.n_genes = n_genes
        self.fc1 = Linear(n_genes, hidden, rng)
        self.fc2 = Linear(hidden, embed_dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return ad.selu(self.fc2(ad.selu(self.fc1(x))))


class HistologyProjector(Module):
    """Per-cell linear projection of a B x H x W x C_in grid to the embedding width."""

    def __init__(self, in_channels: int, embed_dim: int, rng: np.random.Generator, identity: bool = False):
        self.proj = Linear(in_channels, embed_dim, rng)
        if identity:
            if in_channels != embed_dim:
                raise ConfigError("identity projector needs in_channels == embed_dim")
            self.proj.weight.data[...] = np.eye(in_channels)

    def forward(self, grid) -> Tensor:
        grid = ad.as_tensor(grid)
        if grid.ndim != 4:
            raise ad.DimensionError(f"histology grid must be B x H x W x C, got {grid.shape}")
        return self.proj(grid)


def select_subspace(genes: np.ndarray, partition, subspace: str) -> np.ndarray:
    """Columns of a B x G expression matrix belonging to subspace ``t`` or ``e``."""
    if subspace not in SUBSPACES:
        raise ConfigError(f"unknown subspace {subspace!r}; expected 't' or 'e'")
    idx = partition.tumour if subspace == "t" else partition.tme
    if len(idx) == 0:
        raise ConfigError(f"subspace {subspace!r} has no genes")
    return np.asarray(genes, dtype=np.float64)[:, idx]


def encode_genes(encoder: GenomicEncoder, genes: np.ndarray, partition, subspace: str) -> Tensor:
    return encoder(Tensor(select_subspace(genes, partition, subspace)))


def encode_histology(projector: HistologyProjector, grid) -> Tensor:
    grid = ad.as_tensor(grid)
    if grid.ndim == 4 and grid.shape[-1] != projector.proj.in_features:
        raise ad.DimensionError(
            f"histology grid has {grid.shape[-1]} channels, projector expects {projector.proj.in_features}"
        )
    return projector(grid)
