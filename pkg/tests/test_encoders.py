import numpy as np
import pytest

from ksfusion import autodiff as ad
from ksfusion.autodiff import DimensionError, Tensor
from ksfusion.data import Partition
from ksfusion.encoders import GenomicEncoder, HistologyProjector, encode_genes, encode_histology, select_subspace
from ksfusion.errors import ConfigError


def test_zero_input_with_zero_bias_gives_zero_output(rng):
    enc = GenomicEncoder(6, 4, rng, hidden=8)
    out = enc(Tensor(np.zeros((2, 6)))).numpy()
    assert np.all(np.isfinite(out))
    assert np.array_equal(out, np.zeros((2, 4)))


def test_identical_samples_identical_rows(rng):
    enc = GenomicEncoder(6, 4, rng, hidden=8)
    x = rng.normal(size=(1, 6))
    out = enc(Tensor(np.vstack([x, x]))).numpy()
    assert np.array_equal(out[0], out[1])


def test_encoder_is_batch_permutation_equivariant(rng):
    enc = GenomicEncoder(6, 4, rng, hidden=8)
    x = rng.normal(size=(5, 6))
    perm = rng.permutation(5)
    assert np.allclose(enc(Tensor(x)).numpy()[perm], enc(Tensor(x[perm])).numpy(), atol=1e-15)


def test_encoder_weight_gradient_matches_finite_differences(rng):
    enc = GenomicEncoder(5, 3, rng, hidden=6)
    x = rng.normal(size=(4, 5))
    w = rng.normal(size=(4, 3))

    def fn(w1, b1, w2, b2):
        hidden = ad.selu(ad.linear(Tensor(x), w1, b1))
        return ad.sum_(ad.mul(ad.selu(ad.linear(hidden, w2, b2)), w))

    arrays = [enc.fc1.weight.data, rng.normal(size=6) * 0.1, enc.fc2.weight.data, rng.normal(size=3) * 0.1]
    assert ad.gradcheck(fn, arrays) <= 1e-5


def test_encoder_default_hidden_width(rng):
    enc = GenomicEncoder(59, 64, rng)
    assert enc.fc1.weight.shape == (59, 128)
    assert enc.fc2.weight.shape == (128, 64)
    # LeCun-normal: weight variance close to 1 / fan_in
    assert abs(enc.fc1.weight.data.var() * 59 - 1) < 0.1


def test_subspace_selection_and_isolation(rng):
    part = Partition(np.array([0, 3]), np.array([1, 2, 4]))
    genes = rng.normal(size=(3, 5))
    assert np.array_equal(select_subspace(genes, part, "t"), genes[:, [0, 3]])
    enc = GenomicEncoder(2, 4, rng, hidden=5)
    before = encode_genes(enc, genes, part, "t").numpy()
    genes[:, [1, 2, 4]] += 100.0
    assert np.array_equal(encode_genes(enc, genes, part, "t").numpy(), before)


def test_unknown_or_empty_subspace(rng):
    part = Partition(np.array([], dtype=np.int64), np.arange(3))
    with pytest.raises(ConfigError):
        select_subspace(np.zeros((1, 3)), part, "t")
    with pytest.raises(ConfigError):
        select_subspace(np.zeros((1, 3)), part, "x")


def test_identity_projector(rng):
    proj = HistologyProjector(4, 4, rng, identity=True)
    grid = rng.normal(size=(2, 3, 3, 4))
    assert np.array_equal(encode_histology(proj, grid).numpy(), grid)


def test_constant_grid_gives_constant_output(rng):
    proj = HistologyProjector(3, 5, rng)
    out = encode_histology(proj, np.full((1, 4, 4, 3), 0.7)).numpy()
    assert np.all(out == out[0, 0, 0])


def test_projector_channel_mismatch(rng):
    proj = HistologyProjector(3, 5, rng)
    with pytest.raises(DimensionError):
        encode_histology(proj, np.zeros((1, 2, 2, 4)))


def test_projector_gradient(rng):
    w = rng.normal(size=(2, 3, 3, 5))

    def fn(grid, weight, bias):
        return ad.sum_(ad.mul(ad.linear(grid, weight, bias), w))

    assert ad.gradcheck(fn, [rng.normal(size=(2, 3, 3, 4)), rng.normal(size=(4, 5)), rng.normal(size=5)]) <= 1e-5
