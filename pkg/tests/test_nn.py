"""Neural building blocks: shapes, attention properties, initialization."""

import numpy as np
import pytest

from rlip import autodiff as ad
from rlip.autodiff import Parameters, Tensor
from rlip.nn import (Linear, MLP, MultiHeadAttention, TransformerDecoder,
                     TransformerEncoder, uniform_init)


def make_rng(seed=0):
    return np.random.default_rng(seed)


def test_linear_identity_passthrough():
    params = Parameters()
    lin = Linear(params, "l", 3, 3, make_rng())
    lin.w.data = np.eye(3)
    lin.b.data = np.zeros(3)
    x = np.array([[0.3, -1.0, 2.0]])
    out = lin(ad.constant(x))
    assert np.allclose(out.data, x)


def test_uniform_init_bounds():
    vals = uniform_init(make_rng(5), 64, (64, 64))
    bound = 1 / 8.0
    assert vals.min() >= -bound and vals.max() <= bound
    assert vals.std() > bound / 4  # actually spread out


def test_attention_rows_are_convex_combinations():
    params = Parameters()
    attn = MultiHeadAttention(params, "a", 16, 4, make_rng(1))
    x = ad.constant(make_rng(2).normal(size=(2, 5, 16)))
    attn(x, x, keep_weights=True)
    w = attn.last_weights
    assert w.shape == (2, 4, 5, 5)
    assert np.all(w >= 0)
    assert np.allclose(w.sum(axis=-1), 1.0, atol=1e-6)


def test_attention_mask_hides_keys():
    params = Parameters()
    attn = MultiHeadAttention(params, "a", 8, 2, make_rng(3))
    x = ad.constant(make_rng(4).normal(size=(1, 4, 8)))
    mask = np.zeros((1, 1, 1, 4))
    mask[..., -1] = -1e9
    attn(x, x, mask=mask, keep_weights=True)
    assert np.all(attn.last_weights[..., -1] < 1e-8)


def test_attention_gradients():
    params = Parameters()
    attn = MultiHeadAttention(params, "a", 8, 2, make_rng(5))
    x_data = make_rng(6).normal(size=(2, 3, 8))

    def build():
        x = ad.constant(x_data)
        return (attn(x, x) ** 2.0).mean()

    err = ad.gradient_check(build, params.tensors(), epsilon=1e-5,
                            samples_per_param=3, rng=make_rng(7))
    assert err < 1e-6


def test_encoder_decoder_shapes_and_determinism():
    params = Parameters()
    enc = TransformerEncoder(params, "enc", 16, 4, 32, 2, make_rng(8))
    dec = TransformerDecoder(params, "dec", 16, 4, 32, 2, make_rng(9))
    x = make_rng(10).normal(size=(3, 7, 16))
    q = make_rng(11).normal(size=(3, 4, 16))
    mem1 = enc(ad.constant(x))
    out1 = dec(ad.constant(q), mem1)
    mem2 = enc(ad.constant(x))
    out2 = dec(ad.constant(q), mem2)
    assert mem1.shape == (3, 7, 16)
    assert out1.shape == (3, 4, 16)
    assert np.array_equal(out1.data, out2.data)


def test_full_transformer_gradcheck():
    params = Parameters()
    enc = TransformerEncoder(params, "enc", 8, 2, 16, 1, make_rng(12))
    dec = TransformerDecoder(params, "dec", 8, 2, 16, 1, make_rng(13))
    x = make_rng(14).normal(size=(1, 3, 8))
    q = make_rng(15).normal(size=(1, 2, 8))
    # project onto a random direction so the loss depends on every layer
    # (a plain mean of squares is almost constant after the output LN)
    proj = make_rng(17).normal(size=(1, 2, 8))

    def build():
        out = dec(ad.constant(q), enc(ad.constant(x)))
        return (out * ad.constant(proj)).sum()

    err = ad.gradient_check(build, params.tensors(), epsilon=1e-5,
                            samples_per_param=2, rng=make_rng(16))
    assert err < 1e-5


def test_mlp_depth_and_shapes():
    params = Parameters()
    mlp = MLP(params, "m", [8, 16, 16, 4], make_rng(17))
    out = mlp(ad.constant(make_rng(18).normal(size=(5, 8))))
    assert out.shape == (5, 4)
    assert len(mlp.layers) == 3


def test_duplicate_parameter_name_rejected():
    params = Parameters()
    params.create("w", np.zeros(3))
    with pytest.raises(ValueError):
        params.create("w", np.zeros(3))
