from __future__ import annotations

import numpy as np
import pytest

from lcdg import autodiff as ad
from lcdg.autodiff import Tensor
from lcdg.unet import DenoiserModel, UNetConfig, config_from_dict, sinusoidal_embed


def test_embeddings_pairwise_distinct():
    e = sinusoidal_embed(np.arange(1000), 64, np.float64)
    sq = (e * e).sum(1)
    d2 = sq[:, None] + sq[None, :] - 2 * e @ e.T
    np.fill_diagonal(d2, np.inf)
    assert d2.min() > 0


def test_embedding_odd_dim_rejected():
    with pytest.raises(ValueError):
        sinusoidal_embed(3, 7)


def test_forward_shapes_and_taps(tiny_model, tiny_cfg):
    z = Tensor(np.random.default_rng(0).standard_normal((2, 1, 16, 16)).astype(np.float32))
    eps, taps = tiny_model.forward_with_taps(z, np.array([3, 700]), np.array([0, 1]))
    assert eps.shape == (2, 1, 16, 16)
    spec = tiny_model.tap_spec
    assert len(taps) == len(spec)
    for tap, info in zip(taps, spec.taps):
        assert tap.shape[1] == info.channels and tap.shape[2] == info.resolution


def test_bad_input_shape(tiny_model):
    with pytest.raises(ad.ShapeError):
        tiny_model(Tensor(np.zeros((1, 1, 8, 8), np.float32)), 0, None)


def test_bad_class_id(tiny_model):
    with pytest.raises(ValueError):
        tiny_model(Tensor(np.zeros((1, 1, 16, 16), np.float32)), 0, 99)


def test_null_class_is_extra_row(tiny_model, tiny_cfg):
    assert tiny_model.null_class == tiny_cfg.num_classes
    z = Tensor(np.zeros((1, 1, 16, 16), np.float32))
    a = tiny_model(z, 5, None).data
    b = tiny_model(z, 5, tiny_model.null_class).data
    np.testing.assert_array_equal(a, b)


def test_tap_gradient_nonzero(tiny_model):
    z = Tensor(np.random.default_rng(1).standard_normal((1, 1, 16, 16)), requires_grad=True)
    tiny_model.astype(np.float64)
    _, taps = tiny_model.forward_with_taps(z, 100, 0)
    for tap in taps:
        z.zero_grad()
        with tiny_model.frozen():
            _, again = tiny_model.forward_with_taps(z, 100, 0)
            ad.sum_(again[taps.index(tap)]).backward()
        assert np.abs(z.grad).max() > 0


def test_seed_determinism(tiny_cfg):
    a = DenoiserModel(tiny_cfg, seed=4).state_dict()
    b = DenoiserModel(tiny_cfg, seed=4).state_dict()
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_config_round_trip(tiny_model):
    cfg = config_from_dict(tiny_model.describe()["config"])
    assert DenoiserModel(cfg).describe()["architecture_hash"] == tiny_model.describe()["architecture_hash"]


def test_image_size_divisibility():
    with pytest.raises(ValueError):
        UNetConfig(image_size=18, channel_mults=(1, 2, 4))
