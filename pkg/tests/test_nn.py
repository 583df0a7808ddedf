from __future__ import annotations

import numpy as np
import pytest

from lcdg import autodiff as ad
from lcdg.adapter import ConditionAdapter
from lcdg.autodiff import Tensor
from lcdg.nn import Adam, Conv2d, Linear

from conftest import small_adapter_config


def test_state_dict_round_trip(rng):
    a = ConditionAdapter(small_adapter_config(), seed=1)
    b = ConditionAdapter(small_adapter_config(), seed=2)
    a.train()
    with ad.no_grad():
        a(Tensor(rng.standard_normal((2, 5, 4, 4)).astype(np.float32)), 3)
    b.load_state_dict(a.state_dict())
    for (k, x), (_, y) in zip(sorted(a.state_dict().items()), sorted(b.state_dict().items())):
        assert np.array_equal(x, y), k


def test_state_dict_mismatch():
    a = ConditionAdapter(small_adapter_config())
    state = a.state_dict()
    state.pop(next(iter(state)))
    with pytest.raises(KeyError):
        a.load_state_dict(state)
    bad = ConditionAdapter(small_adapter_config(widths=(7, 4))).state_dict()
    with pytest.raises(ValueError):
        a.load_state_dict(bad)


def test_adam_minimises_quadratic():
    x = Tensor(np.array([3.0, -2.0]), requires_grad=True)
    opt = Adam([x], lr=0.1)
    for _ in range(300):
        opt.zero_grad()
        ad.sum_(ad.square(x - Tensor(np.array([1.0, 0.5])))).backward()
        opt.step()
    np.testing.assert_allclose(x.data, [1.0, 0.5], atol=1e-2)


def test_adam_state_round_trip(rng):
    lin = Linear(3, 2, rng)
    opt = Adam(lin.parameters(), lr=1e-2)
    for _ in range(3):
        opt.zero_grad()
        ad.mse(lin(Tensor(rng.standard_normal((4, 3)).astype(np.float32))), Tensor(np.zeros((4, 2), np.float32))).backward()
        opt.step()
    fresh = Adam(lin.parameters(), lr=1e-2)
    fresh.load_state_dict(opt.state_dict())
    assert fresh.step_count == 3
    assert all(np.array_equal(a, b) for a, b in zip(opt.m, fresh.m))


def test_frozen_context_restores_flags(rng):
    conv = Conv2d(2, 3, 3, rng)
    with conv.frozen():
        assert not any(p.requires_grad for p in conv.parameters())
    assert all(p.requires_grad for p in conv.parameters())


def test_astype_and_count(rng):
    ca = ConditionAdapter(small_adapter_config()).astype(np.float64)
    assert all(p.dtype == np.float64 for p in ca.parameters())
    assert ca.num_parameters() == sum(p.size for p in ca.parameters())


def test_train_eval_propagates():
    ca = ConditionAdapter(small_adapter_config())
    ca.eval()
    assert not any(m.training for m in ca.modules())
    ca.train()
    assert all(m.training for m in ca.modules())
