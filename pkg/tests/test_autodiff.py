from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lcdg import autodiff as ad
from lcdg.autodiff import Tensor
from lcdg.gradcheck import CASES, TOL, adapter_stack_error, check, rel_error, run_op

SEEDS = range(20)


@pytest.mark.parametrize("op", sorted(CASES))
def test_gradcheck_all_seeds(op):
    worst = max(run_op(op, s).rel_err for s in SEEDS)
    assert worst < TOL, f"{op}: {worst:.2e}"


def test_silu_gradient_tighter():
    rng = np.random.default_rng(7)
    err = check(lambda ts: ad.silu(ts[0]), [rng.standard_normal((6, 5)) * 3], rng)
    assert err < 1e-5


def test_adapter_stack_gradient():
    assert adapter_stack_error(seed=0) < 1e-3


def test_linear_mse_closed_form():
    rng = np.random.default_rng(0)
    A = rng.standard_normal((6, 4))
    x = Tensor(rng.standard_normal((4,)), requires_grad=True)
    c = rng.standard_normal(6)
    y = ad.matmul(Tensor(A), ad.reshape(x, (4, 1)))
    loss = ad.mse(ad.reshape(y, (6,)), Tensor(c))
    loss.backward()
    expected = 2.0 / 6 * A.T @ (A @ x.data - c)
    np.testing.assert_allclose(x.grad, expected, atol=1e-12)


def test_grad_accumulates_over_reuse():
    x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    y = ad.sum_(x * x + x)
    y.backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        y = x * 2.0
    assert not y.requires_grad
    assert ad.is_grad_enabled()


def test_frozen_parent_gets_no_grad():
    w = Tensor(np.ones((2, 2)))
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    ad.sum_(ad.matmul(x, w)).backward()
    assert w.grad is None
    assert x.grad is not None


def test_broadcast_mismatch_raises():
    with pytest.raises(ad.ShapeError):
        ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))


def test_conv_channel_mismatch_raises():
    with pytest.raises(ad.ShapeError):
        ad.conv2d(Tensor(np.ones((1, 3, 4, 4))), Tensor(np.ones((2, 2, 3, 3))))


def test_backward_on_nonscalar_raises():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ad.GradError):
        (x * 2.0).backward()


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(3, 6), st.integers(1, 2), st.integers(0, 1), st.integers(0, 2**31 - 1))
def test_conv2d_matches_direct_sum(n, c, size, stride, pad, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, c, size, size))
    w = rng.standard_normal((2, c, 3, 3))
    if size + 2 * pad < 3:
        return
    out = ad.conv2d(Tensor(x), Tensor(w), None, stride=stride, padding=pad).data
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (size + 2 * pad - 3) // stride + 1
    ref = np.zeros((n, 2, ho, ho))
    for i in range(ho):
        for j in range(ho):
            patch = xp[:, :, i * stride : i * stride + 3, j * stride : j * stride + 3]
            ref[:, :, i, j] = np.einsum("nchw,ochw->no", patch, w)
    assert rel_error(out, ref) < 1e-10


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=20))
def test_sigmoid_bounded_and_stable(xs):
    y = ad.sigmoid(Tensor(np.array(xs))).data
    assert np.all((y >= 0) & (y <= 1)) and np.all(np.isfinite(y))


def test_cross_entropy_matches_log_softmax():
    rng = np.random.default_rng(1)
    logits = rng.standard_normal((5, 4))
    labels = np.array([0, 1, 3, 2, 1])
    got = ad.cross_entropy(Tensor(logits), labels).item()
    lse = np.log(np.exp(logits).sum(1))
    assert got == pytest.approx(float(np.mean(lse - logits[np.arange(5), labels])), rel=1e-12)
