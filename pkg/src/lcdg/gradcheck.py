"""Central finite-difference checks for every differentiable op, in float64."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

H = 1e-5
TOL = 1e-4


@dataclass
class GradResult:
    op: str
    seed: int
    rel_err: float

    @property
    def ok(self) -> bool:
        return self.rel_err < TOL


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-8)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = H) -> np.ndarray:
    """d f / d x by central differences, perturbing ``x`` in place."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def check(build: Callable[[list[Tensor]], Tensor], inputs: list[np.ndarray], rng: np.random.Generator,
          h: float = H) -> float:
    """Max relative error over all inputs of a random projection of ``build``'s output."""
    tensors = [Tensor(x.astype(np.float64), requires_grad=True) for x in inputs]
    out = build(tensors)
    proj = rng.standard_normal(out.shape)

    def scalar(out_t: Tensor) -> Tensor:
        return ad.sum_(out_t * Tensor(proj)) if out_t.ndim else out_t * float(proj)

    scalar(out).backward()
    worst = 0.0
    for t in tensors:
        def f():
            with ad.no_grad():
                return float(scalar(build(tensors)).data)

        num = numeric_grad(f, t.data, h)
        worst = max(worst, rel_error(t.grad, num))
    return worst


def _away_from_zero(x: np.ndarray, margin: float = 1e-2) -> np.ndarray:
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin + x, x)


def _cases():
    def bn_train(ts):
        state = ad.BatchNormState(3, np.float64)
        return ad.batchnorm2d(ts[0], ts[1], ts[2], state, training=True)

    def bn_eval(ts):
        state = ad.BatchNormState(3, np.float64)
        state.running_mean = np.array([0.1, -0.2, 0.3])
        state.running_var = np.array([0.5, 1.5, 2.0])
        state.num_batches_tracked = 1
        return ad.batchnorm2d(ts[0], ts[1], ts[2], state, training=False)

    return {
        "add": (lambda ts: ts[0] + ts[1], lambda r: [r.standard_normal((3, 4)), r.standard_normal((4,))]),
        "sub": (lambda ts: ts[0] - ts[1], lambda r: [r.standard_normal((3, 4)), r.standard_normal((3, 1))]),
        "mul": (lambda ts: ts[0] * ts[1], lambda r: [r.standard_normal((2, 3, 4)), r.standard_normal((3, 1))]),
        "scalar_mul": (lambda ts: ad.scalar_mul(ts[0], 1.7), lambda r: [r.standard_normal((5,))]),
        "square": (lambda ts: ad.square(ts[0]), lambda r: [r.standard_normal((4, 3))]),
        "sum": (lambda ts: ad.sum_(ts[0], axis=1), lambda r: [r.standard_normal((3, 4, 2))]),
        "mean": (lambda ts: ad.mean(ts[0], axis=(2, 3)), lambda r: [r.standard_normal((2, 3, 4, 4))]),
        "reshape": (lambda ts: ad.reshape(ts[0], (6, 4)), lambda r: [r.standard_normal((2, 3, 4))]),
        "matmul": (lambda ts: ad.matmul(ts[0], ts[1]), lambda r: [r.standard_normal((3, 5)), r.standard_normal((5, 2))]),
        "sigmoid": (lambda ts: ad.sigmoid(ts[0]), lambda r: [r.standard_normal((4, 4)) * 2]),
        "silu": (lambda ts: ad.silu(ts[0]), lambda r: [r.standard_normal((4, 4)) * 2]),
        "relu": (lambda ts: ad.relu(ts[0]), lambda r: [_away_from_zero(r.standard_normal((4, 4)))]),
        "linear": (lambda ts: ad.linear(ts[0], ts[1], ts[2]),
                   lambda r: [r.standard_normal((4, 5)), r.standard_normal((5, 3)), r.standard_normal((3,))]),
        "conv2d": (lambda ts: ad.conv2d(ts[0], ts[1], ts[2], stride=1, padding=1),
                   lambda r: [r.standard_normal((2, 3, 8, 8)), r.standard_normal((4, 3, 3, 3)) * 0.3, r.standard_normal((4,))]),
        "conv2d_strided": (lambda ts: ad.conv2d(ts[0], ts[1], ts[2], stride=2, padding=0),
                           lambda r: [r.standard_normal((1, 2, 7, 7)), r.standard_normal((3, 2, 3, 3)), r.standard_normal((3,))]),
        "conv2d_1x1": (lambda ts: ad.conv2d(ts[0], ts[1], ts[2]),
                       lambda r: [r.standard_normal((2, 3, 4, 4)), r.standard_normal((2, 3, 1, 1)), r.standard_normal((2,))]),
        "batchnorm2d_train": (bn_train, lambda r: [r.standard_normal((4, 3, 3, 3)), 1 + 0.1 * r.standard_normal(3), r.standard_normal(3)]),
        "batchnorm2d_eval": (bn_eval, lambda r: [r.standard_normal((2, 3, 3, 3)), 1 + 0.1 * r.standard_normal(3), r.standard_normal(3)]),
        "upsample_nearest": (lambda ts: ad.upsample(ts[0], 2, "nearest"), lambda r: [r.standard_normal((1, 2, 3, 3))]),
        "upsample_bilinear": (lambda ts: ad.upsample(ts[0], 2, "bilinear"), lambda r: [r.standard_normal((1, 2, 4, 4))]),
        "avg_pool2d": (lambda ts: ad.avg_pool2d(ts[0], 2), lambda r: [r.standard_normal((2, 2, 4, 4))]),
        "concat": (lambda ts: ad.concat([ts[0], ts[1]], axis=1),
                   lambda r: [r.standard_normal((1, 3, 2, 2)), r.standard_normal((1, 5, 2, 2))]),
        "embedding": (lambda ts: ad.embedding(ts[0], np.array([0, 2, 2, 1])), lambda r: [r.standard_normal((3, 4))]),
        "mse": (lambda ts: ad.mse(ts[0], ts[1]), lambda r: [r.standard_normal((3, 4)), r.standard_normal((3, 4))]),
        "per_sample_mse": (lambda ts: ad.per_sample_mse(ts[0], ts[1]),
                           lambda r: [r.standard_normal((3, 2, 2)), r.standard_normal((3, 2, 2))]),
        "cross_entropy": (lambda ts: ad.cross_entropy(ts[0], np.array([0, 3, 1])), lambda r: [r.standard_normal((3, 4))]),
    }


CASES = _cases()


def run_op(name: str, seed: int) -> GradResult:
    build, make = CASES[name]
    rng = np.random.default_rng(seed)
    inputs = make(rng)
    return GradResult(name, seed, check(build, inputs, rng))


def run_suite(seeds: int = 20, ops: list[str] | None = None) -> list[GradResult]:
    return [run_op(name, s) for name in (ops or list(CASES)) for s in range(seeds)]


def adapter_stack_error(seed: int = 0, size: int = 8) -> float:
    """Gradient error of a small CA stack's loss w.r.t. its input features."""
    from .adapter import AdapterConfig, ConditionAdapter, ca_loss

    rng = np.random.default_rng(seed)
    ca = ConditionAdapter(AdapterConfig(in_channels=5, cond_channels=1, widths=(6, 4), pe_dim=8, emb_dim=8), seed=seed)
    ca.astype(np.float64)
    x = rng.standard_normal((2, 5, size, size))
    target = rng.random((2, 1, size, size))
    return check(lambda ts: ca_loss(ca, ts[0], 37, target), [x], rng)
