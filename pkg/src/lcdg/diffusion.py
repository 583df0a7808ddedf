"""Noise schedule, forward noising, the denoiser objective and timestep resampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    posterior_vars: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    def check_t(self, t: int) -> None:
        if not 0 <= t < self.T:
            raise IndexError(f"timestep {t} outside [0, {self.T})")


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02, kind: str = "linear") -> NoiseSchedule:
    """Linear-beta schedule with float64 tables.

    Index ``t`` runs 0..T-1; ``posterior_vars[0]`` is ``betas[0]``.
    """
    if kind != "linear":
        raise ValueError(f"unsupported schedule kind {kind!r}")
    if T < 2:
        raise ValueError("T must be >= 2")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.empty(T)
    acc = 1.0
    for i, a in enumerate(alphas):
        acc = acc * a
        alpha_bars[i] = acc
    prev = np.concatenate([[1.0], alpha_bars[:-1]])
    posterior = betas * (1.0 - prev) / (1.0 - alpha_bars)
    posterior[0] = betas[0]
    for arr in (betas, alphas, alpha_bars, posterior):
        arr.setflags(write=False)
    return NoiseSchedule(betas, alphas, alpha_bars, posterior)


def q_sample(z0, t: int, eps, sched: NoiseSchedule):
    """``sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps``.

    Works on arrays or Tensors; ``t`` may also be an integer array of
    per-sample timesteps (leading axis).
    """
    t_arr = np.asarray(t)
    if np.any(t_arr < 0) or np.any(t_arr >= sched.T):
        raise IndexError(f"timestep {t} outside [0, {sched.T})")
    if isinstance(z0, Tensor) or isinstance(eps, Tensor):
        z0 = ad.as_tensor(z0)
        eps = ad.as_tensor(eps, dtype=z0.dtype)
        if eps.shape != z0.shape:
            raise ad.ShapeError(f"eps shape {eps.shape} != z0 shape {z0.shape}")
        if t_arr.ndim == 0:
            ab = float(sched.alpha_bars[int(t_arr)])
            return z0 * np.sqrt(ab) + eps * np.sqrt(1.0 - ab)
        a, b = _coeffs(sched, t_arr, z0.ndim, z0.dtype)
        return z0 * Tensor(a) + eps * Tensor(b)
    z0 = np.asarray(z0)
    eps = np.asarray(eps)
    if eps.shape != z0.shape:
        raise ad.ShapeError(f"eps shape {eps.shape} != z0 shape {z0.shape}")
    if t_arr.ndim == 0:
        ab = sched.alpha_bars[int(t_arr)]
        return (np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps).astype(z0.dtype, copy=False)
    a, b = _coeffs(sched, t_arr, z0.ndim, z0.dtype)
    return a * z0 + b * eps


def _coeffs(sched: NoiseSchedule, t: np.ndarray, ndim: int, dtype):
    ab = sched.alpha_bars[t].reshape((-1,) + (1,) * (ndim - 1))
    return np.sqrt(ab).astype(dtype), np.sqrt(1.0 - ab).astype(dtype)


def resample_timestep(t_in, T: int, n: float):
    """Map a draw ``t_in`` in {1..T} to ``round((1 - (t_in/T)**n) * T)``, clamped to [0, T-1].

    n = 1 gives the uniform complement ``T - t_in``; n > 1 pushes draws
    toward the high-noise end. Accepts scalars or integer arrays.
    """
    if n < 1:
        raise ValueError("resampling magnitude n must be >= 1")
    t = np.asarray(t_in, dtype=np.float64)
    # floor(x + 0.5) keeps the n = 1 case exact (no banker's rounding)
    t_hat = np.floor((1.0 - (t / T) ** n) * T + 0.5)
    t_hat = np.clip(t_hat, 0, T - 1).astype(np.int64)
    return int(t_hat) if t_hat.ndim == 0 else t_hat


@dataclass(frozen=True)
class TimestepSampler:
    T: int
    n: float = 2.0
    mode: str = "resampled"

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.mode not in ("uniform", "resampled"):
            raise ValueError(f"unknown mode {self.mode!r}")

    def draw(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.mode == "uniform":
            return rng.integers(0, self.T, size=size)
        # continuous t_in = u*T with u in (0, 1]; flooring gives
        # P(t_hat >= k) = (1 - k/T)^(1/n) exactly (the min only catches u**n underflow)
        u = 1.0 - rng.random(size)
        return np.minimum(np.floor((1.0 - u**self.n) * self.T), self.T - 1).astype(np.int64)


def denoiser_loss(
    model,
    z0: np.ndarray,
    c,
    sched: NoiseSchedule,
    rng: np.random.Generator,
    p_uncond: float = 0.1,
    t: np.ndarray | None = None,
) -> Tensor:
    """Noise-prediction MSE for a batch.

    ``model(z_t, t, c)`` must return a Tensor the shape of ``z_t``. Class ids
    are swapped for ``model.null_class`` with probability ``p_uncond``; the
    drop is skipped when ``c`` is None. Draw order: t, eps, drop mask.
    """
    n = z0.shape[0]
    if t is None:
        t = rng.integers(0, sched.T, size=n)
    eps = rng.standard_normal(z0.shape).astype(z0.dtype)
    if c is not None:
        c = np.array(c, dtype=np.int64, copy=True)
        drop = rng.random(n) < p_uncond
        c[drop] = model.null_class
    zt = q_sample(z0, t, eps, sched)
    pred = model(Tensor(zt), t, c)
    return ad.mse(pred, Tensor(eps))
