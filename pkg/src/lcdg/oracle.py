"""Linear-Gaussian world with closed-form scores, used to check the guided sampler.

Data are ``z_0 ~ N(m, s2 I)`` in ``dim`` dimensions and the condition
"adapter" is the identity, so with a mean-squared distance every guided
update is affine in the state and chain moments follow exact recursions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .diffusion import NoiseSchedule


@dataclass
class LinearGaussianWorld:
    mean: np.ndarray
    var: float
    sched: NoiseSchedule

    def __post_init__(self):
        if self.var <= 0:
            raise ValueError(f"data variance must be positive, got {self.var}")
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def _k(self, t: int) -> float:
        ab = float(self.sched.alpha_bars[t])
        return math.sqrt(1.0 - ab) / (ab * self.var + 1.0 - ab)

    def eps_star(self, z: np.ndarray, t: int) -> np.ndarray:
        """Exact noise prediction E[eps | z_t]."""
        ab = float(self.sched.alpha_bars[t])
        return self._k(t) * (z - math.sqrt(ab) * self.mean)

    def posterior_mean_x0(self, z: np.ndarray, t: int) -> np.ndarray:
        """E[z_0 | z_t]; tends to the data mean at z_t = 0 as abar_t -> 0."""
        ab = float(self.sched.alpha_bars[t])
        shrink = ab * self.var / self.marginal_var(t)
        return self.mean + shrink * (np.asarray(z) / math.sqrt(ab) - self.mean)

    def marginal_var(self, t: int) -> float:
        ab = float(self.sched.alpha_bars[t])
        return ab * self.var + 1.0 - ab

    # -- exact moment recursions -------------------------------------------

    def _ddpm_coeffs(self, t: int) -> tuple[float, np.ndarray, float]:
        """Unguided step as ``z_{t-1} = a * z_t + b + sqrt(var) * noise``."""
        s = self.sched
        ab, al, be = float(s.alpha_bars[t]), float(s.alphas[t]), float(s.betas[t])
        k = self._k(t)
        a = (1.0 - be * k / math.sqrt(1.0 - ab)) / math.sqrt(al)
        b = (be * k * math.sqrt(ab) / math.sqrt(1.0 - ab)) / math.sqrt(al) * self.mean
        var = float(s.posterior_vars[t])
        return a, b, var

    def ddpm_moments(self, c_ext: np.ndarray, weight: float, t_trunc: int = 1,
                     mean_T: np.ndarray | None = None, var_T: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
        """Mean and per-coordinate variance of z_0 for the guided ancestral chain.

        Guidance with distance ``mean((z - c_ext)**2)`` and effective weight
        ``weight`` adds ``weight * var_t * (2/dim) * (c_ext - z_t)`` to the
        mean at every step with ``t + 1 >= t_trunc``.
        """
        c_ext = np.asarray(c_ext, dtype=np.float64)
        m = np.zeros(self.dim) if mean_T is None else np.asarray(mean_T, dtype=np.float64).copy()
        v = np.full(self.dim, var_T, dtype=np.float64)
        for t in range(self.sched.T - 1, -1, -1):
            a, b, var = self._ddpm_coeffs(t)
            if t + 1 >= t_trunc:
                gamma = weight * var * 2.0 / self.dim
                a_eff = a - gamma
                b = b + gamma * c_ext
            else:
                a_eff = a
            m = a_eff * m + b
            v = a_eff * a_eff * v + (var if t > 0 else 0.0)
        return m, v

    def ddim_endpoint(self, z_T: np.ndarray, timesteps: list[tuple[int, int]], c_ext: np.ndarray,
                      weight: float, t_trunc: int = 1) -> np.ndarray:
        """Deterministic (eta = 0) guided DDIM endpoint from ``z_T``.

        The guided noise estimate is ``eps* + sqrt(1 - abar) * weight * (2/dim) * (z - c_ext)``.
        """
        z = np.asarray(z_T, dtype=np.float64).copy()
        c_ext = np.asarray(c_ext, dtype=np.float64)
        for t, t_prev in timesteps:
            ab = float(self.sched.alpha_bars[t])
            ab_prev = float(self.sched.alpha_bars[t_prev]) if t_prev >= 0 else 1.0
            eps = self.eps_star(z, t)
            if t + 1 >= t_trunc and weight:
                eps = eps + math.sqrt(1.0 - ab) * weight * (2.0 / self.dim) * (z - c_ext)
            x0 = (z - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)
            z = math.sqrt(ab_prev) * x0 + math.sqrt(1.0 - ab_prev) * eps
        return z


class OracleBackend:
    """Sampler backend: exact eps*, identity condition map, float64."""

    dtype = np.float64
    cond_channels = None

    def __init__(self, world: LinearGaussianWorld):
        self.world = world
        self.sample_shape = (world.dim,)

    def eps(self, z: np.ndarray, t: int, c) -> np.ndarray:
        return self.world.eps_star(z, t)

    def eps_and_condition(self, z: np.ndarray, t: int, c):
        leaf = Tensor(z, requires_grad=True)
        return self.world.eps_star(z, t), leaf, leaf

    def condition(self, z: np.ndarray, t: int, c) -> np.ndarray:
        return z.copy()


@dataclass
class OracleCheck:
    name: str
    value: float
    threshold: float

    @property
    def ok(self) -> bool:
        return bool(self.value < self.threshold)


def default_world(sched: NoiseSchedule) -> LinearGaussianWorld:
    return LinearGaussianWorld(np.array([0.5, -0.3, 1.0, 0.0]), 0.25, sched)


def run_oracle_checks(sched: NoiseSchedule, chains: int = 10_000, seed: int = 0) -> list[OracleCheck]:
    """Guided DDPM mean (in standard errors), guided DDIM endpoint and one-step DDIM errors."""
    from .sampler import GuidanceConfig, sample, timestep_plan

    world = default_world(sched)
    backend = OracleBackend(world)
    c_ext = np.array([1.0, 1.0, -1.0, 0.5])
    out = []

    cfg = GuidanceConfig(beta=1.0, t_trunc=1, omega=1.0, sampler="ddpm", alpha_mode="unit", seed=seed)
    z, _ = sample(backend, backend, None, c_ext, cfg, sched, count=chains)
    mean, var = world.ddpm_moments(c_ext, weight=1.0)
    z_scores = np.abs(z.mean(axis=0) - mean) / np.sqrt(var / chains)
    out.append(OracleCheck("ddpm_guided_mean_stderr", float(z_scores.max()), 3.0))

    cfg = GuidanceConfig(beta=1.0, t_trunc=1, omega=1.0, sampler="ddim", alpha_mode="unit", seed=seed,
                         clip_x0=False)
    z_T = np.random.default_rng(seed).standard_normal(world.dim)
    z, _ = sample(backend, backend, None, c_ext, cfg, sched, count=1, z_T=z_T)
    target = world.ddim_endpoint(z_T, timestep_plan(cfg, sched.T), c_ext, weight=1.0)
    out.append(OracleCheck("ddim_guided_endpoint_abs", float(np.abs(z[0] - target).max()), 1e-2))

    cfg = GuidanceConfig(beta=0.0, t_trunc=sched.T, omega=1.0, sampler="ddim", ddim_steps=1, seed=seed,
                         clip_x0=False)
    z, _ = sample(backend, None, None, None, cfg, sched, count=1, z_T=np.zeros(world.dim))
    target = world.posterior_mean_x0(np.zeros(world.dim), sched.T - 1)
    out.append(OracleCheck("ddim_single_step_mean_abs", float(np.abs(z[0] - target).max()), 1e-3))
    return out
