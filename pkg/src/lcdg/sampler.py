"""Structure-aware sampling: condition score, guided DDPM/DDIM steps, CFG and the full loop.

The sampler talks to the networks through a small backend object so the
same step code can run against the analytic linear-Gaussian world in
:mod:`lcdg.oracle`. A backend provides::

    sample_shape, dtype
    eps(z, t, c) -> ndarray                      # no graph
    eps_and_condition(z, t, c) -> (eps, C, leaf)  # C differentiable w.r.t. leaf
    condition(z, t, c) -> ndarray                # no graph, for dumps

Timesteps are 0-based schedule indices; index ``t`` is chain step ``t + 1``,
so the truncation rule "guide iff step >= t_trunc" reads ``t + 1 >= t_trunc``.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .diffusion import NoiseSchedule

ALPHA_MODES = ("matched", "verbatim", "norm_ratio", "unit")

# (beta, t_trunc as a fraction of the chain) per condition domain
DOMAIN_DEFAULTS = {
    "edge": (2.0, 0.50),
    "stroke": (2.5, 0.65),
    "palette": (2.5, 0.75),
    "mask": (2.0, 0.60),
}


class GuidanceError(ValueError):
    """Inconsistent sampler inputs (adapter without condition, bad config...)."""


def domain_defaults(kind: str, T: int) -> tuple[float, int]:
    beta, frac = DOMAIN_DEFAULTS[kind]
    return beta, max(1, int(round(frac * T)))


@dataclass
class GuidanceConfig:
    beta: float = 2.0
    t_trunc: int = 500
    omega: float = 6.0
    sampler: str = "ddim"
    ddim_steps: int = 50
    ddim_eta: float = 0.0
    ssc: bool = False
    seed: int = 0
    dump_intermediates: bool = False
    dump_stride: int = 5
    alpha_mode: str = "matched"
    clip_x0: bool = True

    def validate(self, T: int) -> "GuidanceConfig":
        if self.beta < 0:
            raise GuidanceError(f"beta must be >= 0, got {self.beta}")
        if not 1 <= self.t_trunc <= T:
            raise GuidanceError(f"t_trunc must lie in [1, {T}], got {self.t_trunc}")
        if self.sampler not in ("ddpm", "ddim"):
            raise GuidanceError(f"unknown sampler {self.sampler!r}")
        if self.sampler == "ddim" and not 1 <= self.ddim_steps <= T:
            raise GuidanceError(f"ddim_steps must lie in [1, {T}], got {self.ddim_steps}")
        if self.ddim_eta < 0:
            raise GuidanceError("ddim_eta must be >= 0")
        if self.alpha_mode not in ALPHA_MODES:
            raise GuidanceError(f"alpha_mode must be one of {ALPHA_MODES}")
        if self.dump_stride < 1:
            raise GuidanceError("dump_stride must be >= 1")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StepRecord:
    index: int
    t: int
    t_prev: int
    guided: bool
    grad_norm: list[float] = field(default_factory=list)
    alpha: list[float] = field(default_factory=list)
    dist: list[float] = field(default_factory=list)
    skipped: list[bool] = field(default_factory=list)
    seconds: float = 0.0


@dataclass
class Snapshot:
    t: int
    sample: np.ndarray
    cond: np.ndarray | None


@dataclass
class GuidanceTrace:
    records: list[StepRecord] = field(default_factory=list)
    snapshots: list[Snapshot] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def guided_steps(self) -> list[int]:
        return [r.t for r in self.records if r.guided]

    @property
    def guided_count(self) -> int:
        return sum(r.guided for r in self.records)

    def distance_curve(self) -> np.ndarray:
        """(guided steps, chains) matrix of traced condition distances."""
        rows = [r.dist for r in self.records if r.guided]
        return np.asarray(rows, dtype=np.float64)


# ---------------------------------------------------------------------------
# backends
# ---------------------------------------------------------------------------


class NetworkBackend:
    """Denoiser plus optional condition adapter."""

    def __init__(self, model, adapter=None):
        from .adapter import align_features

        self._align = align_features
        self.model = model
        self.adapter = adapter
        cfg = model.config
        self.sample_shape = (cfg.in_channels, cfg.image_size, cfg.image_size)
        self.dtype = model.dtype
        model.eval()
        if adapter is not None:
            adapter.eval()

    @property
    def cond_channels(self) -> int | None:
        return None if self.adapter is None else self.adapter.config.cond_channels

    def eps(self, z: np.ndarray, t: int, c) -> np.ndarray:
        with ad.no_grad():
            return self.model(Tensor(z), t, c).data

    def eps_and_condition(self, z: np.ndarray, t: int, c) -> tuple[np.ndarray, Tensor, Tensor]:
        leaf = Tensor(z, requires_grad=True)
        with self.model.frozen(), self.adapter.frozen():
            eps, taps = self.model.forward_with_taps(leaf, t, c)
            size = self.sample_shape[-1]
            F = self._align(taps, (size, size), "bilinear", self.model.tap_spec)
            C = self.adapter(F, t)
        return eps.data, C, leaf

    def condition(self, z: np.ndarray, t: int, c) -> np.ndarray:
        with ad.no_grad():
            _, taps = self.model.forward_with_taps(Tensor(z), t, c)
            size = self.sample_shape[-1]
            return self.adapter(self._align(taps, (size, size), "bilinear", self.model.tap_spec), t).data


def as_backend(model, adapter=None):
    if hasattr(model, "eps_and_condition"):
        return model
    return NetworkBackend(model, adapter)


# ---------------------------------------------------------------------------
# scores
# ---------------------------------------------------------------------------


def _flat_sq(x: np.ndarray) -> np.ndarray:
    x64 = x.reshape(x.shape[0], -1).astype(np.float64)
    return (x64 * x64).sum(axis=1)


def compute_alpha(delta: np.ndarray | None, grad: np.ndarray, mode: str = "matched",
                  gain: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample normalisation weight and a mask of samples whose guidance is skipped.

    ``verbatim``: ||delta||^2 / ||grad||^2; ``norm_ratio``: ||delta|| / ||grad||;
    ``matched``: ||delta|| / (gain * ||grad||), where ``gain`` is the factor the
    step applies to ``alpha * g_str`` on its way into ``z``, so the applied
    shift has norm ``beta * ||delta||``; ``unit``: 1. A zero or non-finite
    gradient norm skips that sample.
    """
    g2 = _flat_sq(grad)
    skipped = ~np.isfinite(g2) | (g2 <= 0.0)
    safe = np.where(skipped, 1.0, g2)
    if mode == "unit":
        alpha = np.ones_like(g2)
    else:
        if delta is None:
            raise GuidanceError(f"alpha mode {mode!r} needs the proposed update")
        d2 = _flat_sq(delta)
        if mode == "verbatim":
            alpha = d2 / safe
        elif mode == "norm_ratio":
            alpha = np.sqrt(d2 / safe)
        else:
            alpha = np.sqrt(d2 / safe) / gain
    alpha = np.where(skipped, 0.0, alpha)
    return alpha, skipped


@dataclass
class ScoreResult:
    g_str: np.ndarray
    grad_dist: np.ndarray
    dist: np.ndarray
    eps_c: np.ndarray
    cond: np.ndarray


def _score(backend, z: np.ndarray, t: int, c, C_ext: np.ndarray) -> ScoreResult:
    eps_c, C, leaf = backend.eps_and_condition(z, t, c)
    target = np.broadcast_to(C_ext, C.shape).astype(C.dtype)
    d = ad.per_sample_mse(C, Tensor(target))
    ad.sum_(d).backward()
    grad = leaf.grad if leaf.grad is not None else np.zeros_like(z)
    grad = np.where(np.isfinite(grad), grad, 0.0).astype(z.dtype)
    return ScoreResult(-grad, grad, d.data.astype(np.float64), eps_c, C.data)


def condition_score(model, adapter, z_t: np.ndarray, t: int, c, C_ext: np.ndarray,
                    delta: np.ndarray | None = None, alpha_mode: str = "matched"):
    """Return ``(g_str, alpha, dist)`` for a batch of states.

    ``dist`` is the per-sample mean squared distance between the adapter's
    reconstruction and ``C_ext``; ``g_str`` is minus its gradient w.r.t.
    ``z_t``. ``delta`` is the unguided proposed update used by ``alpha``.
    Samples with a vanishing gradient get ``g_str = 0`` and ``alpha = 0``.
    """
    backend = as_backend(model, adapter)
    z = np.asarray(z_t)
    s = _score(backend, z, t, c, C_ext)
    alpha, skipped = compute_alpha(delta, s.grad_dist, alpha_mode)
    g = s.g_str.copy()
    g[skipped] = 0
    return g, alpha, s.dist


def cfg_score(model, z_t: np.ndarray, t: int, c, omega: float) -> np.ndarray:
    """``omega * eps(z, t, c) + (1 - omega) * eps(z, t, null)``."""
    backend = as_backend(model)
    eps_c = backend.eps(z_t, t, c)
    return _combine(backend, eps_c, z_t, t, c, omega)


def _combine(backend, eps_c: np.ndarray, z: np.ndarray, t: int, c, omega: float) -> np.ndarray:
    if c is None or omega == 1.0:
        return eps_c
    eps_n = backend.eps(z, t, None)
    return omega * eps_c + (1.0 - omega) * eps_n


# ---------------------------------------------------------------------------
# steps
# ---------------------------------------------------------------------------


def _ddpm_mean(z: np.ndarray, eps: np.ndarray, t: int, sched: NoiseSchedule) -> np.ndarray:
    b = float(sched.betas[t])
    ab = float(sched.alpha_bars[t])
    return (z - (b / math.sqrt(1.0 - ab)) * eps) / math.sqrt(float(sched.alphas[t]))


def _guidance(backend, z, t, c, C_ext, cfg, guided):
    if guided:
        s = _score(backend, z, t, c, C_ext)
        return s, s.eps_c
    return None, backend.eps(z, t, c)


def _record(index, t, t_prev, guided, s: ScoreResult | None, alpha=None, skipped=None) -> StepRecord:
    rec = StepRecord(index=index, t=int(t), t_prev=int(t_prev), guided=guided)
    if s is not None:
        rec.grad_norm = np.sqrt(_flat_sq(s.grad_dist)).tolist()
        rec.alpha = np.asarray(alpha, dtype=np.float64).tolist()
        rec.dist = s.dist.tolist()
        rec.skipped = np.asarray(skipped).tolist()
    return rec


def ddpm_step_guided(model, adapter, z_t: np.ndarray, t: int, c, C_ext, cfg: GuidanceConfig,
                     sched: NoiseSchedule, rng: np.random.Generator, guided: bool | None = None,
                     index: int = 0) -> tuple[np.ndarray, StepRecord]:
    """One ancestral step, optionally with the mean shifted by ``beta * alpha * var * g_str``.

    Noise is drawn for every ``t >= 1`` whether or not the step is guided.
    """
    if t < 0:
        raise GuidanceError("ddpm step needs t >= 0")
    backend = as_backend(model, adapter)
    if guided is None:
        guided = adapter is not None and C_ext is not None and t + 1 >= cfg.t_trunc
    s, eps_c = _guidance(backend, z_t, t, c, C_ext, cfg, guided)
    eps = _combine(backend, eps_c, z_t, t, c, cfg.omega)
    mu = _ddpm_mean(z_t, eps, t, sched)
    var = float(sched.posterior_vars[t])
    alpha = skipped = None
    if guided:
        alpha, skipped = compute_alpha(mu - z_t, s.grad_dist, cfg.alpha_mode, gain=var)
        w = (cfg.beta * var * alpha).reshape((-1,) + (1,) * (z_t.ndim - 1))
        mu = mu + (w * s.g_str).astype(z_t.dtype)
    if t > 0:
        noise = rng.standard_normal(z_t.shape).astype(z_t.dtype)
        z_prev = mu + math.sqrt(var) * noise
    else:
        z_prev = mu
    return z_prev, _record(index, t, t - 1, guided, s, alpha, skipped)


def _ddim_update(z, eps, ab, ab_prev, sigma):
    x0 = (z - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)
    return math.sqrt(ab_prev) * x0 + math.sqrt(max(1.0 - ab_prev - sigma**2, 0.0)) * eps


def ddim_step_guided(model, adapter, z_t: np.ndarray, t: int, t_prev: int, c, C_ext, cfg: GuidanceConfig,
                     sched: NoiseSchedule, rng: np.random.Generator | None = None,
                     guided: bool | None = None, index: int = 0) -> tuple[np.ndarray, StepRecord]:
    """One DDIM step from ``t`` to ``t_prev`` (``-1`` means the clean end).

    Guidance rewrites the noise estimate as
    ``eps - sqrt(1 - abar_t) * beta * alpha * g_str``, which moves the
    predicted clean sample and the next state down the distance gradient.
    """
    if not t > t_prev >= -1:
        raise GuidanceError(f"need t > t_prev >= -1, got {t}, {t_prev}")
    backend = as_backend(model, adapter)
    if guided is None:
        guided = adapter is not None and C_ext is not None and t + 1 >= cfg.t_trunc
    ab = float(sched.alpha_bars[t])
    ab_prev = float(sched.alpha_bars[t_prev]) if t_prev >= 0 else 1.0
    sigma = 0.0
    if cfg.ddim_eta > 0:
        sigma = cfg.ddim_eta * math.sqrt((1 - ab_prev) / (1 - ab) * (1 - ab / ab_prev))
    s, eps_c = _guidance(backend, z_t, t, c, C_ext, cfg, guided)
    eps = _combine(backend, eps_c, z_t, t, c, cfg.omega)
    if cfg.clip_x0:
        # clip the model's clean estimate only; the guidance term below must
        # not be clipped away, since at high t it moves x0 by a large factor
        x0 = np.clip((z_t - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab), -1.0, 1.0)
        eps = ((z_t - math.sqrt(ab) * x0) / math.sqrt(1.0 - ab)).astype(z_t.dtype)
    alpha = skipped = None
    if guided:
        delta = _ddim_update(z_t, eps, ab, ab_prev, sigma) - z_t
        # z_prev responds to an eps change d as -coef * d
        coef = math.sqrt(max(1.0 - ab_prev - sigma**2, 0.0)) - math.sqrt(ab_prev / ab) * math.sqrt(1.0 - ab)
        alpha, skipped = compute_alpha(delta, s.grad_dist, cfg.alpha_mode, gain=abs(coef) * math.sqrt(1.0 - ab))
        w = (math.sqrt(1.0 - ab) * cfg.beta * alpha).reshape((-1,) + (1,) * (z_t.ndim - 1))
        eps = eps - (w * s.g_str).astype(z_t.dtype)
    z_prev = _ddim_update(z_t, eps, ab, ab_prev, sigma)
    if cfg.ddim_eta > 0:
        if rng is None:
            raise GuidanceError("ddim_eta > 0 needs an rng")
        noise = rng.standard_normal(z_t.shape).astype(z_t.dtype)
        if sigma > 0:
            z_prev = z_prev + sigma * noise
    return z_prev, _record(index, t, t_prev, guided, s, alpha, skipped)


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------


def ddim_timesteps(T: int, steps: int) -> np.ndarray:
    """Descending sub-sequence from ``T - 1`` to ``0`` with ``steps`` entries."""
    ts = np.unique(np.round(np.linspace(T - 1, 0, steps)).astype(np.int64))[::-1]
    return ts.copy()


def timestep_plan(cfg: GuidanceConfig, T: int) -> list[tuple[int, int]]:
    if cfg.sampler == "ddpm":
        return [(t, t - 1) for t in range(T - 1, -1, -1)]
    ts = ddim_timesteps(T, cfg.ddim_steps)
    prev = list(ts[1:]) + [-1]
    return [(int(a), int(b)) for a, b in zip(ts, prev)]


def guidance_plan(plan: list[tuple[int, int]], t_trunc: int, ssc: bool) -> list[bool]:
    """Guided flag per step: inside the truncation interval and, with SSC, an even index."""
    flags = []
    for i, (t, _) in enumerate(plan):
        inside = t + 1 >= t_trunc
        flags.append(inside and (not ssc or i % 2 == 0))
    return flags


def sample(model, adapter, c, C_ext, cfg: GuidanceConfig, sched: NoiseSchedule, count: int = 1,
           z_T: np.ndarray | None = None) -> tuple[np.ndarray, GuidanceTrace]:
    """Run a full chain for ``count`` samples and return ``(z_0, trace)``.

    ``z_T`` defaults to standard normal draws from ``cfg.seed``; the same
    generator then supplies the per-step noise, in the same order whether
    or not a step is guided.
    """
    cfg.validate(sched.T)
    if (adapter is None) != (C_ext is None):
        raise GuidanceError("adapter and condition must be given together")
    backend = as_backend(model, adapter)
    if C_ext is not None:
        C_ext = np.asarray(C_ext)
        if C_ext.ndim == len(backend.sample_shape):
            C_ext = C_ext[None]
        want = getattr(backend, "cond_channels", None)
        if want is not None and C_ext.shape[1] != want:
            raise GuidanceError(f"condition has {C_ext.shape[1]} channels, adapter expects {want}")
        if C_ext.shape[0] not in (1, count):
            raise GuidanceError(f"condition batch {C_ext.shape[0]} does not match count {count}")
    rng = np.random.default_rng(cfg.seed)
    shape = (count,) + tuple(backend.sample_shape)
    if z_T is None:
        z = rng.standard_normal(shape).astype(backend.dtype)
    else:
        z = np.array(np.broadcast_to(z_T, shape), dtype=backend.dtype)
    if c is not None:
        c = np.broadcast_to(np.asarray(c, dtype=np.int64), (count,))
    plan = timestep_plan(cfg, sched.T)
    flags = guidance_plan(plan, cfg.t_trunc, cfg.ssc) if adapter is not None else [False] * len(plan)
    trace = GuidanceTrace()
    start = time.perf_counter()
    for i, ((t, t_prev), guided) in enumerate(zip(plan, flags)):
        if cfg.dump_intermediates and (i % cfg.dump_stride == 0):
            cond = backend.condition(z, t, c) if adapter is not None else None
            trace.snapshots.append(Snapshot(t, z.copy(), cond))
        t0 = time.perf_counter()
        if cfg.sampler == "ddpm":
            z, rec = ddpm_step_guided(backend, adapter, z, t, c, C_ext, cfg, sched, rng, guided, i)
        else:
            z, rec = ddim_step_guided(backend, adapter, z, t, t_prev, c, C_ext, cfg, sched, rng, guided, i)
        rec.seconds = time.perf_counter() - t0
        trace.records.append(rec)
    trace.seconds = time.perf_counter() - start
    if cfg.dump_intermediates:
        trace.snapshots.append(Snapshot(-1, z.copy(), None))
    return z, trace
