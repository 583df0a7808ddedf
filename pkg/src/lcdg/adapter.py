"""Condition adapter: reconstructs a structural condition map from denoiser taps."""

from __future__ import annotations

import hashlib
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .diffusion import NoiseSchedule, TimestepSampler, q_sample
from .nn import Adam, BatchNorm2d, Conv2d, Linear, Module
from .unet import DenoiserModel, TapSpec, sinusoidal_embed

log = logging.getLogger(__name__)

SIZE_WIDTHS = {
    "default": (128, 64, 32, 16),
    "tiny": (32, 16),
}


class FrozenModelError(RuntimeError):
    """The denoiser changed while it was supposed to be frozen."""


@dataclass
class FeatureStack:
    features: Tensor
    tap_spec: TapSpec

    @property
    def shape(self):
        return self.features.shape


def align_features(taps: list[Tensor], target: tuple[int, int], mode: str = "bilinear", tap_spec: TapSpec | None = None) -> FeatureStack:
    """Upsample every tap to ``target`` and stack along channels."""
    if not taps:
        raise ValueError("align_features needs at least one tap")
    n = taps[0].shape[0]
    th, tw = target
    parts = []
    for i, tap in enumerate(taps):
        if tap.shape[0] != n:
            raise ad.ShapeError(f"tap {i}: batch dim {tap.shape[0]} != {n}")
        h, w = tap.shape[2:]
        if th % h or tw % w or th // h != tw // w:
            raise ad.ShapeError(f"tap {i}: spatial {h}x{w} does not divide target {th}x{tw}")
        parts.append(ad.upsample(tap, th // h, mode))
    stacked = parts[0] if len(parts) == 1 else ad.concat(parts, axis=1)
    if tap_spec is None:
        from .unet import Tap

        tap_spec = TapSpec([Tap("unknown", i, t.shape[2], t.shape[1]) for i, t in enumerate(taps)])
    return FeatureStack(stacked, tap_spec)


class CABlock(Module):
    """Conv3x3-ReLU-BN feature branch plus an additive timestep branch."""

    def __init__(self, c_in: int, c_out: int, pe_dim: int, emb_dim: int, rng):
        self.c_out = c_out
        self.conv = Conv2d(c_in, c_out, 3, rng)
        self.bn = BatchNorm2d(c_out)
        self.time_fc = Linear(pe_dim, emb_dim, rng)
        self.time_proj = Linear(emb_dim, c_out, rng)

    def forward(self, x: Tensor, pe: Tensor) -> Tensor:
        h = self.bn(ad.relu(self.conv(x)))
        e = self.time_proj(ad.silu(self.time_fc(pe)))
        return h + ad.reshape(e, (x.shape[0], self.c_out, 1, 1))


@dataclass
class AdapterConfig:
    in_channels: int
    cond_channels: int = 1
    widths: tuple[int, ...] = SIZE_WIDTHS["default"]
    size_class: str = "default"
    pe_dim: int = 64
    emb_dim: int = 64
    cond_domain: str = "edge"

    def __post_init__(self):
        self.widths = tuple(self.widths)


class ConditionAdapter(Module):
    def __init__(self, config: AdapterConfig, seed: int = 0, dtype=ad.DEFAULT_DTYPE):
        self.config = config
        rng = np.random.default_rng(seed)
        blocks = []
        c = config.in_channels
        for w in config.widths:
            blocks.append(CABlock(c, w, config.pe_dim, config.emb_dim, rng))
            c = w
        self.blocks = blocks
        self.head = Conv2d(c, config.cond_channels, 1, rng)
        if dtype != ad.DEFAULT_DTYPE:
            self.astype(dtype)

    @classmethod
    def for_model(cls, model: DenoiserModel, cond_channels: int, size_class: str = "default",
                  widths: tuple[int, ...] | None = None, cond_domain: str = "edge", seed: int = 0) -> "ConditionAdapter":
        cfg = AdapterConfig(
            in_channels=model.tap_spec.total_channels,
            cond_channels=cond_channels,
            widths=widths or SIZE_WIDTHS[size_class],
            size_class=size_class,
            cond_domain=cond_domain,
        )
        return cls(cfg, seed=seed)

    def forward(self, F: FeatureStack | Tensor, t) -> Tensor:
        x = F.features if isinstance(F, FeatureStack) else F
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ad.ShapeError(
                f"adapter expects {self.config.in_channels} feature channels, got shape {x.shape}"
            )
        n = x.shape[0]
        pe = Tensor(sinusoidal_embed(np.broadcast_to(np.asarray(t), (n,)), self.config.pe_dim, x.dtype))
        for block in self.blocks:
            x = block(x, pe)
        return self.head(x)

    def describe(self) -> dict:
        shapes = [(name, list(p.shape)) for name, p in self.named_parameters()]
        cfg = asdict(self.config)
        cfg["widths"] = list(cfg["widths"])
        return {
            "kind": "adapter",
            "num_parameters": self.num_parameters(),
            "architecture_hash": hashlib.sha256(repr(shapes).encode()).hexdigest(),
            "config": cfg,
        }


def ca_forward(adapter: ConditionAdapter, F: FeatureStack | Tensor, t) -> Tensor:
    return adapter(F, t)


def ca_loss(adapter: ConditionAdapter, F: FeatureStack | Tensor, t, c_ext) -> Tensor:
    pred = adapter(F, t)
    c_ext = ad.as_tensor(c_ext, dtype=pred.dtype)
    if c_ext.shape != pred.shape:
        raise ad.ShapeError(f"condition shape {c_ext.shape} != adapter output {pred.shape}")
    return ad.mse(pred, c_ext)


def extract_features(model: DenoiserModel, z_t, t, c) -> FeatureStack:
    z = ad.as_tensor(z_t)
    _, taps = model.forward_with_taps(z, t, c)
    size = model.config.image_size
    return align_features(taps, (size, size), "bilinear", model.tap_spec)


def weights_digest(module: Module) -> str:
    h = hashlib.sha256()
    for name, arr in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


@dataclass
class AdapterTrainOptions:
    iterations: int = 10_000
    batch_size: int = 4
    lr: float = 1e-4
    seed: int = 0
    log_every: int = 100
    eval_every: int = 0


@dataclass
class AdapterTrainReport:
    losses: list[float] = field(default_factory=list)
    timesteps: list[int] = field(default_factory=list)
    eval_curve: list[tuple[int, float]] = field(default_factory=list)
    denoiser_digest: str = ""
    seconds: float = 0.0


def train_adapter(
    adapter: ConditionAdapter,
    model: DenoiserModel,
    images: np.ndarray,
    labels: np.ndarray,
    condition_fn,
    sched: NoiseSchedule,
    tsampler: TimestepSampler,
    opts: AdapterTrainOptions,
    eval_fn=None,
) -> AdapterTrainReport:
    """Fit the adapter to reconstruct ``condition_fn(index, rng)`` from frozen taps.

    ``images`` is (N, C, H, W) in [-1, 1]. Each step draws a batch, resampled
    timesteps, and noise; the denoiser runs without graph recording, so only
    adapter parameters ever receive gradients. Raises
    :class:`FrozenModelError` if the denoiser weights change.
    """
    report = AdapterTrainReport()
    before = weights_digest(model)
    report.denoiser_digest = before
    if opts.iterations <= 0:
        return report
    rng = np.random.default_rng(opts.seed)
    optim = Adam(adapter.parameters(), lr=opts.lr)
    model.eval()
    adapter.train()
    start = time.perf_counter()
    n_items = len(images)
    for step in range(opts.iterations):
        idx = rng.integers(0, n_items, size=opts.batch_size)
        t = tsampler.draw(rng, opts.batch_size)
        eps = rng.standard_normal(images[idx].shape).astype(images.dtype)
        zt = q_sample(images[idx], t, eps, sched)
        target = np.stack([condition_fn(int(i), rng) for i in idx]).astype(np.float32)
        with ad.no_grad():
            F = extract_features(model, zt, t, labels[idx])
        loss = ca_loss(adapter, F, t, target)
        optim.zero_grad()
        loss.backward()
        optim.step()
        report.losses.append(loss.item())
        report.timesteps.extend(int(x) for x in t)
        if opts.log_every and (step + 1) % opts.log_every == 0:
            log.info("adapter step %d loss %.5f", step + 1, np.mean(report.losses[-opts.log_every:]))
        if eval_fn is not None and opts.eval_every and (step + 1) % opts.eval_every == 0:
            report.eval_curve.append((step + 1, float(eval_fn(adapter))))
            adapter.train()
    report.seconds = time.perf_counter() - start
    adapter.eval()
    if weights_digest(model) != before:
        raise FrozenModelError("denoiser weights changed during adapter training")
    return report


def calibrate_batchnorm(
    adapter: ConditionAdapter,
    model: DenoiserModel,
    images: np.ndarray,
    labels: np.ndarray,
    sched: NoiseSchedule,
    tsampler: TimestepSampler,
    batches: int = 32,
    batch_size: int = 16,
    seed: int = 0,
) -> None:
    """Fill batch-norm running statistics from training-distribution batches.

    Uses a cumulative average (momentum 1/k on batch k) and leaves the
    weights untouched; lets an untrained adapter be scored in eval mode.
    """
    rng = np.random.default_rng(seed)
    bns = [m for m in adapter.modules() if isinstance(m, BatchNorm2d)]
    saved = [bn.momentum for bn in bns]
    adapter.train()
    try:
        with ad.no_grad():
            for k in range(1, batches + 1):
                for bn in bns:
                    bn.momentum = 1.0 / k
                idx = rng.integers(0, len(images), size=batch_size)
                t = tsampler.draw(rng, batch_size)
                eps = rng.standard_normal(images[idx].shape).astype(images.dtype)
                F = extract_features(model, q_sample(images[idx], t, eps, sched), t, labels[idx])
                adapter(F, t)
    finally:
        for bn, m in zip(bns, saved):
            bn.momentum = m
        adapter.eval()


def heldout_loss(
    adapter: ConditionAdapter,
    model: DenoiserModel,
    images: np.ndarray,
    labels: np.ndarray,
    targets: np.ndarray,
    sched: NoiseSchedule,
    timesteps: np.ndarray,
    seed: int = 0,
    batch_size: int = 16,
) -> float:
    """Mean reconstruction MSE over fixed (item, timestep, noise) draws, eval mode."""
    rng = np.random.default_rng(seed)
    adapter.eval()
    model.eval()
    total = 0.0
    count = 0
    with ad.no_grad():
        for s in range(0, len(images), batch_size):
            x = images[s : s + batch_size]
            t = timesteps[s : s + batch_size]
            eps = rng.standard_normal(x.shape).astype(x.dtype)
            zt = q_sample(x, t, eps, sched)
            F = extract_features(model, zt, t, labels[s : s + batch_size])
            pred = adapter(F, t)
            total += float(((pred.data - targets[s : s + batch_size]) ** 2).mean()) * len(x)
            count += len(x)
    return total / count
