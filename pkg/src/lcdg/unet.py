"""Small convolutional U-Net noise predictor with named feature taps."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Conv2d, Linear, Module, parameter

STAGES = ("encoder", "middle", "decoder")


def sinusoidal_embed(t, dim: int, dtype=ad.DEFAULT_DTYPE) -> np.ndarray:
    """Transformer-style timestep encoding, shape (N, dim) (or (dim,) for scalar t).

    The first half holds ``sin(t * f_i)`` and the second ``cos(t * f_i)``
    with frequencies spaced geometrically from 1 down to 1/10000.
    """
    if dim % 2:
        raise ValueError(f"embedding dim must be even, got {dim}")
    half = dim // 2
    if half == 1:
        freqs = np.ones(1)
    else:
        freqs = np.exp(-np.log(10000.0) * np.arange(half) / (half - 1))
    t_arr = np.asarray(t, dtype=np.float64)
    args = t_arr[..., None] * freqs
    return np.concatenate([np.sin(args), np.cos(args)], axis=-1).astype(dtype)


@dataclass(frozen=True)
class Tap:
    stage: str
    index: int
    resolution: int = 0
    channels: int = 0


@dataclass
class TapSpec:
    """Which stage outputs are exposed as features, in a fixed order."""

    taps: list[Tap]

    def __len__(self) -> int:
        return len(self.taps)

    @property
    def total_channels(self) -> int:
        return sum(t.channels for t in self.taps)

    def to_dict(self) -> list[dict]:
        return [asdict(t) for t in self.taps]

    @classmethod
    def from_dict(cls, items: list[dict]) -> "TapSpec":
        return cls([Tap(**d) for d in items])


@dataclass
class UNetConfig:
    in_channels: int = 1
    image_size: int = 32
    base_channels: int = 32
    channel_mults: tuple[int, ...] = (1, 2, 4)
    blocks_per_stage: int = 2
    num_classes: int = 4
    pe_dim: int = 64
    emb_dim: int = 0  # 0 -> 4 * base_channels
    taps: list[tuple[str, int]] = field(default_factory=list)  # empty -> every stage output

    def __post_init__(self):
        self.channel_mults = tuple(self.channel_mults)
        self.taps = [tuple(t) for t in self.taps]
        if self.image_size % 2 ** (len(self.channel_mults) - 1):
            raise ValueError("image_size must be divisible by 2**(num_stages-1)")

    @property
    def embedding_dim(self) -> int:
        return self.emb_dim or 4 * self.base_channels


class ConvBlock(Module):
    """Conv -> (+ embedding) -> SiLU -> Conv, residual, SiLU."""

    def __init__(self, c_in: int, c_out: int, emb_dim: int, rng: np.random.Generator):
        self.c_out = c_out
        self.conv1 = Conv2d(c_in, c_out, 3, rng)
        self.emb_proj = Linear(emb_dim, c_out, rng)
        self.conv2 = Conv2d(c_out, c_out, 3, rng)
        # damp the residual branch so stacked blocks start near identity
        self.conv2.weight.data *= 0.25
        self.skip = Conv2d(c_in, c_out, 1, rng) if c_in != c_out else None

    def forward(self, x: Tensor, emb: Tensor) -> Tensor:
        h = self.conv1(x)
        e = ad.reshape(self.emb_proj(emb), (x.shape[0], self.c_out, 1, 1))
        h = self.conv2(ad.silu(h + e))
        s = x if self.skip is None else self.skip(x)
        return ad.silu(h + s)


class Stage(Module):
    def __init__(self, c_in: int, c_out: int, n_blocks: int, emb_dim: int, rng):
        self.blocks = [ConvBlock(c_in if i == 0 else c_out, c_out, emb_dim, rng) for i in range(n_blocks)]

    def forward(self, x: Tensor, emb: Tensor) -> Tensor:
        for b in self.blocks:
            x = b(x, emb)
        return x


class DenoiserModel(Module):
    """epsilon_theta(z_t, t, c) with encoder / middle / decoder stage taps.

    Class id ``num_classes`` is the null (unconditional) id.
    """

    def __init__(self, config: UNetConfig | None = None, seed: int = 0, dtype=ad.DEFAULT_DTYPE):
        cfg = config or UNetConfig()
        self.config = cfg
        rng = np.random.default_rng(seed)
        chans = [cfg.base_channels * m for m in cfg.channel_mults]
        e = cfg.embedding_dim
        self.time_in = Linear(cfg.pe_dim, e, rng)
        self.time_out = Linear(e, e, rng)
        self.class_table = parameter((rng.standard_normal((cfg.num_classes + 1, e)) * 0.5).astype(np.float32))
        self.conv_in = Conv2d(cfg.in_channels, chans[0], 3, rng)
        self.encoder = []
        c_prev = chans[0]
        for c in chans:
            self.encoder.append(Stage(c_prev, c, cfg.blocks_per_stage, e, rng))
            c_prev = c
        self.middle = [Stage(chans[-1], chans[-1], cfg.blocks_per_stage, e, rng)]
        self.decoder = []
        rev = chans[::-1]
        for i, c in enumerate(rev):
            self.decoder.append(Stage(c_prev + c, c, cfg.blocks_per_stage, e, rng))
            c_prev = c
        self.conv_out = Conv2d(chans[0], cfg.in_channels, 3, rng)
        self.conv_out.weight.data *= 0.1
        self.tap_spec = self._build_tap_spec(chans)
        if dtype != ad.DEFAULT_DTYPE:
            self.astype(dtype)

    def _build_tap_spec(self, chans: list[int]) -> TapSpec:
        size = self.config.image_size
        n = len(chans)
        info = {}
        for i, c in enumerate(chans):
            info[("encoder", i)] = (size >> i, c)
        info[("middle", 0)] = (size >> (n - 1), chans[-1])
        for i, c in enumerate(chans[::-1]):
            info[("decoder", i)] = (size >> (n - 1 - i), c)
        taps = []
        for stage, idx in self.config.taps or list(info):
            if (stage, idx) not in info:
                raise ValueError(f"tap ({stage}, {idx}) does not name an existing stage")
            res, c = info[(stage, idx)]
            taps.append(Tap(stage, idx, res, c))
        return TapSpec(taps)

    @property
    def null_class(self) -> int:
        return self.config.num_classes

    def _embedding(self, t, c, n: int) -> Tensor:
        t_arr = np.broadcast_to(np.asarray(t), (n,))
        pe = Tensor(sinusoidal_embed(t_arr, self.config.pe_dim, self.dtype))
        emb = self.time_out(ad.silu(self.time_in(pe)))
        if c is None:
            c = self.null_class
        ids = np.broadcast_to(np.asarray(c, dtype=np.int64), (n,))
        if np.any(ids < 0) or np.any(ids > self.null_class):
            raise ValueError(f"invalid class id(s) {np.unique(ids)}; valid 0..{self.null_class}")
        emb = emb + ad.embedding(self.class_table, ids)
        return ad.silu(emb)

    @property
    def dtype(self):
        return self.conv_in.weight.dtype

    def forward_with_taps(self, z_t: Tensor, t, c) -> tuple[Tensor, list[Tensor]]:
        cfg = self.config
        if z_t.ndim != 4 or z_t.shape[1:] != (cfg.in_channels, cfg.image_size, cfg.image_size):
            raise ad.ShapeError(
                f"expected input (N, {cfg.in_channels}, {cfg.image_size}, {cfg.image_size}), got {z_t.shape}"
            )
        n = z_t.shape[0]
        emb = self._embedding(t, c, n)
        feats: dict[tuple[str, int], Tensor] = {}
        h = self.conv_in(z_t)
        skips = []
        last = len(self.encoder) - 1
        for i, stage in enumerate(self.encoder):
            h = stage(h, emb)
            feats[("encoder", i)] = h
            skips.append(h)
            if i < last:
                h = ad.avg_pool2d(h, 2)
        h = self.middle[0](h, emb)
        feats[("middle", 0)] = h
        for i, stage in enumerate(self.decoder):
            h = stage(ad.concat([h, skips[last - i]], axis=1), emb)
            feats[("decoder", i)] = h
            if i < last:
                h = ad.upsample(h, 2, "nearest")
        eps = self.conv_out(h)
        taps = [feats[(tp.stage, tp.index)] for tp in self.tap_spec.taps]
        return eps, taps

    def forward(self, z_t: Tensor, t, c) -> Tensor:
        return self.forward_with_taps(z_t, t, c)[0]

    def describe(self) -> dict:
        shapes = [(name, list(p.shape)) for name, p in self.named_parameters()]
        digest = hashlib.sha256(repr(shapes).encode()).hexdigest()
        cfg = asdict(self.config)
        cfg["channel_mults"] = list(cfg["channel_mults"])
        cfg["taps"] = [list(t) for t in cfg["taps"]]
        return {
            "kind": "denoiser",
            "num_parameters": self.num_parameters(),
            "architecture_hash": digest,
            "config": cfg,
            "tap_spec": self.tap_spec.to_dict(),
        }


def config_from_dict(d: dict) -> UNetConfig:
    return UNetConfig(**d)
