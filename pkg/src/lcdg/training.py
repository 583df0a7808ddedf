"""Training loops for the denoiser and the evaluation classifier."""

from __future__ import annotations

import csv
import hashlib
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import Checkpoint, model_checkpoint, optim_state, save_checkpoint
from .conditions import training_target
from .data import ProceduralDataset
from .diffusion import NoiseSchedule, denoiser_loss
from .nn import Adam, Conv2d, Linear, Module
from .unet import DenoiserModel, UNetConfig

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("step", "loss", "seconds")
CLASSIFIER_COLUMNS = ("step", "loss", "accuracy")


class DivergenceError(RuntimeError):
    """Training loss blew past the divergence guard."""


@dataclass
class DenoiserTrainOptions:
    steps: int = 20_000
    batch_size: int = 16
    lr: float = 1e-4
    seed: int = 0
    p_uncond: float = 0.1
    checkpoint_every: int = 0
    log_every: int = 500
    divergence_factor: float = 10.0


@dataclass
class TrainResult:
    model: Module
    losses: list[float] = field(default_factory=list)
    checkpoint: Checkpoint | None = None
    seconds: float = 0.0


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _rng_from_state(state: dict) -> np.random.Generator:
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng


def write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        w.writerows(rows)


def train_denoiser(
    data: ProceduralDataset,
    model_cfg: UNetConfig,
    sched: NoiseSchedule,
    opts: DenoiserTrainOptions,
    out_dir: str | Path | None = None,
    resume: Checkpoint | None = None,
    model_seed: int | None = None,
) -> TrainResult:
    """Fit the noise predictor with Adam on the class-conditional objective.

    Writes ``loss.csv`` and periodic ``denoiser_step{k}.ckpt`` files to
    ``out_dir`` when given. ``resume`` continues from a checkpoint written by
    this function (weights, optimizer moments, RNG state, step). Raises
    :class:`DivergenceError` when a step loss exceeds ``divergence_factor``
    times the first recorded loss.
    """
    out = Path(out_dir) if out_dir is not None else None
    model = DenoiserModel(model_cfg, seed=opts.seed if model_seed is None else model_seed)
    optim = Adam(model.parameters(), lr=opts.lr)
    rng = np.random.default_rng(opts.seed)
    step = 0
    initial = None
    rows: list[tuple] = []
    elapsed = 0.0
    if resume is not None:
        model.load_state_dict({k: v for k, v in resume.tensors.items() if not k.startswith("optim.")})
        optim.load_state_dict(optim_state(resume))
        meta = resume.metadata["train"]
        rng = _rng_from_state(meta["rng"])
        step = meta["step"]
        initial = meta["initial_loss"]
        elapsed = meta.get("seconds", 0.0)
        rows = [tuple(r) for r in meta.get("curve", [])]
    model.train()
    losses = [r[1] for r in rows]
    start = time.perf_counter() - elapsed

    def snapshot() -> Checkpoint:
        train_meta = {
            "step": step,
            "rng": _rng_state(rng),
            "initial_loss": initial,
            "seconds": time.perf_counter() - start,
            "options": asdict(opts),
            "data_seed": data.seed,
            "curve": [list(r) for r in rows],
        }
        return model_checkpoint(model, {"train": train_meta}, optim)

    n = len(data)
    while step < opts.steps:
        idx = rng.integers(0, n, size=opts.batch_size)
        loss = denoiser_loss(model, data.images[idx], data.labels[idx], sched, rng, opts.p_uncond)
        optim.zero_grad()
        loss.backward()
        optim.step()
        step += 1
        value = loss.item()
        if not np.isfinite(value):
            raise DivergenceError(f"non-finite loss at step {step}")
        if initial is None:
            initial = value
        elif value > opts.divergence_factor * initial:
            raise DivergenceError(f"loss {value:.4g} exceeds {opts.divergence_factor}x initial {initial:.4g} at step {step}")
        losses.append(value)
        rows.append((step, value, round(time.perf_counter() - start, 4)))
        if opts.log_every and step % opts.log_every == 0:
            log.info("denoiser step %d loss %.4f", step, float(np.mean(losses[-opts.log_every:])))
        if out is not None and opts.checkpoint_every and step % opts.checkpoint_every == 0:
            save_checkpoint(out / f"denoiser_step{step}.ckpt", snapshot())
    model.eval()
    ckpt = snapshot()
    if out is not None:
        write_csv(out / "loss.csv", LOSS_COLUMNS, rows)
    return TrainResult(model, losses, ckpt, time.perf_counter() - start)


def smoothed_final_loss(losses: list[float], window: int = 500) -> float:
    tail = losses[-window:]
    return float(np.mean(tail)) if tail else float("nan")


# ---------------------------------------------------------------------------
# adapter supervision
# ---------------------------------------------------------------------------


def condition_fn_for(data: ProceduralDataset, kind: str):
    """``fn(index, rng)`` giving a randomised supervision map for dataset item ``index``."""

    def fn(i: int, rng: np.random.Generator) -> np.ndarray:
        return training_target(kind, data.unit_image(i), rng, data.geometry[i])

    return fn


# ---------------------------------------------------------------------------
# evaluation classifier
# ---------------------------------------------------------------------------


@dataclass
class ClassifierConfig:
    in_channels: int = 1
    num_classes: int = 4
    widths: tuple[int, ...] = (16, 32, 64)

    def __post_init__(self):
        self.widths = tuple(self.widths)


class ShapeClassifier(Module):
    """Conv-ReLU-pool stack, global average pool, linear head."""

    def __init__(self, config: ClassifierConfig | None = None, seed: int = 0):
        self.config = config or ClassifierConfig()
        rng = np.random.default_rng(seed)
        convs = []
        c = self.config.in_channels
        for w in self.config.widths:
            convs.append(Conv2d(c, w, 3, rng))
            c = w
        self.convs = convs
        self.head = Linear(c, self.config.num_classes, rng)

    def features(self, x: Tensor) -> Tensor:
        h = x
        for i, conv in enumerate(self.convs):
            h = ad.relu(conv(h))
            if i < len(self.convs) - 1:
                h = ad.avg_pool2d(h, 2)
        return ad.mean(h, axis=(2, 3))

    def forward(self, x: Tensor) -> Tensor:
        return self.head(self.features(x))

    def describe(self) -> dict:
        shapes = [(name, list(p.shape)) for name, p in self.named_parameters()]
        cfg = asdict(self.config)
        cfg["widths"] = list(cfg["widths"])
        return {
            "kind": "classifier",
            "num_parameters": self.num_parameters(),
            "architecture_hash": hashlib.sha256(repr(shapes).encode()).hexdigest(),
            "config": cfg,
        }


@dataclass
class ClassifierTrainOptions:
    steps: int = 1500
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    noise_std: float = 0.1


def predict(clf: ShapeClassifier, images: np.ndarray, batch: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Return (logits, penultimate features) without recording a graph."""
    logits, feats = [], []
    with ad.no_grad():
        for s in range(0, len(images), batch):
            f = clf.features(Tensor(np.asarray(images[s : s + batch], dtype=np.float32)))
            feats.append(f.data)
            logits.append(clf.head(f).data)
    return np.concatenate(logits), np.concatenate(feats)


def train_classifier(train: ProceduralDataset, val: ProceduralDataset | None, opts: ClassifierTrainOptions,
                     out_dir: str | Path | None = None) -> TrainResult:
    """Shape classifier on dataset images with light Gaussian input noise."""
    cfg = ClassifierConfig(in_channels=train.channels)
    clf = ShapeClassifier(cfg, seed=opts.seed)
    optim = Adam(clf.parameters(), lr=opts.lr)
    rng = np.random.default_rng(opts.seed)
    labels = train.shape_labels
    rows = []
    losses = []
    start = time.perf_counter()
    for step in range(1, opts.steps + 1):
        idx = rng.integers(0, len(train), size=opts.batch_size)
        x = train.images[idx] + opts.noise_std * rng.standard_normal(train.images[idx].shape).astype(np.float32)
        loss = ad.cross_entropy(clf(Tensor(x)), labels[idx])
        optim.zero_grad()
        loss.backward()
        optim.step()
        losses.append(loss.item())
        if step % 100 == 0 or step == opts.steps:
            acc = float("nan")
            if val is not None:
                logits, _ = predict(clf, val.images)
                acc = float((logits.argmax(1) == val.shape_labels).mean())
            rows.append((step, float(np.mean(losses[-100:])), acc))
    extra = {"train": {"options": asdict(opts), "curve": [list(r) for r in rows]}}
    ckpt = model_checkpoint(clf, extra)
    if out_dir is not None:
        write_csv(Path(out_dir) / "classifier.csv", CLASSIFIER_COLUMNS, rows)
    return TrainResult(clf, losses, ckpt, time.perf_counter() - start)


def load_classifier(path, runtime_dtype=np.float32) -> tuple[ShapeClassifier, Checkpoint]:
    from .checkpoint import CheckpointError, load_checkpoint

    ckpt = load_checkpoint(path, runtime_dtype)
    if ckpt.kind != "classifier":
        raise CheckpointError(f"{path} holds a {ckpt.kind!r}, expected a classifier")
    clf = ShapeClassifier(ClassifierConfig(**ckpt.metadata["describe"]["config"]))
    clf.load_state_dict({k: v for k, v in ckpt.tensors.items() if not k.startswith("optim.")})
    clf.eval()
    return clf, ckpt
