"""Procedural shapes dataset with exact geometry for every item."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .conditions import SHAPES, shape_mask

COLOR_FAMILIES = ("red", "green", "blue")
_FAMILY_RGB = {
    "red": (1.0, 0.15, 0.15),
    "green": (0.15, 1.0, 0.15),
    "blue": (0.2, 0.3, 1.0),
}
_SPLIT_IDS = {"train": 0, "val": 1, "test": 2}


def num_classes(channels: int) -> int:
    return len(SHAPES) * (len(COLOR_FAMILIES) if channels == 3 else 1)


def shape_of_class(label: int, channels: int) -> int:
    return label // len(COLOR_FAMILIES) if channels == 3 else label


@dataclass
class ProceduralDataset:
    images: np.ndarray  # (N, C, H, W) float32 in [-1, 1]
    labels: np.ndarray  # (N,) int64
    geometry: list[dict] = field(default_factory=list)
    split: str = "train"
    seed: int = 0

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def channels(self) -> int:
        return self.images.shape[1]

    @property
    def shape_labels(self) -> np.ndarray:
        return np.array([shape_of_class(int(c), self.channels) for c in self.labels], dtype=np.int64)

    def unit_image(self, i: int) -> np.ndarray:
        """Item ``i`` mapped back to [0, 1]."""
        return (self.images[i] + 1.0) * 0.5

    def subset(self, idx) -> "ProceduralDataset":
        idx = np.asarray(idx)
        return ProceduralDataset(self.images[idx], self.labels[idx], [self.geometry[i] for i in idx], self.split, self.seed)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        np.savez(path.with_suffix(".npz"), images=self.images, labels=self.labels)
        meta = {"split": self.split, "seed": self.seed, "geometry": self.geometry}
        path.with_suffix(".json").write_text(json.dumps(meta, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "ProceduralDataset":
        path = Path(path)
        arr = np.load(path.with_suffix(".npz"))
        meta = json.loads(path.with_suffix(".json").read_text())
        return cls(arr["images"], arr["labels"], meta["geometry"], meta["split"], meta["seed"])


def random_geometry(shape: str, rng: np.random.Generator, size: int = 32) -> dict:
    s = size / 32.0
    g = {
        "shape": shape,
        "cx": float(rng.uniform(11, 21) * s),
        "cy": float(rng.uniform(11, 21) * s),
        "angle": 0.0,
    }
    if shape == "circle":
        g["size"] = float(rng.uniform(5, 9) * s)
    elif shape == "square":
        g["size"] = float(rng.uniform(4, 8) * s)
    elif shape == "triangle":
        g["size"] = float(rng.uniform(7, 10) * s)
        g["angle"] = float(rng.uniform(0, 2 * np.pi))
    elif shape == "ring":
        g["size"] = float(rng.uniform(7, 10) * s)
        g["inner"] = 0.55
    else:
        raise ValueError(f"unknown shape {shape!r}")
    g["fg"] = float(rng.uniform(0.65, 1.0))
    g["bg"] = float(rng.uniform(0.0, 0.2))
    return g


def render(geom: dict, channels: int = 1, size: int = 32) -> np.ndarray:
    """Unit-range (C, size, size) image: flat background, flat foreground."""
    mask = shape_mask(geom, size)
    if channels == 1:
        img = np.where(mask, geom["fg"], geom["bg"])[None]
    else:
        rgb = np.asarray(_FAMILY_RGB[geom["family"]]) * geom["fg"]
        img = np.where(mask[None], rgb[:, None, None], geom["bg"])
    return img.astype(np.float32)


def gen_dataset(n: int, seed: int = 0, channels: int = 1, split: str = "train", size: int = 32) -> ProceduralDataset:
    """Deterministic dataset of ``n`` items with exactly balanced classes.

    Each split draws from its own stream keyed by ``(seed, split)``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if channels not in (1, 3):
        raise ValueError("channels must be 1 or 3")
    if split not in _SPLIT_IDS:
        raise ValueError(f"unknown split {split!r}")
    rng = np.random.default_rng([seed, _SPLIT_IDS[split]])
    k = num_classes(channels)
    labels = rng.permutation(np.arange(n) % k).astype(np.int64)
    images = np.empty((n, channels, size, size), dtype=np.float32)
    geometry = []
    for i, label in enumerate(labels):
        shape = SHAPES[shape_of_class(int(label), channels)]
        g = random_geometry(shape, rng, size)
        if channels == 3:
            g["family"] = COLOR_FAMILIES[int(label) % len(COLOR_FAMILIES)]
        geometry.append(g)
        images[i] = render(g, channels, size) * 2.0 - 1.0
    return ProceduralDataset(images, labels, geometry, split, seed)
