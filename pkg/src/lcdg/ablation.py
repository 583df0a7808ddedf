"""One-axis ablation sweeps over guided sampling."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .conditions import extract
from .data import ProceduralDataset
from .diffusion import NoiseSchedule
from .imageio import contact_sheet, write_pnm
from .metrics import REPORT_COLUMNS, MetricsReport, class_accuracy, frechet_feature_distance, per_sample_fidelity
from .sampler import GuidanceConfig, sample

AXES = ("beta", "t_trunc", "n", "adapter_size")
DEFAULT_GRIDS = {
    "beta": (0.0, 0.5, 1.0, 2.0, 4.0, 8.0),
    "t_trunc": (0.5, 0.6, 0.7, 0.8, 0.9),
    "n": (1, 2, 3, 5),
    "adapter_size": ("default", "tiny"),
}


class MissingCheckpointError(LookupError):
    pass


@dataclass
class EvalSet:
    """Held-out targets: chain ``i`` is steered toward ``targets[i]`` with class ``labels[i]``."""

    targets: np.ndarray
    labels: np.ndarray
    shape_labels: np.ndarray
    reference: np.ndarray  # real images for the Frechet proxy

    @classmethod
    def from_dataset(cls, data: ProceduralDataset, kind: str, count: int, offset: int = 0) -> "EvalSet":
        idx = np.arange(offset, offset + count) % len(data)
        targets = np.stack([extract(kind, data.unit_image(int(i))) for i in idx])
        return cls(targets, data.labels[idx], data.shape_labels[idx], data.images)


@dataclass
class AblationBase:
    model: object
    adapters: dict  # key -> adapter; keys are sizes ("default"/"tiny") or n values
    classifier: object
    kind: str
    evalset: EvalSet
    sched: NoiseSchedule
    guidance: GuidanceConfig
    chains: int = 16
    seeds: tuple[int, ...] = (0,)
    adapter_key: object = "default"
    conditional: bool = True
    samples: dict = field(default_factory=dict)


def point_config(base: AblationBase, axis: str, value) -> tuple[GuidanceConfig, object]:
    cfg = replace(base.guidance)
    key = base.adapter_key
    if axis == "beta":
        cfg.beta = float(value)
    elif axis == "t_trunc":
        v = float(value)
        cfg.t_trunc = int(round(v * base.sched.T)) if v <= 1.0 else int(v)
        cfg.t_trunc = min(max(cfg.t_trunc, 1), base.sched.T)
    elif axis in ("n", "adapter_size"):
        key = value
    else:
        raise ValueError(f"unknown ablation axis {axis!r}; choose from {AXES}")
    if key not in base.adapters:
        raise MissingCheckpointError(f"no adapter checkpoint for {axis}={value!r}")
    return cfg, base.adapters[key]


def run_point(base: AblationBase, cfg: GuidanceConfig, adapter, seed: int):
    ev = base.evalset
    n = base.chains
    cfg = replace(cfg, seed=seed)
    c = ev.labels[:n] if base.conditional else None
    z, trace = sample(base.model, adapter, c, ev.targets[:n], cfg, base.sched, count=n)
    return z, trace


def ablation_run(axis: str, grid, base: AblationBase, out_dir: str | Path | None = None) -> list[dict]:
    """Sweep ``axis`` over ``grid``; one CSV row per (value, seed).

    Writes ``ablation_{axis}.csv`` and, for a non-empty grid, a contact sheet
    ``ablation_{axis}.pgm`` (one row per grid value, first seed).
    """
    if axis not in AXES:
        raise ValueError(f"unknown ablation axis {axis!r}; choose from {AXES}")
    grid = list(grid)
    for value in grid:
        point_config(base, axis, value)  # fail fast on missing checkpoints
    rows = []
    sheet_rows = []
    ev = base.evalset
    for value in grid:
        cfg, adapter = point_config(base, axis, value)
        for j, seed in enumerate(base.seeds):
            z, trace = run_point(base, cfg, adapter, seed)
            base.samples[(value, seed)] = z
            n = len(z)
            fid = per_sample_fidelity(z, ev.targets[:n], base.kind).mean()
            fre = frechet_feature_distance(z, ev.reference, base.classifier) if n >= 64 else None
            acc = class_accuracy(z, ev.shape_labels[:n], base.classifier)
            report = MetricsReport(
                fidelity=float(fid),
                frechet=fre,
                accuracy=acc,
                seconds_per_sample=trace.seconds / n,
                guided_steps=trace.guided_count,
            )
            rows.append(report.row(axis, value, seed))
            if j == 0:
                sheet_rows.append(z[:8])
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_rows(out / f"ablation_{axis}.csv", rows)
        if sheet_rows:
            tiles = np.concatenate(sheet_rows)
            write_pnm(out / f"ablation_{axis}.pgm" if tiles.shape[1] == 1 else out / f"ablation_{axis}.ppm",
                      contact_sheet(tiles, cols=len(sheet_rows[0])))
    return rows


def write_rows(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(REPORT_COLUMNS))
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in REPORT_COLUMNS})
