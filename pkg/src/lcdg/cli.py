"""Command-line interface.

Every command writes into a fresh run directory under ``$LCDG_RUN_DIR``
(default ``./runs``) together with ``manifest.json`` and the resolved
``config.txt``. Exit codes: 0 success, 2 config error, 3 checkpoint error,
4 divergence abort.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import os
import sys
import time
import uuid
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import (
    CheckpointError,
    file_digest,
    load_adapter,
    load_denoiser,
    model_checkpoint,
    save_checkpoint,
)
from .config import SCHEMA, Config, ConfigError, float_list, int_list, load_config

log = logging.getLogger("lcdg")

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2
EXIT_CHECKPOINT = 3
EXIT_DIVERGENCE = 4

TRACE_COLUMNS = ("index", "t", "t_prev", "guided", "grad_norm", "alpha", "dist", "seconds")
ADAPTER_COLUMNS = ("step", "loss", "t_mean")


# ---------------------------------------------------------------------------
# run directory and manifest
# ---------------------------------------------------------------------------


class Run:
    def __init__(self, command: str, cfg: Config, argv: list[str], root: str | None = None):
        base = Path(root or os.environ.get("LCDG_RUN_DIR") or "runs")
        stamp = time.strftime("%Y%m%d-%H%M%S")
        self.dir = base / f"{command}-{stamp}-{uuid.uuid4().hex[:8]}"
        self.dir.mkdir(parents=True, exist_ok=False)
        self.command = command
        self.cfg = cfg
        self.argv = argv
        self.inputs: dict[str, dict] = {}
        self.outputs: dict[str, str] = {}
        self.seeds: dict[str, int] = {}
        self.extra: dict = {}
        (self.dir / "config.txt").write_text(cfg.to_text())

    def add_input(self, name: str, path: str | Path) -> None:
        self.inputs[name] = {"path": str(path), "digest": file_digest(path)}

    def output(self, name: str) -> Path:
        return self.dir / name

    def finish(self) -> Path:
        for p in sorted(self.dir.rglob("*")):
            if p.is_file() and p.name not in ("manifest.json",):
                rel = str(p.relative_to(self.dir))
                self.outputs[rel] = hashlib.sha256(p.read_bytes()).hexdigest()
        manifest = {
            "command": self.command,
            "argv": self.argv,
            "version": __version__,
            "config": self.cfg.to_dict(),
            "seeds": self.seeds,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "extra": self.extra,
        }
        path = self.dir / "manifest.json"
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))
        return path


# ---------------------------------------------------------------------------
# builders from config
# ---------------------------------------------------------------------------


def schedule_from(cfg: Config):
    from .diffusion import make_schedule

    try:
        return make_schedule(cfg["schedule.T"], cfg["schedule.beta_start"], cfg["schedule.beta_end"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def unet_config_from(cfg: Config):
    from .data import num_classes
    from .unet import UNetConfig

    try:
        return UNetConfig(
            in_channels=cfg["data.channels"],
            image_size=cfg["model.image_size"],
            base_channels=cfg["model.base_channels"],
            channel_mults=int_list(cfg["model.channel_mults"]),
            blocks_per_stage=cfg["model.blocks_per_stage"],
            num_classes=num_classes(cfg["data.channels"]),
            pe_dim=cfg["model.pe_dim"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def adapter_widths_from(cfg: Config) -> tuple[int, ...]:
    from .adapter import SIZE_WIDTHS

    if cfg["adapter.widths"]:
        return int_list(cfg["adapter.widths"])
    if cfg["adapter.size"] not in SIZE_WIDTHS:
        raise ConfigError(f"adapter.size must be one of {sorted(SIZE_WIDTHS)}")
    return SIZE_WIDTHS[cfg["adapter.size"]]


def tsampler_from(cfg: Config, T: int):
    from .diffusion import TimestepSampler

    try:
        return TimestepSampler(T, cfg["resample.n"], cfg["resample.mode"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def guidance_from(cfg: Config, T: int):
    from .sampler import GuidanceConfig, GuidanceError

    g = cfg.section("guidance")
    gc = GuidanceConfig(
        beta=g["beta"], t_trunc=g["t_trunc"], omega=g["omega"], sampler=g["sampler"],
        ddim_steps=g["ddim_steps"], ddim_eta=g["ddim_eta"], ssc=g["ssc"], seed=g["seed"],
        dump_stride=g["dump_stride"], alpha_mode=g["alpha_mode"], clip_x0=g["clip_x0"],
    )
    try:
        return gc.validate(T)
    except GuidanceError as exc:
        raise ConfigError(str(exc)) from exc


def dataset_from(cfg: Config, path: str | None, split: str):
    from .data import ProceduralDataset, gen_dataset

    if path:
        p = Path(path)
        if p.is_dir():
            p = p / split
        try:
            return ProceduralDataset.load(p)
        except (OSError, KeyError, ValueError) as exc:
            raise ConfigError(f"cannot load dataset {p}: {exc}") from exc
    n = cfg["data.n"] if split == "train" else max(256, cfg["data.n"] // 10)
    return gen_dataset(n, cfg["data.seed"], cfg["data.channels"], split, cfg["model.image_size"])


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args, cfg: Config, run: Run) -> int:
    from .conditions import mask_sim, palette_sim, stroke_sim, edge_map, canny_sim
    from .data import gen_dataset
    from .imageio import write_pnm

    run.seeds["data"] = cfg["data.seed"]
    train = gen_dataset(cfg["data.n"], cfg["data.seed"], cfg["data.channels"], "train", cfg["model.image_size"])
    val = gen_dataset(max(256, cfg["data.n"] // 10), cfg["data.seed"], cfg["data.channels"], "val", cfg["model.image_size"])
    train.save(run.output("train"))
    val.save(run.output("val"))
    kinds = [k for k in (args.conditions or "").split(",") if k]
    rng = np.random.default_rng(cfg["data.seed"])
    for kind in kinds:
        d = run.output(f"conditions/{kind}")
        d.mkdir(parents=True, exist_ok=True)
        for i in range(min(args.dump_items, len(train))):
            img = train.unit_image(i)
            if kind == "edge":
                cm = edge_map(img)
            elif kind == "canny":
                cm = canny_sim(img)
            elif kind == "mask":
                cm = mask_sim(train.geometry[i], coarse=False, size=img.shape[-1])
            elif kind == "stroke":
                cm = stroke_sim(img, rng)
            elif kind == "palette":
                cm = palette_sim(img)
            else:
                raise ConfigError(f"unknown condition kind {kind!r}")
            ext = "pgm" if cm.data.shape[0] == 1 else "ppm"
            write_pnm(d / f"item_{i:05d}.{ext}", cm.data, "unit")
            (d / f"item_{i:05d}.json").write_text(json.dumps(
                {"kind": cm.kind, "item": i, "label": int(train.labels[i]), "params": cm.provenance,
                 "geometry": train.geometry[i]}, sort_keys=True, default=float))
    print(f"wrote {len(train)} train / {len(val)} val items to {run.dir}")
    return EXIT_OK


def cmd_train_denoiser(args, cfg: Config, run: Run) -> int:
    from .checkpoint import load_checkpoint
    from .training import DenoiserTrainOptions, train_denoiser

    sched = schedule_from(cfg)
    data = dataset_from(cfg, args.data, "train")
    opts = DenoiserTrainOptions(
        steps=cfg["train.steps"], batch_size=cfg["train.batch_size"], lr=cfg["train.lr"],
        seed=cfg["train.seed"], p_uncond=cfg["train.p_uncond"], checkpoint_every=cfg["train.checkpoint_every"],
    )
    resume = None
    if args.resume:
        resume = load_checkpoint(args.resume)
        run.add_input("resume", args.resume)
    run.seeds.update({"train": opts.seed, "model": cfg["model.seed"], "data": data.seed})
    result = train_denoiser(data, unet_config_from(cfg), sched, opts, out_dir=run.dir, resume=resume,
                            model_seed=cfg["model.seed"])
    digest = save_checkpoint(run.output("denoiser.ckpt"), result.checkpoint)
    run.extra["final_loss"] = float(np.mean(result.losses[-100:])) if result.losses else None
    print(f"denoiser.ckpt {digest[:16]} final loss {run.extra['final_loss']}")
    return EXIT_OK


def cmd_train_adapter(args, cfg: Config, run: Run) -> int:
    from .adapter import AdapterTrainOptions, ConditionAdapter, calibrate_batchnorm, heldout_loss, train_adapter
    from .conditions import cond_channels, extract
    from .training import condition_fn_for, write_csv

    if not args.denoiser:
        raise ConfigError("train-adapter needs --denoiser")
    model, _ = load_denoiser(args.denoiser)
    run.add_input("denoiser", args.denoiser)
    sched = schedule_from(cfg)
    kind = cfg["adapter.kind"]
    data = dataset_from(cfg, args.data, "train")
    val = dataset_from(cfg, args.data, "val")
    try:
        cc = cond_channels(kind, data.channels)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    adapter = ConditionAdapter.for_model(model, cc, cfg["adapter.size"], adapter_widths_from(cfg), kind,
                                         seed=cfg["adapter.seed"])
    tsampler = tsampler_from(cfg, sched.T)
    opts = AdapterTrainOptions(iterations=cfg["adapter.iterations"], batch_size=cfg["adapter.batch_size"],
                               lr=cfg["adapter.lr"], seed=cfg["adapter.seed"])
    run.seeds.update({"adapter": opts.seed})
    n_held = min(len(val), 64)
    held_rng = np.random.default_rng(1234)
    held_t = tsampler.draw(held_rng, n_held)
    targets = np.stack([extract(kind, val.unit_image(i)) for i in range(n_held)])
    probe = copy.deepcopy(adapter)
    calibrate_batchnorm(probe, model, data.images, data.labels, sched, tsampler, seed=opts.seed)
    initial = heldout_loss(probe, model, val.images[:n_held], val.labels[:n_held], targets, sched, held_t)
    report = train_adapter(adapter, model, data.images, data.labels, condition_fn_for(data, kind), sched, tsampler, opts)
    final = heldout_loss(adapter, model, val.images[:n_held], val.labels[:n_held], targets, sched, held_t) \
        if opts.iterations else initial
    bs = opts.batch_size
    rows = [(i + 1, loss, float(np.mean(report.timesteps[i * bs:(i + 1) * bs]))) for i, loss in enumerate(report.losses)]
    write_csv(run.output("adapter_loss.csv"), ADAPTER_COLUMNS, rows)
    meta = {"train": {"options": vars(opts), "heldout_initial": initial, "heldout_final": final,
                      "seconds": report.seconds, "resample": {"n": tsampler.n, "mode": tsampler.mode},
                      "denoiser_digest": file_digest(args.denoiser)}}
    digest = save_checkpoint(run.output("adapter.ckpt"), model_checkpoint(adapter, meta))
    run.extra.update({"heldout_initial": initial, "heldout_final": final})
    print(f"adapter.ckpt {digest[:16]} held-out loss {initial:.4f} -> {final:.4f}")
    return EXIT_OK


def cmd_train_classifier(args, cfg: Config, run: Run) -> int:
    from .training import ClassifierTrainOptions, train_classifier

    data = dataset_from(cfg, args.data, "train")
    val = dataset_from(cfg, args.data, "val")
    opts = ClassifierTrainOptions(steps=cfg["classifier.steps"], seed=cfg["classifier.seed"])
    run.seeds["classifier"] = opts.seed
    result = train_classifier(data, val, opts, out_dir=run.dir)
    digest = save_checkpoint(run.output("classifier.ckpt"), result.checkpoint)
    acc = result.checkpoint.metadata["train"]["curve"][-1][2]
    print(f"classifier.ckpt {digest[:16]} val accuracy {acc:.3f}")
    return EXIT_OK


def _load_condition(args, cfg: Config, kind: str, channels: int):
    from .conditions import extract
    from .imageio import read_pnm

    if args.condition:
        try:
            arr = read_pnm(args.condition).astype(np.float32) / 255.0
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read condition {args.condition}: {exc}") from exc
        return arr, None
    val = dataset_from(cfg, args.data, "val")
    i = args.condition_index % len(val)
    return extract(kind, val.unit_image(i)), int(val.labels[i])


def cmd_sample(args, cfg: Config, run: Run) -> int:
    from .imageio import write_pnm
    from .sampler import sample

    sched = schedule_from(cfg)
    model, _ = load_denoiser(args.denoiser)
    run.add_input("denoiser", args.denoiser)
    adapter = None
    cond = None
    label = None
    if args.adapter:
        adapter, actk = load_adapter(args.adapter)
        run.add_input("adapter", args.adapter)
        kind = adapter.config.cond_domain
        cond, label = _load_condition(args, cfg, kind, model.config.in_channels)
        if cond.shape[0] != adapter.config.cond_channels:
            raise ConfigError(f"condition has {cond.shape[0]} channels, adapter expects {adapter.config.cond_channels}")
        write_pnm(run.output("condition.pgm" if cond.shape[0] == 1 else "condition.ppm"), cond, "unit")
    gcfg = guidance_from(cfg, sched.T)
    gcfg.dump_intermediates = bool(args.dump_intermediates)
    class_id = cfg["guidance.class_id"]
    c = class_id if class_id >= 0 else label
    count = cfg["sample.count"]
    run.seeds["guidance"] = gcfg.seed
    z, trace = sample(model, adapter, c, cond, gcfg, sched, count=count)
    ext = "pgm" if z.shape[1] == 1 else "ppm"
    sd = run.output("samples")
    sd.mkdir()
    for i, img in enumerate(z):
        write_pnm(sd / f"sample_{i:03d}.{ext}", img)
    with open(run.output("trace.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for r in trace.records:
            mean = (lambda xs: float(np.mean(xs)) if xs else "")
            w.writerow((r.index, r.t, r.t_prev, int(r.guided), mean(r.grad_norm), mean(r.alpha), mean(r.dist),
                        round(r.seconds, 6)))
    if gcfg.dump_intermediates:
        dd = run.output("dumps")
        dd.mkdir()
        for k in range(count):
            target = dd if count == 1 else dd / f"chain_{k:03d}"
            target.mkdir(exist_ok=True)
            for snap in trace.snapshots:
                tag = snap.t if snap.t >= 0 else "final"
                write_pnm(target / f"step_{tag}_sample.{ext}", snap.sample[k])
                if snap.cond is not None:
                    cc = np.clip(snap.cond[k], 0.0, 1.0)
                    write_pnm(target / f"step_{tag}_cond.{'pgm' if cc.shape[0] == 1 else 'ppm'}", cc, "unit")
    run.extra.update({"guided_steps": trace.guided_count, "seconds": trace.seconds, "class_id": c})
    print(f"{count} sample(s) in {trace.seconds:.2f}s, {trace.guided_count} guided steps -> {run.dir}")
    return EXIT_OK


def cmd_ablate(args, cfg: Config, run: Run) -> int:
    from .ablation import DEFAULT_GRIDS, AblationBase, EvalSet, MissingCheckpointError, ablation_run
    from .training import load_classifier

    axis = cfg["ablate.axis"]
    if axis not in DEFAULT_GRIDS:
        raise ConfigError(f"ablate.axis must be one of {sorted(DEFAULT_GRIDS)}")
    if cfg["ablate.grid"]:
        grid = [x for x in cfg["ablate.grid"].split(",") if x]
        grid = [float(x) for x in grid] if axis in ("beta", "t_trunc") else \
            [int(x) if x.lstrip("-").isdigit() else x for x in grid]
    elif args.empty_grid:
        grid = []
    else:
        grid = list(DEFAULT_GRIDS[axis])
    if not args.denoiser or not args.classifier:
        raise CheckpointError("ablate needs --denoiser and --classifier checkpoints")
    model, _ = load_denoiser(args.denoiser)
    clf, _ = load_classifier(args.classifier)
    run.add_input("denoiser", args.denoiser)
    run.add_input("classifier", args.classifier)
    adapters = {}
    if args.adapter:
        adapters["default"] = load_adapter(args.adapter)[0]
        run.add_input("adapter", args.adapter)
    for spec in args.adapter_for or []:
        key, _, path = spec.partition("=")
        if not path:
            raise ConfigError(f"--adapter-for expects KEY=PATH, got {spec!r}")
        key = int(key) if key.isdigit() else key
        adapters[key] = load_adapter(path)[0]
        run.add_input(f"adapter[{key}]", path)
    if not adapters:
        raise CheckpointError("ablate needs at least one adapter checkpoint")
    first = next(iter(adapters.values()))
    kind = first.config.cond_domain
    sched = schedule_from(cfg)
    val = dataset_from(cfg, args.data, "val")
    chains = cfg["ablate.chains"]
    evalset = EvalSet.from_dataset(val, kind, chains)
    base = AblationBase(model, adapters, clf, kind, evalset, sched, guidance_from(cfg, sched.T), chains=chains,
                        seeds=int_list(cfg["ablate.seeds"]), adapter_key="default" if "default" in adapters else next(iter(adapters)))
    run.seeds["ablate"] = list(base.seeds)
    try:
        rows = ablation_run(axis, grid, base, run.dir)
    except MissingCheckpointError as exc:
        raise CheckpointError(str(exc)) from exc
    for r in rows:
        print(f"{axis}={r['value']} seed={r['seed']} fidelity={r['fidelity']:.5f} frechet={r['frechet']} "
              f"acc={r['accuracy']:.3f} s/sample={r['seconds_per_sample']:.3f} guided={r['guided_steps']}")
    return EXIT_OK


def cmd_gradcheck(args, cfg: Config, run: Run) -> int:
    from .gradcheck import TOL, adapter_stack_error, run_suite

    results = run_suite(seeds=args.seeds)
    worst: dict[str, float] = {}
    for r in results:
        worst[r.op] = max(worst.get(r.op, 0.0), r.rel_err)
    ca = adapter_stack_error()
    ok = all(v < TOL for v in worst.values()) and ca < 1e-3
    with open(run.output("gradcheck.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("op", "max_rel_err", "pass"))
        for op, v in worst.items():
            w.writerow((op, f"{v:.3e}", int(v < TOL)))
            print(f"{'PASS' if v < TOL else 'FAIL'} {op:20s} {v:.3e}")
        w.writerow(("adapter_stack", f"{ca:.3e}", int(ca < 1e-3)))
    print(f"{'PASS' if ca < 1e-3 else 'FAIL'} {'adapter_stack':20s} {ca:.3e}")
    return EXIT_OK if ok else EXIT_FAILED


def cmd_oracle_check(args, cfg: Config, run: Run) -> int:
    from .oracle import run_oracle_checks

    sched = schedule_from(cfg)
    checks = run_oracle_checks(sched, chains=args.chains, seed=cfg["guidance.seed"])
    with open(run.output("oracle.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("check", "value", "threshold", "pass"))
        for c in checks:
            w.writerow((c.name, f"{c.value:.6g}", c.threshold, int(c.ok)))
            print(f"{'PASS' if c.ok else 'FAIL'} {c.name}: {c.value:.4g} (< {c.threshold})")
    return EXIT_OK if all(c.ok for c in checks) else EXIT_FAILED


def cmd_describe(args, cfg: Config, run: Run) -> int:
    from .adapter import ConditionAdapter
    from .training import load_classifier
    from .unet import DenoiserModel

    out = {}
    if args.denoiser:
        out["denoiser"] = load_denoiser(args.denoiser)[0].describe()
    if args.adapter:
        out["adapter"] = load_adapter(args.adapter)[0].describe()
    if args.classifier:
        out["classifier"] = load_classifier(args.classifier)[0].describe()
    if not out:
        model = DenoiserModel(unet_config_from(cfg))
        out["denoiser"] = model.describe()
        for size in ("default", "tiny"):
            ca = ConditionAdapter.for_model(model, 1, size)
            out[f"adapter_{size}"] = ca.describe()
    out["config"] = cfg.to_dict()
    text = json.dumps(out, indent=2, sort_keys=True)
    run.output("describe.json").write_text(text)
    print(text)
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-denoiser": cmd_train_denoiser,
    "train-adapter": cmd_train_adapter,
    "train-classifier": cmd_train_classifier,
    "sample": cmd_sample,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "oracle-check": cmd_oracle_check,
    "describe": cmd_describe,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lcdg", description="Late-constraint guided diffusion toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat 'dotted.key = value' config file")
        p.add_argument("--run-dir", help="output root (default $LCDG_RUN_DIR or ./runs)")
        p.add_argument("-v", "--verbose", action="store_true")
        g = p.add_argument_group("config overrides")
        for key in SCHEMA:
            g.add_argument(f"--{key}", dest=f"cfg:{key}", metavar="VALUE", default=None)
        if name in ("train-denoiser", "train-adapter", "train-classifier", "sample", "ablate", "gen-data"):
            p.add_argument("--data", help="dataset directory written by gen-data")
        if name in ("train-adapter", "sample", "ablate", "describe"):
            p.add_argument("--denoiser", help="denoiser checkpoint")
        if name in ("sample", "ablate", "describe"):
            p.add_argument("--adapter", help="adapter checkpoint")
        if name in ("ablate", "describe"):
            p.add_argument("--classifier", help="classifier checkpoint")
        if name == "ablate":
            p.add_argument("--adapter-for", action="append", metavar="KEY=PATH",
                           help="extra adapter for the n / adapter_size axes (repeatable)")
            p.add_argument("--empty-grid", action="store_true", help="sweep nothing (header-only CSV)")
        if name == "train-denoiser":
            p.add_argument("--resume", help="continue from a denoiser checkpoint")
        if name == "sample":
            p.add_argument("--condition", help="condition map image (PGM/PPM)")
            p.add_argument("--condition-index", type=int, default=0, help="validation item to take the condition from")
            p.add_argument("--dump-intermediates", action="store_true")
        if name == "gen-data":
            p.add_argument("--conditions", help="comma list of condition kinds to write as images")
            p.add_argument("--dump-items", type=int, default=16)
        if name == "gradcheck":
            p.add_argument("--seeds", type=int, default=20)
        if name == "oracle-check":
            p.add_argument("--chains", type=int, default=10_000)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg:") and v is not None}
    from .training import DivergenceError

    try:
        cfg = load_config(args.config, overrides)
        run = Run(args.command, cfg, argv, args.run_dir)
        code = COMMANDS[args.command](args, cfg, run)
        run.finish()
        return code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"checkpoint error ({exc.code}): {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except DivergenceError as exc:
        print(f"divergence abort: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE


if __name__ == "__main__":
    sys.exit(main())
