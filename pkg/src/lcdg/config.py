"""Flat ``dotted.key = value`` configuration with a typed schema.

Lines starting with ``#`` are comments. Unknown keys and unparsable values
raise :class:`ConfigError`. Command-line flags mirror the keys
(``--guidance.beta 4``) and override file values.
"""

from __future__ import annotations

from pathlib import Path

SCHEMA: dict[str, tuple[type, object]] = {
    "schedule.T": (int, 1000),
    "schedule.beta_start": (float, 1e-4),
    "schedule.beta_end": (float, 0.02),
    "resample.n": (float, 2.0),
    "resample.mode": (str, "resampled"),
    "data.n": (int, 10_000),
    "data.seed": (int, 0),
    "data.channels": (int, 1),
    "model.image_size": (int, 32),
    "model.base_channels": (int, 32),
    "model.channel_mults": (str, "1,2,4"),
    "model.blocks_per_stage": (int, 2),
    "model.pe_dim": (int, 64),
    "model.seed": (int, 0),
    "train.steps": (int, 20_000),
    "train.batch_size": (int, 16),
    "train.lr": (float, 1e-4),
    "train.seed": (int, 0),
    "train.p_uncond": (float, 0.1),
    "train.checkpoint_every": (int, 5000),
    "adapter.kind": (str, "edge"),
    "adapter.size": (str, "default"),
    "adapter.widths": (str, ""),
    "adapter.iterations": (int, 10_000),
    "adapter.batch_size": (int, 4),
    "adapter.lr": (float, 1e-4),
    "adapter.seed": (int, 0),
    "classifier.steps": (int, 1500),
    "classifier.seed": (int, 0),
    "guidance.beta": (float, 2.0),
    "guidance.t_trunc": (int, 500),
    "guidance.omega": (float, 6.0),
    "guidance.sampler": (str, "ddim"),
    "guidance.ddim_steps": (int, 50),
    "guidance.ddim_eta": (float, 0.0),
    "guidance.ssc": (bool, False),
    "guidance.seed": (int, 0),
    "guidance.alpha_mode": (str, "matched"),
    "guidance.clip_x0": (bool, True),
    "guidance.dump_stride": (int, 5),
    "guidance.class_id": (int, -1),
    "sample.count": (int, 1),
    "ablate.axis": (str, "beta"),
    "ablate.grid": (str, ""),
    "ablate.chains": (int, 16),
    "ablate.seeds": (str, "0"),
    "ablate.frechet_chains": (int, 64),
}


class ConfigError(ValueError):
    pass


def parse_value(key: str, raw) -> object:
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    kind = SCHEMA[key][0]
    if not isinstance(raw, str):
        if kind is float and isinstance(raw, int) and not isinstance(raw, bool):
            return float(raw)
        if isinstance(raw, kind):
            return raw
        raw = str(raw)
    text = raw.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind.__name__}") from exc
    return text


class Config:
    def __init__(self, values: dict | None = None):
        self.values = {k: default for k, (_, default) in SCHEMA.items()}
        self.sources = {k: "default" for k in SCHEMA}
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key: str, raw, source: str = "override") -> None:
        self.values[key] = parse_value(key, raw)
        self.sources[key] = source

    def __getitem__(self, key: str):
        if key not in self.values:
            raise ConfigError(f"unknown config key {key!r}")
        return self.values[key]

    def section(self, prefix: str) -> dict:
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.values.items() if k.startswith(p)}

    def to_text(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in sorted(self.values.items()))

    def to_dict(self) -> dict:
        return dict(sorted(self.values.items()))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def parse_text(text: str, origin: str = "<text>") -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        s = line.split("#", 1)[0].strip()
        if not s:
            continue
        if "=" not in s:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in s.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{origin}:{lineno}: unknown config key {key!r}")
        out[key] = value
    return out


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> Config:
    cfg = Config()
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        for k, v in parse_text(text, str(path)).items():
            cfg.set(k, v, source="file")
    for k, v in (overrides or {}).items():
        if v is not None:
            cfg.set(k, v, source="flag")
    return cfg


def int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.replace(" ", "").split(",") if x)
    except ValueError as exc:
        raise ConfigError(f"expected a comma-separated integer list, got {text!r}") from exc


def float_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.replace(" ", "").split(",") if x)
    except ValueError as exc:
        raise ConfigError(f"expected a comma-separated number list, got {text!r}") from exc
