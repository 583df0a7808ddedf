"""Checkpoint container.

Layout (all integers little-endian)::

    b"LCDG" | u16 version | u32 header length | header JSON | tensor bytes | sha256 digest

The header holds the model kind, a metadata map and, per tensor, its name,
dtype, shape and byte offset. Tensors are stored row-major little-endian.
The trailing digest covers every preceding byte.
"""

from __future__ import annotations

import hashlib
import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"LCDG"
VERSION = 1
_DTYPES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8"), "i8": np.dtype("<i8"), "u1": np.dtype("u1")}


class CheckpointError(Exception):
    code = "checkpoint"


class BadMagicError(CheckpointError):
    code = "bad_magic"


class DigestMismatchError(CheckpointError):
    code = "digest_mismatch"


class VersionSkewError(CheckpointError):
    code = "version_skew"


class PrecisionWarning(UserWarning):
    """A stored tensor was narrowed to the runtime precision."""


@dataclass
class Checkpoint:
    kind: str
    metadata: dict
    tensors: dict[str, np.ndarray]
    warnings: list[str] = field(default_factory=list)

    def to_bytes(self) -> bytes:
        index = []
        blobs = []
        offset = 0
        for name, arr in self.tensors.items():
            arr = np.asarray(arr)
            code = _dtype_code(arr.dtype)
            blob = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
            index.append({"name": name, "dtype": code, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)})
            blobs.append(blob)
            offset += len(blob)
        header = {"kind": self.kind, "metadata": self.metadata, "tensors": index}
        hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        body = MAGIC + struct.pack("<HI", VERSION, len(hbytes)) + hbytes + b"".join(blobs)
        return body + hashlib.sha256(body).digest()

    @property
    def digest(self) -> str:
        return self.to_bytes()[-32:].hex()


def _dtype_code(dtype) -> str:
    dtype = np.dtype(dtype)
    for code, d in _DTYPES.items():
        if dtype.kind == d.kind and dtype.itemsize == d.itemsize:
            return code
    if dtype.kind in "iu":
        return "i8"
    raise CheckpointError(f"unsupported tensor dtype {dtype}")


def from_bytes(raw: bytes, runtime_dtype=None) -> Checkpoint:
    """Parse and verify a container.

    With ``runtime_dtype`` set to float32, float64 tensors are narrowed and
    the narrowing is recorded in ``Checkpoint.warnings`` (and warned).
    """
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagicError("not a checkpoint (bad magic)")
    if len(raw) < 10 + 32:
        raise CheckpointError("truncated checkpoint")
    version, hlen = struct.unpack("<HI", raw[4:10])
    if version != VERSION:
        raise VersionSkewError(f"checkpoint version {version}, runtime supports {VERSION}")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise DigestMismatchError("checkpoint digest mismatch (file corrupted)")
    header = json.loads(body[10 : 10 + hlen].decode())
    data = body[10 + hlen :]
    tensors = {}
    notes = []
    for item in header["tensors"]:
        dt = _DTYPES[item["dtype"]]
        arr = np.frombuffer(data, dtype=dt, count=item["nbytes"] // dt.itemsize, offset=item["offset"])
        arr = arr.reshape(item["shape"]).astype(dt.newbyteorder("="), copy=True)
        if runtime_dtype is not None and arr.dtype.kind == "f" and arr.dtype != np.dtype(runtime_dtype):
            target = np.dtype(runtime_dtype)
            if target.itemsize < arr.dtype.itemsize:
                notes.append(f"{item['name']}: narrowed {arr.dtype} -> {target}")
            arr = arr.astype(target)
        tensors[item["name"]] = arr
    for note in notes:
        warnings.warn(note, PrecisionWarning, stacklevel=3)
    return Checkpoint(header["kind"], header["metadata"], tensors, notes)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> str:
    """Write atomically; returns the hex digest."""
    path = Path(path)
    raw = ckpt.to_bytes()
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(raw)
    tmp.replace(path)
    return raw[-32:].hex()


def load_checkpoint(path: str | Path, runtime_dtype=None) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return from_bytes(raw, runtime_dtype)


def file_digest(path: str | Path) -> str:
    raw = Path(path).read_bytes()
    return raw[-32:].hex()


# ---------------------------------------------------------------------------
# model helpers
# ---------------------------------------------------------------------------


def model_checkpoint(model, extra: dict | None = None, optim=None) -> Checkpoint:
    info = model.describe()
    meta = {"describe": info}
    meta.update(extra or {})
    tensors = dict(model.state_dict())
    if optim is not None:
        tensors.update({f"optim.{k}": v for k, v in optim.state_dict().items()})
    return Checkpoint(info["kind"], meta, tensors)


def _model_state(ckpt: Checkpoint) -> dict[str, np.ndarray]:
    return {k: v for k, v in ckpt.tensors.items() if not k.startswith("optim.")}


def optim_state(ckpt: Checkpoint) -> dict[str, np.ndarray]:
    return {k[len("optim."):]: v for k, v in ckpt.tensors.items() if k.startswith("optim.")}


def load_denoiser(path: str | Path, runtime_dtype=np.float32):
    from .unet import DenoiserModel, TapSpec, config_from_dict

    ckpt = load_checkpoint(path, runtime_dtype)
    if ckpt.kind != "denoiser":
        raise CheckpointError(f"{path} holds a {ckpt.kind!r}, expected a denoiser")
    info = ckpt.metadata["describe"]
    model = DenoiserModel(config_from_dict(info["config"]))
    if model.tap_spec.to_dict() != TapSpec.from_dict(info["tap_spec"]).to_dict():
        raise CheckpointError("stored tap spec does not match the rebuilt model")
    try:
        model.load_state_dict(_model_state(ckpt))
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"weights do not fit the stored architecture: {exc}") from exc
    if runtime_dtype is not None:
        model.astype(runtime_dtype)
    model.eval()
    return model, ckpt


def load_adapter(path: str | Path, runtime_dtype=np.float32):
    from .adapter import AdapterConfig, ConditionAdapter

    ckpt = load_checkpoint(path, runtime_dtype)
    if ckpt.kind != "adapter":
        raise CheckpointError(f"{path} holds a {ckpt.kind!r}, expected an adapter")
    cfg = AdapterConfig(**ckpt.metadata["describe"]["config"])
    adapter = ConditionAdapter(cfg)
    try:
        adapter.load_state_dict(_model_state(ckpt))
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"weights do not fit the stored architecture: {exc}") from exc
    if runtime_dtype is not None:
        adapter.astype(runtime_dtype)
    adapter.eval()
    return adapter, ckpt
