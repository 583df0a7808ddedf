from __future__ import annotations

import struct
import warnings

import numpy as np
import pytest

from lcdg.checkpoint import (
    BadMagicError,
    Checkpoint,
    CheckpointError,
    DigestMismatchError,
    PrecisionWarning,
    VersionSkewError,
    from_bytes,
    load_adapter,
    load_checkpoint,
    load_denoiser,
    model_checkpoint,
    save_checkpoint,
)
from lcdg.nn import Adam


@pytest.fixture
def ckpt():
    rng = np.random.default_rng(0)
    return Checkpoint("test", {"a": 1, "nested": {"b": [1, 2]}},
                      {"w": rng.standard_normal((3, 4)).astype(np.float32), "ids": np.arange(5), "d": rng.random(2)})


def test_round_trip_byte_identical(ckpt, tmp_path):
    raw = ckpt.to_bytes()
    back = from_bytes(raw)
    assert back.to_bytes() == raw
    save_checkpoint(tmp_path / "c.ckpt", back)
    assert (tmp_path / "c.ckpt").read_bytes() == raw
    for k in ckpt.tensors:
        np.testing.assert_array_equal(back.tensors[k], ckpt.tensors[k])
        assert back.tensors[k].dtype == np.asarray(ckpt.tensors[k]).dtype


def test_bad_magic(ckpt):
    with pytest.raises(BadMagicError):
        from_bytes(b"NOPE" + ckpt.to_bytes()[4:])


def test_digest_mismatch(ckpt):
    raw = bytearray(ckpt.to_bytes())
    raw[-40] ^= 0xFF
    with pytest.raises(DigestMismatchError):
        from_bytes(bytes(raw))


def test_version_skew(ckpt):
    raw = ckpt.to_bytes()
    bumped = raw[:4] + struct.pack("<H", 99) + raw[6:]
    with pytest.raises(VersionSkewError):
        from_bytes(bumped)


def test_errors_are_distinct_types():
    assert len({BadMagicError, DigestMismatchError, VersionSkewError}) == 3
    assert all(issubclass(e, CheckpointError) for e in (BadMagicError, DigestMismatchError, VersionSkewError))


def test_narrowing_warns_and_records(ckpt):
    with pytest.warns(PrecisionWarning):
        back = from_bytes(ckpt.to_bytes(), runtime_dtype=np.float32)
    assert back.tensors["d"].dtype == np.float32
    assert any("d: narrowed" in w for w in back.warnings)


def test_no_warning_without_narrowing(ckpt):
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        back = from_bytes(ckpt.to_bytes(), runtime_dtype=np.float64)
    assert back.warnings == []


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "absent.ckpt")


def test_denoiser_round_trip(tiny_model, tmp_path):
    opt = Adam(tiny_model.parameters())
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model_checkpoint(tiny_model, {"train": {"step": 3}}, opt))
    model, meta = load_denoiser(path)
    assert meta.metadata["train"]["step"] == 3
    for (k, a), (_, b) in zip(sorted(tiny_model.state_dict().items()), sorted(model.state_dict().items())):
        np.testing.assert_array_equal(a, b)
    with pytest.raises(CheckpointError):
        load_adapter(path)


def test_adapter_round_trip(tiny_adapter, tmp_path):
    path = tmp_path / "a.ckpt"
    save_checkpoint(path, model_checkpoint(tiny_adapter))
    adapter, _ = load_adapter(path)
    assert adapter.describe() == tiny_adapter.describe()
    with pytest.raises(CheckpointError):
        load_denoiser(path)
