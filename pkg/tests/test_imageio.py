from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lcdg.imageio import contact_sheet, read_pnm, to_uint8, write_pnm


def test_to_uint8_endpoints():
    np.testing.assert_array_equal(to_uint8(np.array([-1.0, 0.0, 1.0, 3.0])), [0, 128, 255, 255])
    np.testing.assert_array_equal(to_uint8(np.array([0.0, 1.0]), "unit"), [0, 255])


@settings(max_examples=20, deadline=None)
@given(st.sampled_from([1, 3]), st.integers(1, 9), st.integers(1, 9), st.integers(0, 2**31 - 1))
def test_pnm_round_trip(c, h, w, seed):
    import tempfile
    from pathlib import Path

    img = np.random.default_rng(seed).uniform(-1, 1, (c, h, w))
    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "x.pnm"
        write_pnm(path, img)
        np.testing.assert_array_equal(read_pnm(path), to_uint8(img))


def test_bad_channel_count(tmp_path):
    with pytest.raises(ValueError):
        write_pnm(tmp_path / "x.pgm", np.zeros((2, 4, 4)))


def test_contact_sheet_shape():
    sheet = contact_sheet(np.zeros((5, 1, 4, 4)), cols=3)
    assert sheet.shape == (1, 2 * 5 + 1, 3 * 5 + 1)
