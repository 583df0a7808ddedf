from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lcdg.conditions import (
    ConditionMap,
    canny_sim,
    cond_channels,
    convex_fill,
    edge_map,
    extract,
    kmeans,
    mask_sim,
    median_kernel_size,
    palette_sim,
    shape_mask,
    stroke_sim,
    training_edge,
    training_target,
)
from lcdg.data import render


def square_image(side: int, size: int = 32, fg: float = 0.9, bg: float = 0.1) -> np.ndarray:
    img = np.full((1, size, size), bg, np.float32)
    o = (size - side) // 2
    img[:, o : o + side, o : o + side] = fg
    return img


@pytest.mark.parametrize("side", [8, 12, 16, 20])
def test_square_edge_count_near_perimeter(side):
    edges = edge_map(square_image(side)).data
    assert edges.shape == (1, 32, 32) and set(np.unique(edges)) <= {0.0, 1.0}
    assert abs(edges.sum() - 4 * side) <= 0.2 * 4 * side


def test_flat_image_has_no_edges():
    assert edge_map(np.full((1, 16, 16), 0.4)).data.sum() == 0
    assert canny_sim(np.full((1, 16, 16), 0.4)).data.sum() == 0


def test_edge_dilation_grows_map():
    img = square_image(12)
    thin = edge_map(img).data.sum()
    assert edge_map(img, dilate=1).data.sum() > thin


def test_training_edge_provenance_in_ranges():
    rng = np.random.default_rng(0)
    for _ in range(20):
        m = training_edge(square_image(12), rng)
        p = m.provenance
        assert 0.1 <= p["threshold"] <= 0.3 and p["dilate"] in (0, 1) and p["erode"] in (0, 1)
        assert 0.0 <= p["warp"] <= 2.0


def test_augmentation_ranges_need_rng():
    with pytest.raises(ValueError):
        edge_map(square_image(8), threshold=(0.1, 0.3))


def test_canny_hysteresis_keeps_weak_connected_edges():
    img = square_image(12, fg=1.0, bg=0.0)
    strong = canny_sim(img).data.sum()
    assert strong > 0
    assert canny_sim(img, low=0.5, high=0.9).data.sum() >= canny_sim(img, low=0.9, high=0.9).data.sum()
    with pytest.raises(ValueError):
        canny_sim(img, low=0.9, high=0.5)


@pytest.mark.parametrize("h,k", [(32, 3), (256, 13), (512, 23), (64, 3)])
def test_median_kernel_size(h, k):
    assert median_kernel_size(h) == k


def test_kmeans_two_colour_oracle():
    img = np.zeros((3, 8, 8))
    a, b = np.array([0.9, 0.1, 0.2]), np.array([0.1, 0.6, 0.8])
    img[:, :, :4] = a[:, None, None]
    img[:, :, 4:] = b[:, None, None]
    centers, labels, _ = kmeans(img.reshape(3, -1).T, 4, np.random.default_rng(0))
    occupied = np.unique(labels)
    assert len(occupied) == 2
    got = sorted(map(tuple, centers[occupied]))
    np.testing.assert_allclose(got, sorted([tuple(a), tuple(b)]), atol=1e-3)


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_kmeans_energy_non_increasing(k, seed):
    pts = np.random.default_rng(seed).random((60, 3))
    _, _, energy = kmeans(pts, k, np.random.default_rng(seed))
    assert all(b <= a + 1e-9 for a, b in zip(energy, energy[1:]))
    assert len(energy) <= 51


def test_stroke_uses_at_most_k_colours():
    img = np.random.default_rng(0).random((3, 32, 32))
    m = stroke_sim(img, np.random.default_rng(1), k=4)
    colours = np.unique(m.data.reshape(3, -1).T, axis=0)
    assert len(colours) <= 4 and m.provenance["median"] == 3


def test_palette_blocks_constant():
    img = np.random.default_rng(0).random((3, 32, 32))
    p = palette_sim(img).data
    for y in range(0, 32, 4):
        for x in range(0, 32, 4):
            block = p[:, y : y + 4, x : x + 4]
            assert np.all(block == block[:, :1, :1])


def test_palette_pads_non_multiple():
    p = palette_sim(np.random.default_rng(0).random((3, 30, 27))).data
    assert p.shape == (3, 30, 27)


@pytest.mark.parametrize("fn", [lambda im: stroke_sim(im, np.random.default_rng(0)), palette_sim])
def test_colour_kinds_need_rgb(fn):
    with pytest.raises(ValueError):
        fn(np.zeros((1, 8, 8)))


@pytest.mark.parametrize("r", [5.0, 7.5, 10.0])
def test_disk_area(r):
    m = shape_mask({"shape": "circle", "cx": 16, "cy": 16, "size": r}, 32)
    assert abs(m.sum() - np.pi * r * r) <= 0.1 * np.pi * r * r


def test_triangle_either_winding():
    g = {"shape": "triangle", "cx": 16, "cy": 16, "size": 8, "angle": 0.3}
    area = shape_mask(g).sum()
    expected = 3 * np.sqrt(3) / 4 * 8**2
    assert abs(area - expected) < 0.15 * expected


def test_mask_from_image_matches_geometry():
    g = {"shape": "square", "cx": 15.3, "cy": 17.1, "size": 6.0, "fg": 0.8, "bg": 0.1}
    np.testing.assert_array_equal(mask_sim(render(g)).data, mask_sim(g).data)


def test_coarse_mask_contains_fine():
    g = {"shape": "ring", "cx": 16, "cy": 16, "size": 9, "inner": 0.55}
    fine = mask_sim(g).data
    coarse = mask_sim(g, coarse=True).data
    assert np.all(coarse >= fine) and coarse.sum() > fine.sum()


def test_convex_fill_fills_ring_hole():
    ring = shape_mask({"shape": "ring", "cx": 16, "cy": 16, "size": 9, "inner": 0.55})
    filled = convex_fill(ring)
    assert filled[16, 16] and not ring[16, 16]


def test_empty_geometry_gives_empty_mask():
    assert mask_sim(None).data.sum() == 0


def test_condition_map_channel_validation():
    with pytest.raises(ValueError):
        ConditionMap("edge", np.zeros((3, 4, 4)))
    with pytest.raises(ValueError):
        ConditionMap("palette", np.zeros((1, 4, 4)))


def test_dispatch():
    assert cond_channels("edge", 3) == 1 and cond_channels("stroke", 3) == 3
    with pytest.raises(ValueError):
        cond_channels("stroke", 1)
    with pytest.raises(ValueError):
        extract("depth", np.zeros((1, 8, 8)))
    rng = np.random.default_rng(0)
    img = np.random.default_rng(1).random((3, 16, 16))
    for kind in ("edge", "mask", "stroke", "palette"):
        assert training_target(kind, img, rng).shape[0] == cond_channels(kind, 3)


def test_extract_is_deterministic():
    img = np.random.default_rng(1).random((3, 16, 16))
    for kind in ("edge", "mask", "stroke", "palette"):
        np.testing.assert_array_equal(extract(kind, img), extract(kind, img))
