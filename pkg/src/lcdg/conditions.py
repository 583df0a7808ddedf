"""Synthetic structural conditions: edge, stroke, palette and mask maps.

All generators take images in [0, 1] with layout (C, H, W) and return a
:class:`ConditionMap` whose data also lies in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy import ndimage

from . import _kernels

EDGE_KINDS = ("edge", "mask")
COLOR_KINDS = ("stroke", "palette")

# Canny thresholds on the 0-255 scale, mapped to unit-range images
CANNY_LOW = 200 / 255
CANNY_HIGH = 225 / 255

# fixed binarisation threshold for inference/evaluation edges, on the
# normalised gradient magnitude (a unit step gives 1.0)
EVAL_EDGE_THRESHOLD = 0.2
STROKE_KS = (4, 8, 12, 16)


@dataclass
class ConditionMap:
    kind: str
    data: np.ndarray
    provenance: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind in EDGE_KINDS and self.data.shape[0] != 1:
            raise ValueError(f"{self.kind} maps are single channel, got {self.data.shape}")
        if self.kind in COLOR_KINDS and self.data.shape[0] != 3:
            raise ValueError(f"{self.kind} maps are three channel, got {self.data.shape}")


def to_gray(image: np.ndarray) -> np.ndarray:
    if image.shape[0] == 1:
        return image[0]
    return image.mean(axis=0)


_SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)


def sobel(gray: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Horizontal and vertical Sobel responses with edge-replicated borders."""
    g = gray.astype(np.float64)
    gx = ndimage.correlate(g, _SOBEL_X, mode="nearest")
    gy = ndimage.correlate(g, _SOBEL_X.T, mode="nearest")
    return gx, gy


def thin_edges(mag: np.ndarray, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Non-maximum suppression along the quantised gradient direction.

    Ties are broken one-sidedly (>= forward, > backward) so that the two
    pixels straddling a hard step collapse to one.
    """
    h, w = mag.shape
    angle = (np.rad2deg(np.arctan2(gy, gx)) + 180.0) % 180.0
    sector = np.zeros_like(mag, dtype=np.int64)
    sector[(angle >= 22.5) & (angle < 67.5)] = 1
    sector[(angle >= 67.5) & (angle < 112.5)] = 2
    sector[(angle >= 112.5) & (angle < 157.5)] = 3
    offsets = {0: (0, 1), 1: (1, 1), 2: (1, 0), 3: (1, -1)}
    p = np.pad(mag, 1)
    keep = np.zeros_like(mag, dtype=bool)
    for s, (dy, dx) in offsets.items():
        fwd = p[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]
        bwd = p[1 - dy : 1 - dy + h, 1 - dx : 1 - dx + w]
        keep |= (sector == s) & (mag >= fwd) & (mag > bwd)
    return np.where(keep, mag, 0.0)


def gradient_magnitude(image: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    gx, gy = sobel(to_gray(image))
    return np.hypot(gx, gy), gx, gy


def warp(mask: np.ndarray, amplitude: float, rng: np.random.Generator, grid: int = 4) -> np.ndarray:
    """Resample a binary map through a smooth random displacement field."""
    h, w = mask.shape
    if amplitude <= 0:
        return mask.astype(bool)
    coarse = rng.uniform(-1.0, 1.0, size=(2, grid, grid))
    field_ = np.stack([ndimage.zoom(c, (h / grid, w / grid), order=1) for c in coarse])
    peak = np.abs(field_).max() or 1.0
    field_ *= amplitude / peak
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    coords = np.stack([yy + field_[0], xx + field_[1]])
    return ndimage.map_coordinates(mask.astype(np.float64), coords, order=0, mode="constant") > 0.5


def edge_map(
    image: np.ndarray,
    rng: np.random.Generator | None = None,
    threshold: float | tuple[float, float] = EVAL_EDGE_THRESHOLD,
    dilate: int | tuple[int, int] = 0,
    erode: int | tuple[int, int] = 0,
    warp_amplitude: float = 0.0,
) -> ConditionMap:
    """Thinned Sobel edges, binarised, optionally augmented.

    Range arguments given as ``(lo, hi)`` are drawn from ``rng`` (threshold
    uniformly, radii as integers inclusive). Order: threshold, erode,
    dilate, warp.
    """
    image = np.clip(image, 0.0, 1.0)
    mag, gx, gy = gradient_magnitude(image)
    thin = thin_edges(mag / 4.0, gx, gy)

    def pick(v, integer):
        if isinstance(v, tuple):
            if rng is None:
                raise ValueError("random augmentation ranges need an rng")
            return int(rng.integers(v[0], v[1] + 1)) if integer else float(rng.uniform(*v))
        return v

    thr = pick(threshold, False)
    er = pick(erode, True)
    dl = pick(dilate, True)
    edges = thin > thr
    if er:
        # erosion of 1-px lines is destructive; thin by dropping pixels whose
        # eroded-then-dilated support is empty, keeping only thick strokes
        edges = _kernels.erode(_kernels.dilate(edges, er), er) & edges
    if dl:
        edges = _kernels.dilate(edges, dl)
    if warp_amplitude > 0:
        if rng is None:
            raise ValueError("warping needs an rng")
        edges = warp(edges, warp_amplitude, rng)
    prov = {"threshold": thr, "erode": er, "dilate": dl, "warp": warp_amplitude}
    return ConditionMap("edge", edges[None].astype(np.float32), prov)


def training_edge(image: np.ndarray, rng: np.random.Generator) -> ConditionMap:
    """Supervision edge with the random threshold / morphology / warp recipe."""
    return edge_map(
        image,
        rng,
        threshold=(0.1, 0.3),
        dilate=(0, 1),
        erode=(0, 1),
        warp_amplitude=float(rng.uniform(0.0, 2.0)),
    )


def canny_sim(image: np.ndarray, low: float = CANNY_LOW, high: float = CANNY_HIGH) -> ConditionMap:
    """Canny-style edges: thinned Sobel magnitude with hysteresis thresholds.

    Thresholds are on the raw Sobel magnitude of a unit-range image, i.e. the
    8-bit values divided by 255.
    """
    if low > high:
        raise ValueError("low threshold above high threshold")
    mag, gx, gy = gradient_magnitude(np.clip(image, 0.0, 1.0))
    thin = thin_edges(mag, gx, gy)
    weak = thin >= low
    strong = thin >= high
    labels, n = ndimage.label(weak, structure=np.ones((3, 3)))
    keep = np.zeros(n + 1, dtype=bool)
    keep[np.unique(labels[strong])] = True
    keep[0] = False
    edges = keep[labels]
    return ConditionMap("edge", edges[None].astype(np.float32), {"low": low, "high": high})


def median_kernel_size(height: int) -> int:
    k = max(3, int(round(23 * height / 512)))
    return k if k % 2 else k + 1


def kmeans(
    points: np.ndarray, k: int, rng: np.random.Generator, max_iter: int = 50
) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """Lloyd's algorithm with k-means++ seeding.

    Returns (centers, labels, energy per iteration). Stops when the labels
    stop changing or after ``max_iter`` iterations; centers of emptied
    clusters stay where they were.
    """
    pts = points.astype(np.float64)
    uniq = np.unique(pts, axis=0)
    k_eff = min(k, len(uniq))
    centers = np.empty((k_eff, pts.shape[1]))
    centers[0] = uniq[rng.integers(len(uniq))]
    d2 = ((uniq - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k_eff):
        total = d2.sum()
        if total <= 0:
            centers = centers[:j]
            break
        pick = rng.choice(len(uniq), p=d2 / total)
        centers[j] = uniq[pick]
        d2 = np.minimum(d2, ((uniq - centers[j]) ** 2).sum(axis=1))
    labels, dist = _kernels.assign(pts, centers)
    energy = [float(dist.sum())]
    for _ in range(max_iter):
        for j in range(len(centers)):
            members = pts[labels == j]
            if len(members):
                centers[j] = members.mean(axis=0)
        new_labels, dist = _kernels.assign(pts, centers)
        energy.append(float(dist.sum()))
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return centers, labels, energy


def stroke_sim(image: np.ndarray, rng: np.random.Generator, k: int | None = None) -> ConditionMap:
    """Median-filter then colour-quantise with k-means over joint RGB vectors."""
    if image.shape[0] != 3:
        raise ValueError("stroke simulation needs a 3-channel image")
    size = median_kernel_size(image.shape[1])
    filtered = _kernels.median_filter(np.clip(image, 0.0, 1.0).astype(np.float64), size)
    if k is None:
        k = int(rng.choice(STROKE_KS))
    pts = filtered.reshape(3, -1).T
    centers, labels, _ = kmeans(pts, k, rng)
    out = centers[labels].T.reshape(image.shape)
    return ConditionMap("stroke", np.clip(out, 0, 1).astype(np.float32), {"median": size, "k": k})


def palette_sim(image: np.ndarray, grid: int = 8) -> ConditionMap:
    """Nearest downsample to grid x grid and nearest upsample back."""
    if image.shape[0] != 3:
        raise ValueError("palette simulation needs a 3-channel image")
    c, h, w = image.shape
    ph, pw = -h % grid, -w % grid
    img = np.pad(image, ((0, 0), (0, ph), (0, pw)), mode="edge") if ph or pw else image
    H, W = img.shape[1:]
    ys = (np.arange(grid) * H) // grid
    xs = (np.arange(grid) * W) // grid
    small = img[:, ys][:, :, xs]
    up = small.repeat(H // grid, axis=1).repeat(W // grid, axis=2)[:, :h, :w]
    return ConditionMap("palette", np.clip(up, 0, 1).astype(np.float32), {"grid": grid})


# ---------------------------------------------------------------------------
# masks
# ---------------------------------------------------------------------------

SHAPES = ("circle", "square", "triangle", "ring")


def triangle_vertices(geom: dict) -> np.ndarray:
    ang = geom.get("angle", 0.0) + np.array([0.0, 2 * np.pi / 3, 4 * np.pi / 3])
    r = geom["size"]
    return np.stack([geom["cy"] - r * np.cos(ang), geom["cx"] + r * np.sin(ang)], axis=1)


def shape_mask(geom: dict | None, size: int = 32) -> np.ndarray:
    """Exact foreground of a shape spec, sampled at pixel centres."""
    mask = np.zeros((size, size), dtype=bool)
    if geom is None or geom.get("shape") is None:
        return mask
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    kind = geom["shape"]
    cy, cx, r = geom["cy"], geom["cx"], geom["size"]
    if kind == "circle":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if kind == "ring":
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        return (d2 <= r * r) & (d2 >= (geom.get("inner", 0.55) * r) ** 2)
    if kind == "square":
        return (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)
    if kind == "triangle":
        v = triangle_vertices(geom)
        inside = np.ones_like(mask)
        for i in range(3):
            (y0, x0), (y1, x1) = v[i], v[(i + 1) % 3]
            cross = (x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0)
            inside &= cross <= 0
        if not inside.any():  # opposite winding
            inside = np.ones_like(mask)
            for i in range(3):
                (y0, x0), (y1, x1) = v[i], v[(i + 1) % 3]
                inside &= ((x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0)) >= 0
        return inside
    raise ValueError(f"unknown shape-spec {kind!r}")


def convex_fill(mask: np.ndarray) -> np.ndarray:
    """Fill the convex hull of a binary mask (pixel-centre test)."""
    from scipy.spatial import ConvexHull, QhullError

    pts = np.argwhere(mask).astype(np.float64)
    if len(pts) < 3:
        return mask.copy()
    # use pixel corners so single rows/columns are not degenerate
    corners = (pts[:, None, :] + np.array([[0, 0], [0, 1], [1, 0], [1, 1]])[None]).reshape(-1, 2)
    try:
        hull = ConvexHull(corners)
    except QhullError:
        return mask.copy()
    h, w = mask.shape
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    grid = np.stack([yy.ravel(), xx.ravel()], axis=1)
    inside = np.all(grid @ hull.equations[:, :2].T + hull.equations[:, 2] <= 1e-9, axis=1)
    return inside.reshape(h, w) | mask


MASK_THRESHOLD = 0.45


def mask_sim(source, coarse: bool = False, size: int = 32, coarse_radius: int = 2) -> ConditionMap:
    """Binary foreground mask from a shape spec (exact) or an image.

    For an image the foreground is every pixel whose brightest channel
    exceeds :data:`MASK_THRESHOLD` (the renderer keeps backgrounds below it).
    ``coarse`` returns the dilated convex blob of the fine mask.
    """
    if source is None or isinstance(source, dict):
        fine = shape_mask(source, size)
        prov = {"source": "geometry"}
    else:
        img = np.asarray(source)
        fine = np.clip(img, 0, 1).max(axis=0) > MASK_THRESHOLD
        prov = {"source": "image", "threshold": MASK_THRESHOLD}
    out = fine
    if coarse and fine.any():
        out = _kernels.dilate(convex_fill(fine), coarse_radius)
        prov["coarse_radius"] = coarse_radius
    return ConditionMap("mask", out[None].astype(np.float32), prov)


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


def cond_channels(kind: str, image_channels: int) -> int:
    if kind in EDGE_KINDS:
        return 1
    if kind in COLOR_KINDS:
        if image_channels != 3:
            raise ValueError(f"{kind} conditions need 3-channel images")
        return 3
    raise ValueError(f"unknown condition kind {kind!r}")


def extract(kind: str, image: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
    """Deterministic evaluation-time extractor used for targets and fidelity."""
    if kind == "edge":
        return edge_map(image, dilate=1).data
    if kind == "mask":
        return mask_sim(image).data
    if kind == "stroke":
        return stroke_sim(image, rng or np.random.default_rng(0), k=8).data
    if kind == "palette":
        return palette_sim(image).data
    raise ValueError(f"unknown condition kind {kind!r}")


def training_target(kind: str, image: np.ndarray, rng: np.random.Generator, geometry: dict | None = None) -> np.ndarray:
    """Randomised supervision signal for adapter training."""
    if kind == "edge":
        return training_edge(image, rng).data
    if kind == "mask":
        coarse = bool(rng.random() < 0.3)
        return mask_sim(geometry if geometry is not None else image, coarse=coarse, size=image.shape[-1]).data
    if kind == "stroke":
        return stroke_sim(image, rng).data
    if kind == "palette":
        return palette_sim(image).data
    raise ValueError(f"unknown condition kind {kind!r}")
