"""Hot inner loops with a numba version and a pure-numpy version.

col2im, the median filter, k-means assignment and disk morphology have both
paths; im2col is numpy-only because it is already a handful of slice copies.
The numba path is used when numba imports cleanly and ``LCDG_NUMBA`` is not
set to ``0``. Both paths must produce identical results (up to float
summation order); ``tests/test_kernels.py`` checks this and
``benchmarks/bench_kernels.py`` times them against each other.
"""

from __future__ import annotations

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    import numba

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    _HAVE_NUMBA = False


def numba_enabled() -> bool:
    return _HAVE_NUMBA and os.environ.get("LCDG_NUMBA", "1") != "0"


# ---------------------------------------------------------------------------
# im2col / col2im
#
# Patches use a channel-major layout (C*K*K, N*Ho*Wo): each (i, j) kernel tap
# is one strided slice copy, which is several times faster than the
# row-per-pixel layout at the small channel counts used here.
# ---------------------------------------------------------------------------


def im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Unfold a padded NCHW array into a (C*K*K, N*Ho*Wo) patch matrix.

    Pure slice copies; there is no scalar loop worth compiling.
    """
    n, c = xp.shape[:2]
    out = np.empty((c, k, k, n, ho, wo), dtype=xp.dtype)
    xt = xp.transpose(1, 0, 2, 3)
    for i in range(k):
        for j in range(k):
            out[:, i, j] = xt[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return out.reshape(c * k * k, n * ho * wo)


def col2im_numpy(
    cols: np.ndarray, padded_shape: tuple, k: int, stride: int, ho: int, wo: int
) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patches back to padded NCHW."""
    n, c, hp, wp = padded_shape
    c6 = cols.reshape(c, k, k, n, ho, wo)
    out = np.zeros((c, n, hp, wp), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += c6[:, i, j]
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3))


if _HAVE_NUMBA:

    @numba.njit(cache=True)
    def _col2im_nb(cols, n, c, hp, wp, k, stride, ho, wo):
        c6 = cols.reshape(c, k, k, n, ho, wo)
        out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
        for b in range(n):
            for ch in range(c):
                for i in range(k):
                    for j in range(k):
                        for y in range(ho):
                            dst = out[b, ch, y * stride + i]
                            src = c6[ch, i, j, b, y]
                            for x in range(wo):
                                dst[x * stride + j] += src[x]
        return out


def col2im(cols: np.ndarray, padded_shape: tuple, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    if numba_enabled():
        n, c, hp, wp = padded_shape
        return _col2im_nb(np.ascontiguousarray(cols), n, c, hp, wp, k, stride, ho, wo)
    return col2im_numpy(cols, padded_shape, k, stride, ho, wo)


# ---------------------------------------------------------------------------
# median filter (stroke simulation)
# ---------------------------------------------------------------------------


def median_filter_numpy(img: np.ndarray, size: int) -> np.ndarray:
    """Per-channel median over a size x size window with edge replication.

    ``img`` is (C, H, W).
    """
    r = size // 2
    padded = np.pad(img, ((0, 0), (r, r), (r, r)), mode="edge")
    win = sliding_window_view(padded, (size, size), axis=(1, 2))
    return np.median(win.reshape(win.shape[:3] + (size * size,)), axis=-1).astype(img.dtype)


if _HAVE_NUMBA:

    @numba.njit(cache=True)
    def _median_filter_nb(padded, size, h, w):
        c = padded.shape[0]
        out = np.empty((c, h, w), dtype=np.float64)
        buf = np.empty(size * size, dtype=np.float64)
        m = size * size
        for ch in range(c):
            for y in range(h):
                for x in range(w):
                    # insertion sort into a reused buffer; windows are tiny
                    idx = 0
                    for i in range(size):
                        for j in range(size):
                            v = padded[ch, y + i, x + j]
                            q = idx
                            while q > 0 and buf[q - 1] > v:
                                buf[q] = buf[q - 1]
                                q -= 1
                            buf[q] = v
                            idx += 1
                    if m % 2 == 1:
                        out[ch, y, x] = buf[m // 2]
                    else:
                        out[ch, y, x] = 0.5 * (buf[m // 2 - 1] + buf[m // 2])
        return out


def median_filter(img: np.ndarray, size: int) -> np.ndarray:
    if size < 1 or size % 2 == 0:
        raise ValueError(f"median window must be odd and positive, got {size}")
    if numba_enabled():
        r = size // 2
        padded = np.pad(img.astype(np.float64), ((0, 0), (r, r), (r, r)), mode="edge")
        return _median_filter_nb(padded, size, img.shape[1], img.shape[2]).astype(img.dtype)
    return median_filter_numpy(img, size)


# ---------------------------------------------------------------------------
# k-means assignment step
# ---------------------------------------------------------------------------


def assign_numpy(points: np.ndarray, centers: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-center labels and squared distances for (P, D) points."""
    d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
    labels = np.argmin(d2, axis=1)
    return labels, d2[np.arange(len(points)), labels]


if _HAVE_NUMBA:

    @numba.njit(cache=True)
    def _assign_nb(points, centers):
        p, d = points.shape
        k = centers.shape[0]
        labels = np.empty(p, dtype=np.int64)
        dist = np.empty(p, dtype=np.float64)
        for i in range(p):
            best = np.inf
            arg = 0
            for j in range(k):
                acc = 0.0
                for q in range(d):
                    diff = points[i, q] - centers[j, q]
                    acc += diff * diff
                if acc < best:
                    best = acc
                    arg = j
            labels[i] = arg
            dist[i] = best
        return labels, dist


def assign(points: np.ndarray, centers: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if numba_enabled():
        return _assign_nb(np.ascontiguousarray(points, dtype=np.float64), np.ascontiguousarray(centers, dtype=np.float64))
    return assign_numpy(points.astype(np.float64), centers.astype(np.float64))


# ---------------------------------------------------------------------------
# binary morphology with a disk structuring element
# ---------------------------------------------------------------------------


def disk(radius: int) -> np.ndarray:
    yy, xx = np.mgrid[-radius : radius + 1, -radius : radius + 1]
    return (yy * yy + xx * xx) <= radius * radius


def _morph_numpy(mask: np.ndarray, radius: int, dilate: bool) -> np.ndarray:
    se = disk(radius)
    # outside the image counts as background for dilation, foreground for erosion
    padded = np.pad(mask.astype(bool), radius, mode="constant", constant_values=not dilate)
    win = sliding_window_view(padded, se.shape)
    if dilate:
        return np.any(win & se, axis=(-2, -1))
    return np.all(win | ~se, axis=(-2, -1))


if _HAVE_NUMBA:

    @numba.njit(cache=True)
    def _morph_nb(padded, se, h, w, dilate):
        kh, kw = se.shape
        out = np.zeros((h, w), dtype=np.bool_)
        for y in range(h):
            for x in range(w):
                if dilate:
                    hit = False
                    for i in range(kh):
                        for j in range(kw):
                            if se[i, j] and padded[y + i, x + j]:
                                hit = True
                    out[y, x] = hit
                else:
                    keep = True
                    for i in range(kh):
                        for j in range(kw):
                            if se[i, j] and not padded[y + i, x + j]:
                                keep = False
                    out[y, x] = keep
        return out


def _morph(mask: np.ndarray, radius: int, dilate: bool) -> np.ndarray:
    if radius <= 0:
        return mask.astype(bool)
    if numba_enabled():
        padded = np.pad(mask.astype(bool), radius, mode="constant", constant_values=not dilate)
        return _morph_nb(padded, disk(radius), mask.shape[0], mask.shape[1], dilate)
    return _morph_numpy(mask, radius, dilate)


def dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    return _morph(mask, radius, True)


def erode(mask: np.ndarray, radius: int) -> np.ndarray:
    return _morph(mask, radius, False)
