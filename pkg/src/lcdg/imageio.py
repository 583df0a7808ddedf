"""Binary portable pixmaps (P5 grey, P6 RGB), 8-bit."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def to_uint8(x: np.ndarray, value_range: str = "signed") -> np.ndarray:
    """Map [-1, 1] (``signed``) or [0, 1] (``unit``) to 0..255 with rounding."""
    x = np.asarray(x, dtype=np.float64)
    u = (x + 1.0) / 2.0 if value_range == "signed" else x
    return np.clip(np.round(255.0 * u), 0, 255).astype(np.uint8)


def write_pnm(path: str | Path, image: np.ndarray, value_range: str = "signed") -> None:
    """Write a (1|3, H, W) or (H, W) array."""
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[None]
    c, h, w = img.shape
    if c not in (1, 3):
        raise ValueError(f"need 1 or 3 channels, got {c}")
    data = to_uint8(img, value_range)
    magic = b"P5" if c == 1 else b"P6"
    payload = data[0] if c == 1 else np.transpose(data, (1, 2, 0))
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(payload).tobytes())


def read_pnm(path: str | Path) -> np.ndarray:
    """Read P5/P6 into uint8 (C, H, W)."""
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255 or magic not in (b"P5", b"P6"):
        raise ValueError(f"unsupported pixmap {magic!r} maxval {maxval}")
    c = 1 if magic == b"P5" else 3
    arr = np.frombuffer(raw, dtype=np.uint8, count=w * h * c, offset=pos)
    if c == 1:
        return arr.reshape(1, h, w)
    return np.transpose(arr.reshape(h, w, 3), (2, 0, 1))


def contact_sheet(images: np.ndarray, cols: int = 8, pad: int = 1, fill: float = -1.0) -> np.ndarray:
    """Tile (N, C, H, W) images into one (C, H', W') sheet."""
    n, c, h, w = images.shape
    cols = max(1, min(cols, n))
    rows = -(-n // cols)
    sheet = np.full((c, rows * (h + pad) + pad, cols * (w + pad) + pad), fill, dtype=np.float32)
    for i in range(n):
        r, k = divmod(i, cols)
        y, x = pad + r * (h + pad), pad + k * (w + pad)
        sheet[:, y : y + h, x : x + w] = images[i]
    return sheet
