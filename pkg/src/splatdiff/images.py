"""Image IO: 8-bit PNG for color, PFM for float depth, contact sheets."""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

__all__ = ["to_uint8", "save_png", "load_png", "save_pfm", "load_pfm",
           "contact_sheet"]


def to_uint8(img01: np.ndarray) -> np.ndarray:
    return (np.clip(img01, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def save_png(path, img01: np.ndarray) -> None:
    Image.fromarray(to_uint8(img01)).save(str(path), format="PNG")


def load_png(path) -> np.ndarray:
    with Image.open(str(path)) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def save_pfm(path, data: np.ndarray) -> None:
    """Color or grayscale float map, little-endian, top row first in memory.

    PFM stores rows bottom-up, so the array is flipped on write and unflipped
    on read; +inf passes through (sentinel depths survive a round trip).
    """
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        header = b"Pf\n"
    elif data.ndim == 3 and data.shape[2] == 3:
        header = b"PF\n"
    else:
        raise ValueError(f"PFM wants (H,W) or (H,W,3), got {data.shape}")
    h, w = data.shape[:2]
    with open(str(path), "wb") as f:
        f.write(header)
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")          # negative scale = little-endian
        f.write(np.flipud(data).astype("<f4").tobytes())


def load_pfm(path) -> np.ndarray:
    with open(str(path), "rb") as f:
        kind = f.readline().strip()
        if kind not in (b"PF", b"Pf"):
            raise ValueError(f"not a PFM file: magic {kind!r}")
        w, h = map(int, f.readline().split())
        scale = float(f.readline())
        count = w * h * (3 if kind == b"PF" else 1)
        raw = f.read(count * 4)
        if len(raw) != count * 4:
            raise ValueError("truncated PFM payload")
    dt = "<f4" if scale < 0 else ">f4"
    arr = np.frombuffer(raw, dtype=dt).astype(np.float64)
    shape = (h, w, 3) if kind == b"PF" else (h, w)
    return np.flipud(arr.reshape(shape)).copy()


def contact_sheet(rows: list[list[np.ndarray]], pad: int = 2,
                  pad_value: float = 1.0) -> np.ndarray:
    """Tile a ragged grid of [0,1] images into one image (row-major)."""
    if not rows or not rows[0]:
        raise ValueError("contact_sheet needs at least one image")
    ncol = max(len(r) for r in rows)
    h = max(img.shape[0] for r in rows for img in r)
    w = max(img.shape[1] for r in rows for img in r)
    H = len(rows) * (h + pad) + pad
    W = ncol * (w + pad) + pad
    sheet = np.full((H, W, 3), pad_value)
    for i, r in enumerate(rows):
        for j, img in enumerate(r):
            if img.ndim == 2:
                img = np.repeat(img[:, :, None], 3, axis=2)
            y = pad + i * (h + pad)
            x = pad + j * (w + pad)
            sheet[y:y + img.shape[0], x:x + img.shape[1]] = np.clip(img, 0, 1)
    return sheet
