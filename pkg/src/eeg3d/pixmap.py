"""Binary portable pixmap (P6, 8-bit) encode/decode."""

from __future__ import annotations

import os
import re
from pathlib import Path

import numpy as np

_HEADER = re.compile(rb"P6\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s")


# coarse palette shared by the deterministic mock providers
NAMED_COLORS = {
    "red": (200, 40, 40), "orange": (230, 130, 30), "yellow": (220, 210, 50), "green": (50, 170, 70),
    "teal": (40, 160, 160), "blue": (50, 80, 200), "purple": (130, 60, 180), "pink": (230, 120, 170),
    "brown": (120, 80, 40), "gray": (128, 128, 128), "black": (20, 20, 20), "white": (240, 240, 240),
}


class PixmapError(ValueError):
    pass


def encode_ppm(pixels: np.ndarray) -> bytes:
    """Serialize an (H, W, 3) uint8 array as P6 bytes."""
    arr = np.asarray(pixels)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.dtype != np.uint8:
        raise PixmapError(f"expected (H, W, 3) uint8, got {arr.shape} {arr.dtype}")
    h, w, _ = arr.shape
    return b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(arr).tobytes()


def decode_ppm(data: bytes) -> np.ndarray:
    m = _HEADER.match(data)
    if m is None:
        raise PixmapError("not a binary P6 pixmap")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise PixmapError(f"only 8-bit pixmaps are supported (maxval={maxval})")
    if w <= 0 or h <= 0:
        raise PixmapError(f"invalid dimensions {w}x{h}")
    payload = data[m.end():]
    need = w * h * 3
    if len(payload) < need:
        raise PixmapError(f"truncated pixmap: {len(payload)} of {need} bytes")
    return np.frombuffer(payload[:need], dtype=np.uint8).reshape(h, w, 3).copy()


def write_ppm(path: str | os.PathLike, pixels: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(pixels))


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


def to_unit_range(pixels: np.ndarray) -> np.ndarray:
    """uint8 [0, 255] -> float64 [-1, 1]."""
    return np.asarray(pixels, dtype=np.float64) / 127.5 - 1.0


def from_unit_range(x: np.ndarray) -> np.ndarray:
    """float [-1, 1] -> uint8, clamping out-of-range values."""
    v = np.rint((np.clip(x, -1.0, 1.0) + 1.0) * 127.5)
    return v.astype(np.uint8)


def resize_nearest(pixels: np.ndarray, height: int, width: int) -> np.ndarray:
    h, w = pixels.shape[:2]
    rows = (np.arange(height) * h) // height
    cols = (np.arange(width) * w) // width
    return pixels[rows][:, cols]


def resize_box(pixels: np.ndarray, height: int, width: int) -> np.ndarray:
    """Area-average downsample when sizes divide evenly; nearest otherwise."""
    h, w = pixels.shape[:2]
    if h % height == 0 and w % width == 0:
        fh, fw = h // height, w // width
        x = np.asarray(pixels, dtype=np.float64).reshape(height, fh, width, fw, -1)
        return x.mean(axis=(1, 3))
    return np.asarray(resize_nearest(pixels, height, width), dtype=np.float64)
