"""Attention heat-map overlays written as binary PPM."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .data import decode_tensor

# blue -> cyan -> yellow -> red
_STOPS = np.array([0.0, 1 / 3, 2 / 3, 1.0])
_COLORS = np.array([[0, 0, 255], [0, 255, 255], [255, 255, 0], [255, 0, 0]], dtype=np.float64)


def bilinear_resize(a: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Resize a 2-d array with pixel-centre aligned bilinear interpolation."""
    h, w = a.shape
    oh, ow = size

    def coords(n_in, n_out):
        x = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
        x = np.clip(x, 0, n_in - 1)
        lo = np.floor(x).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, x - lo

    y0, y1, fy = coords(h, oh)
    x0, x1, fx = coords(w, ow)
    # lerp form a + f*(b - a) keeps constant regions exactly constant
    top = a[y0][:, x0] + (a[y0][:, x1] - a[y0][:, x0]) * fx
    bottom = a[y1][:, x0] + (a[y1][:, x1] - a[y1][:, x0]) * fx
    return top + (bottom - top) * fy[:, None]


def normalize_to_255(a: np.ndarray) -> np.ndarray:
    """Min-max scale to integers in [0, 255]; a constant map becomes all zeros."""
    lo, hi = float(a.min()), float(a.max())
    if hi <= lo:
        return np.zeros(a.shape, dtype=np.uint8)
    return np.rint((a - lo) / (hi - lo) * 255.0).astype(np.uint8)


def colormap(levels: np.ndarray) -> np.ndarray:
    """Map uint8 levels to RGB (float, 0..255) with a 4-stop jet-like ramp."""
    t = levels.astype(np.float64) / 255.0
    return np.stack([np.interp(t, _STOPS, _COLORS[:, k]) for k in range(3)], axis=-1)


def overlay(image: np.ndarray, attention: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Blend the heat map of ``attention`` over a grayscale ``image`` in [0, 1].

    Returns an ``H x W x 3`` uint8 array.
    """
    h, w = image.shape
    heat = colormap(normalize_to_255(bilinear_resize(attention, (h, w))))
    gray = np.clip(image, 0.0, 1.0)[..., None] * 255.0
    return np.clip(np.rint(alpha * heat + (1 - alpha) * gray), 0, 255).astype(np.uint8)


def encode_ppm(rgb: np.ndarray) -> bytes:
    h, w, _ = rgb.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(rgb, dtype=np.uint8).tobytes()


def write_ppm(path: str | os.PathLike, rgb: np.ndarray) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_ppm(rgb))
    os.replace(tmp, path)


def load_image(path: str | os.PathLike) -> np.ndarray:
    """Grayscale image in [0, 1] from a MAFT tensor (H x W or 1 x H x W) or binary PGM."""
    blob = Path(path).read_bytes()
    if blob[:2] == b"P5":
        return _decode_pgm(blob)
    data = decode_tensor(blob).data
    if data.ndim == 3 and data.shape[0] == 1:
        data = data[0]
    if data.ndim != 2:
        raise ValueError(f"expected a single grayscale image, got shape {data.shape}")
    return data


def _decode_pgm(blob: bytes) -> np.ndarray:
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(blob[start:pos]))
    w, h, maxval = fields
    pos += 1
    if maxval > 255:
        raise ValueError("only 8-bit PGM is supported")
    pixels = np.frombuffer(blob, dtype=np.uint8, count=w * h, offset=pos)
    return pixels.reshape(h, w) / maxval
