"""PNG emission for visual inspection (8-bit, linear [0, 1] mapping)."""

from __future__ import annotations

import numpy as np
from PIL import Image


def _to_u8(values: np.ndarray, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    span = hi - lo if hi > lo else 1.0
    scaled = np.clip((values - lo) / span, 0.0, 1.0)
    return (scaled * 255.0 + 0.5).astype(np.uint8)


def save_gray_png(path, values: np.ndarray, lo: float = 0.0,
                  hi: float = 1.0) -> None:
    Image.fromarray(_to_u8(values, lo, hi), mode="L").save(path)


def save_rgb_png(path, values: np.ndarray, lo: float = 0.0,
                 hi: float = 1.0) -> None:
    if values.ndim != 3 or values.shape[2] != 3:
        raise ValueError("expected an (H, W, 3) array")
    Image.fromarray(_to_u8(values, lo, hi), mode="RGB").save(path)


def save_heatmap_png(path, scores: np.ndarray) -> None:
    """Red-intensity heatmap of a 2D score slice; -inf renders black."""
    finite = np.isfinite(scores)
    if finite.any():
        lo, hi = float(scores[finite].min()), float(scores[finite].max())
    else:
        lo, hi = 0.0, 1.0
    norm = np.where(finite, scores, lo)
    red = _to_u8(norm, lo, hi if hi > lo else lo + 1.0)
    rgb = np.zeros(scores.shape + (3,), dtype=np.uint8)
    rgb[..., 0] = np.where(finite, red, 0)
    Image.fromarray(rgb, mode="RGB").save(path)
