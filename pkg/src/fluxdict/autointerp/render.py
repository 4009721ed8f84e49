from __future__ import annotations

import base64
import io

import numpy as np
from PIL import Image

BLEND = 0.6
TINT = np.array([0.0, 0.0, 255.0])


def render_overlay(image: np.ndarray, grid: np.ndarray, grid_shape=None) -> np.ndarray:
    """Paint per-patch activations in blue over an RGB uint8 image.

    Each pixel maps to its nearest patch; blend weight is
    ``0.6 * act / max(grid)``. Negative activations count as zero.
    """
    image = np.asarray(image)
    grid = np.asarray(grid, dtype=np.float64)
    if grid_shape is not None:
        grid = grid.reshape(grid_shape)
    grid = np.maximum(grid, 0.0)
    peak = grid.max() if grid.size else 0.0
    if peak <= 0:
        return image.copy()
    h, w = image.shape[:2]
    gh, gw = grid.shape
    rows = (np.arange(h) * gh) // h
    cols = (np.arange(w) * gw) // w
    alpha = BLEND * grid[np.ix_(rows, cols)] / peak
    out = (1.0 - alpha[..., None]) * image.astype(np.float64) + alpha[..., None] * TINT
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def encode_png(image: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(buf, format="PNG")
    return buf.getvalue()


def png_data_url(png: bytes) -> str:
    return "data:image/png;base64," + base64.b64encode(png).decode("ascii")
