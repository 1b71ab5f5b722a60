"""2D resampling used for position-embedding grids and image preprocessing.

Both filters use the half-pixel alignment convention
(``src = (dst + 0.5) * src_size / dst_size - 0.5``) and clamp sample
positions at the borders.  The bicubic kernel is Catmull-Rom (a = -0.5),
which is interpolating: an identity-size resize reproduces the input
exactly and a constant grid stays constant.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError

_A = -0.5  # Catmull-Rom


def _cubic_weight(t: np.ndarray) -> np.ndarray:
    t = np.abs(t)
    w = np.zeros_like(t)
    near = t <= 1.0
    far = (t > 1.0) & (t < 2.0)
    w[near] = (_A + 2.0) * t[near] ** 3 - (_A + 3.0) * t[near] ** 2 + 1.0
    w[far] = _A * t[far] ** 3 - 5.0 * _A * t[far] ** 2 + 8.0 * _A * t[far] - 4.0 * _A
    return w


def _axis_weights(src_size: int, dst_size: int, taps: int):
    """Sample indices and weights for one axis.

    Returns (idx, w) with shapes [dst_size, taps]; idx is clamped to the
    valid range so border samples are repeated.
    """
    scale = src_size / dst_size
    src = (np.arange(dst_size, dtype=np.float64) + 0.5) * scale - 0.5
    base = np.floor(src).astype(np.int64)
    frac = src - base
    if taps == 4:
        offsets = np.arange(-1, 3)
        w = _cubic_weight(frac[:, None] - offsets[None, :])
    elif taps == 2:
        offsets = np.arange(0, 2)
        d = np.abs(frac[:, None] - offsets[None, :])
        w = 1.0 - d
    else:
        raise ValueError(f"unsupported tap count {taps}")
    idx = np.clip(base[:, None] + offsets[None, :], 0, src_size - 1)
    return idx, w


def _resize_separable(grid: np.ndarray, new_h: int, new_w: int, taps: int) -> np.ndarray:
    if new_h < 1 or new_w < 1:
        raise ContractError(f"target size must be >= 1, got {new_h}x{new_w}")
    if grid.ndim == 2:
        return _resize_separable(grid[:, :, None], new_h, new_w, taps)[:, :, 0]
    if grid.ndim != 3:
        raise ContractError(f"expected a HxW or HxWxC grid, got ndim={grid.ndim}")
    h, w = grid.shape[:2]
    if taps == 4 and (h < 2 or w < 2):
        raise ContractError(f"source grid must be at least 2x2, got {h}x{w}")
    data = grid.astype(np.float64, copy=False)

    ridx, rw = _axis_weights(h, new_h, taps)
    # rows: out[i] = sum_k rw[i,k] * data[ridx[i,k]]
    rows = np.einsum("ik,ikwc->iwc", rw, data[ridx])
    cidx, cw = _axis_weights(w, new_w, taps)
    out = np.einsum("jk,ijkc->ijc", cw, rows[:, cidx])
    return out


def bicubic_resize_2d(grid: np.ndarray, new_h: int, new_w: int) -> np.ndarray:
    """Resize a [H, W] or [H, W, C] grid with the Catmull-Rom bicubic kernel.

    Channels are resized independently; output is float64.
    """
    return _resize_separable(np.asarray(grid), new_h, new_w, taps=4)


def bilinear_resize_2d(grid: np.ndarray, new_h: int, new_w: int) -> np.ndarray:
    """Resize a [H, W] or [H, W, C] grid with bilinear filtering."""
    return _resize_separable(np.asarray(grid), new_h, new_w, taps=2)
