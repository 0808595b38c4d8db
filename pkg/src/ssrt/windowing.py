"""Window partitioning, cyclic shifts and the shifted-window attention mask.

Internally the SSRT block works on channels-last maps of shape
(..., H, W, C); windows come out as (..., N, M*M, C) with the window grid
in row-major order.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .tensor import Tensor


def mask_fill_value(dtype=None) -> float:
    dtype = np.dtype(dtype or T.default_dtype())
    return -1e15 if dtype == np.float64 else -1e9


def _check_divisible(H: int, W: int, M: int) -> None:
    if M < 1:
        raise ValueError(f"window size must be positive, got {M}")
    if H % M or W % M:
        raise ValueError(f"window size {M} does not divide spatial extents {H}x{W}")


def partition(x: Tensor, M: int) -> Tensor:
    """(L..., H, W, C) -> (L..., N, M*M, C)."""
    *lead, H, W, C = x.shape
    _check_divisible(H, W, M)
    gh, gw = H // M, W // M
    k = len(lead)
    y = T.reshape(x, (*lead, gh, M, gw, M, C))
    perm = tuple(range(k)) + (k, k + 2, k + 1, k + 3, k + 4)
    y = T.transpose(y, perm)
    return T.reshape(y, (*lead, gh * gw, M * M, C))


def reverse(w: Tensor, H: int, W: int) -> Tensor:
    """(L..., N, M*M, C) -> (L..., H, W, C); exact inverse of :func:`partition`."""
    *lead, N, P, C = w.shape
    M = int(round(P ** 0.5))
    if M * M != P:
        raise ValueError(f"window length {P} is not a perfect square")
    _check_divisible(H, W, M)
    gh, gw = H // M, W // M
    if gh * gw != N:
        raise ValueError(f"{N} windows inconsistent with a {gh}x{gw} grid")
    k = len(lead)
    y = T.reshape(w, (*lead, gh, gw, M, M, C))
    perm = tuple(range(k)) + (k, k + 2, k + 1, k + 3, k + 4)
    y = T.transpose(y, perm)
    return T.reshape(y, (*lead, H, W, C))


def cyclic_shift(x: Tensor, d: int) -> Tensor:
    """Roll both spatial axes of a (..., H, W, C) map by -d (use -d to undo)."""
    return T.roll2d(x, -d, axes=(-3, -2))


@lru_cache(maxsize=64)
def _shift_mask(H: int, W: int, M: int, d: int) -> np.ndarray:
    _check_divisible(H, W, M)
    labels = region_labels(H, W, M, d)
    win = labels.reshape(H // M, M, W // M, M).transpose(0, 2, 1, 3).reshape(-1, M * M)
    same = win[:, :, None] == win[:, None, :]
    mask = np.where(same, 0.0, 1.0)
    mask.setflags(write=False)
    return mask


def region_labels(H: int, W: int, M: int, d: int) -> np.ndarray:
    """Label of each pixel's pre-shift region, in shifted coordinates.

    Rows and columns are split at ``H - M`` and ``H - d`` (likewise W), the
    seams a cyclic roll by ``-d`` introduces inside the last window row/column.
    """
    labels = np.zeros((H, W), dtype=np.int64)
    if d == 0:
        return labels
    cnt = 0
    for hs in (slice(0, -M), slice(-M, -d), slice(-d, None)):
        for ws in (slice(0, -M), slice(-M, -d), slice(-d, None)):
            labels[hs, ws] = cnt
            cnt += 1
    return labels


def build_shift_mask(H: int, W: int, M: int, d: int, dtype=None) -> np.ndarray:
    """Additive (N, M*M, M*M) mask: 0 within a pre-shift region, large negative across."""
    if d == 0:
        _check_divisible(H, W, M)
        return np.zeros(((H // M) * (W // M), M * M, M * M), dtype=dtype or T.default_dtype())
    base = _shift_mask(H, W, M, d)
    return (base * mask_fill_value(dtype)).astype(dtype or T.default_dtype())


@dataclass
class WindowSet:
    """Windows of one C x H x W map: ``windows`` is (N, M*M, C)."""

    windows: np.ndarray
    grid: tuple
    window_size: int

    @property
    def count(self) -> int:
        return self.windows.shape[0]


def window_partition(x, M: int) -> WindowSet:
    """Partition a C x H x W map into M x M windows."""
    x = np.asarray(x)
    C, H, W = x.shape
    _check_divisible(H, W, M)
    hw = np.moveaxis(x, 0, -1).reshape(H // M, M, W // M, M, C)
    data = hw.transpose(0, 2, 1, 3, 4).reshape(-1, M * M, C)
    return WindowSet(np.ascontiguousarray(data), (H // M, W // M), M)


def window_reverse(ws: WindowSet) -> np.ndarray:
    gh, gw = ws.grid
    M = ws.window_size
    N, P, C = ws.windows.shape
    if N != gh * gw or P != M * M:
        raise ValueError(f"{N} windows of length {P} inconsistent with grid {ws.grid} and M={M}")
    y = ws.windows.reshape(gh, gw, M, M, C).transpose(0, 2, 1, 3, 4).reshape(gh * M, gw * M, C)
    return np.ascontiguousarray(np.moveaxis(y, -1, 0))
