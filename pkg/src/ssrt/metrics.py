"""PSNR, SSIM and SAM for B x H x W cubes.

All three are evaluated in 64-bit regardless of the input dtype.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PSNR_CAP_DB = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
K1, K2 = 0.01, 0.03


def _pair(x, y) -> tuple:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    if x.ndim == 2:
        x, y = x[None], y[None]
    if x.ndim != 3:
        raise ValueError(f"expected a B x H x W cube, got shape {x.shape}")
    return x, y


def psnr(x, y, peak: float = 1.0) -> float:
    """Whole-cube PSNR in dB, capped at 100 dB for identical inputs."""
    x, y = _pair(x, y)
    mse = np.mean((x - y) ** 2)
    if mse == 0:
        return PSNR_CAP_DB
    return float(min(PSNR_CAP_DB, 10.0 * np.log10(peak * peak / mse)))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r * r) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable valid-mode filter over the last two axes
    n = g.size
    out = sliding_window_view(img, n, axis=-1) @ g
    return sliding_window_view(out, n, axis=-2) @ g


def _ssim_global(x: np.ndarray, y: np.ndarray, c1: float, c2: float) -> np.ndarray:
    axes = (-2, -1)
    mx, my = x.mean(axis=axes), y.mean(axis=axes)
    vx = ((x - mx[:, None, None]) ** 2).mean(axis=axes)
    vy = ((y - my[:, None, None]) ** 2).mean(axis=axes)
    cxy = ((x - mx[:, None, None]) * (y - my[:, None, None])).mean(axis=axes)
    return ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))


def ssim_with_flag(x, y, peak: float = 1.0) -> tuple:
    """(band-averaged SSIM, fallback flag).

    Cubes smaller than the 11 x 11 window use whole-band statistics and
    set the flag.
    """
    x, y = _pair(x, y)
    c1, c2 = (K1 * peak) ** 2, (K2 * peak) ** 2
    if min(x.shape[-2:]) < SSIM_WINDOW:
        return float(np.mean(_ssim_global(x, y, c1, c2))), True
    g = gaussian_window()
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    smap = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    per_band = smap.mean(axis=(-2, -1))
    return float(per_band.mean()), False


def ssim(x, y, peak: float = 1.0) -> float:
    return ssim_with_flag(x, y, peak)[0]


def sam_with_count(x, y) -> tuple:
    """(mean spectral angle in radians, number of excluded zero-norm pixels).

    The angle is taken as 2·atan2(|u - v|, |u + v|) on unit spectra, which
    stays accurate near 0 and π where arccos does not.
    """
    x, y = _pair(x, y)
    B = x.shape[0]
    u = x.reshape(B, -1)
    v = y.reshape(B, -1)
    nu, nv = np.linalg.norm(u, axis=0), np.linalg.norm(v, axis=0)
    ok = (nu > 0) & (nv > 0)
    excluded = int(ok.size - ok.sum())
    if not ok.any():
        raise ValueError("spectral angle undefined: every pixel has a zero-norm spectrum")
    u = u[:, ok] / nu[ok]
    v = v[:, ok] / nv[ok]
    ang = 2.0 * np.arctan2(np.linalg.norm(u - v, axis=0), np.linalg.norm(u + v, axis=0))
    return float(ang.mean()), excluded


def sam(x, y) -> float:
    return sam_with_count(x, y)[0]


@dataclass(frozen=True)
class MetricsReport:
    psnr_db: float
    ssim: float
    sam_rad: float
    ssim_fallback: bool = False
    sam_excluded: int = 0

    def to_text(self) -> str:
        return (f"psnr_db={self.psnr_db:.2f}\nssim={self.ssim:.6f}\nsam_rad={self.sam_rad:.6f}\n"
                f"ssim_fallback={int(self.ssim_fallback)}\nsam_excluded={self.sam_excluded}\n")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def evaluate(ref, test, peak: float = 1.0) -> MetricsReport:
    s, flag = ssim_with_flag(ref, test, peak)
    a, excluded = sam_with_count(ref, test)
    return MetricsReport(psnr(ref, test, peak), s, a, flag, excluded)
