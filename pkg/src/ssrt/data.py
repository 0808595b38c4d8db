"""Procedural hyperspectral cubes: smooth endmember spectra mixed by textured abundance maps."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter


def _endmembers(rng: np.random.Generator, n: int, B: int) -> np.ndarray:
    """n smooth reflectance spectra over B bands, each a sum of Gaussian bumps plus a slope."""
    lam = np.linspace(0.0, 1.0, B)
    spectra = np.empty((n, B))
    for i in range(n):
        s = rng.uniform(0.1, 0.4) + rng.uniform(-0.2, 0.2) * lam
        for _ in range(rng.integers(2, 5)):
            c, w, a = rng.uniform(-0.1, 1.1), rng.uniform(0.08, 0.3), rng.uniform(-0.25, 0.45)
            s = s + a * np.exp(-((lam - c) ** 2) / (2 * w * w))
        spectra[i] = s
    return spectra


def _abundances(rng: np.random.Generator, n: int, H: int, W: int) -> np.ndarray:
    """Softmax of smoothed random fields with a few sharp regions mixed in."""
    fields = []
    yy, xx = np.mgrid[0:H, 0:W] / max(H, W)
    for _ in range(n):
        f = gaussian_filter(rng.standard_normal((H, W)), sigma=rng.uniform(3, 10), mode="wrap")
        f /= f.std() + 1e-12
        # oriented texture
        k = rng.uniform(8, 30)
        theta = rng.uniform(0, np.pi)
        f += 0.5 * np.sin(2 * np.pi * k * (np.cos(theta) * xx + np.sin(theta) * yy))
        # a hard-edged blob
        cy, cx, r = rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0.08, 0.25)
        f += 2.0 * (((yy - cy) ** 2 + (xx - cx) ** 2) < r * r)
        fields.append(3.0 * f)
    a = np.exp(np.stack(fields) - np.max(fields, axis=0))
    return a / a.sum(axis=0)


def synthetic_cube(H: int = 128, W: int = 128, B: int = 31, seed: int = 0,
                   n_materials: int = 5, dtype=np.float32) -> np.ndarray:
    """B x H x W cube with values in [0, 1]."""
    rng = np.random.default_rng(seed)
    spectra = _endmembers(rng, n_materials, B)
    ab = _abundances(rng, n_materials, H, W)
    cube = np.einsum("nb,nhw->bhw", spectra, ab)
    # mild shading so the spectral angle is not the only cue
    shade = 0.8 + 0.2 * gaussian_filter(rng.random((H, W)), sigma=6, mode="wrap") / 0.5
    cube *= shade
    cube -= cube.min()
    cube /= cube.max() + 1e-12
    return (0.05 + 0.9 * cube).astype(dtype)
