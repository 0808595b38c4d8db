"""Synthetic degradations: non-i.i.d. Gaussian and mixture noise.

Noise levels are given on the 8-bit scale (15, 55, 95) and applied to
reflectance in [0, 1] as sigma/255. Outputs are never clipped.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, fields

import numpy as np

from . import rng as R


@dataclass(frozen=True)
class NoiseSpec:
    kind: str = "gaussian"
    sigma_max: float = 55.0
    impulse_band_fraction: float = 1 / 3
    impulse_intensity: tuple = (0.10, 0.70)
    stripe_band_fraction: float = 1 / 3
    stripe_column_fraction: tuple = (0.05, 0.15)
    stripe_amplitude: float = 0.25
    deadline_band_fraction: float = 1 / 3
    deadline_column_fraction: tuple = (0.05, 0.15)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("gaussian", "mixture"):
            raise ValueError(f"noise kind must be 'gaussian' or 'mixture', got {self.kind!r}")
        if self.sigma_max < 0:
            raise ValueError(f"sigma_max must be non-negative, got {self.sigma_max}")
        for name in ("impulse_band_fraction", "stripe_band_fraction", "deadline_band_fraction"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        for name in ("impulse_intensity", "stripe_column_fraction", "deadline_column_fraction"):
            lo, hi = getattr(self, name)
            if not 0 <= lo <= hi <= 1:
                raise ValueError(f"{name} must be a range inside [0, 1], got {(lo, hi)}")

    @classmethod
    def mixture(cls, seed: int = 0, **kw) -> "NoiseSpec":
        return cls(kind="mixture", sigma_max=kw.pop("sigma_max", 95.0), seed=seed, **kw)

    def with_seed(self, seed: int) -> "NoiseSpec":
        return _replace(self, seed=int(seed))

    def to_text(self) -> str:
        """Flat ``key=value`` block, one pair per line."""
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(float(x)) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "NoiseSpec":
        """Parse ``key=value`` pairs separated by newlines, spaces or semicolons."""
        kinds = {f.name: f.type for f in fields(cls)}
        values = {}
        for token in text.replace(";", "\n").split():
            if "=" not in token:
                raise ValueError(f"malformed noise spec entry {token!r}")
            key, raw = token.split("=", 1)
            if key not in kinds:
                raise ValueError(f"unknown noise spec key {key!r}")
            values[key] = _parse_value(key, raw)
        return cls(**values)


def _parse_value(key: str, raw: str):
    if key == "kind":
        return raw
    if key == "seed":
        return int(raw)
    if key in ("impulse_intensity", "stripe_column_fraction", "deadline_column_fraction"):
        parts = [float(x) for x in raw.split(",")]
        if len(parts) != 2:
            raise ValueError(f"{key} needs two comma-separated bounds, got {raw!r}")
        return tuple(parts)
    return float(raw)


def _replace(spec: NoiseSpec, **changes) -> NoiseSpec:
    vals = {f.name: getattr(spec, f.name) for f in fields(spec)}
    vals.update(changes)
    return NoiseSpec(**vals)


def band_sigmas(B: int, sigma_max: float, seed: int) -> np.ndarray:
    """Per-band standard deviations on the [0, 1] scale."""
    return np.array([R.generator(seed, R.SIGMA, b).uniform(0.0, sigma_max) for b in range(B)]) / 255.0


def add_gaussian_noniid(x: np.ndarray, sigma_max: float, seed: int) -> np.ndarray:
    """Add zero-mean Gaussian noise whose std is drawn per band from [0, sigma_max]/255."""
    x = np.asarray(x)
    B, H, W = x.shape
    sig = band_sigmas(B, sigma_max, seed)
    y = x.astype(np.float64, copy=True)
    for b in range(B):
        y[b] += R.generator(seed, R.GAUSSIAN, b).standard_normal((H, W)) * sig[b]
    return y.astype(x.dtype) if np.issubdtype(x.dtype, np.floating) else y


def affected_band_count(B: int, fraction: float) -> int:
    # guard against 1/3 * 30 = 10.000000000000002
    return int(math.ceil(round(fraction * B, 9)))


@dataclass
class MixturePlan:
    impulse: dict        # band -> (density, salt mask, pepper mask)
    stripes: dict        # band -> (columns, offsets)
    deadlines: dict      # band -> columns


def _pick_bands(B: int, fraction: float, seed: int, kind: int) -> np.ndarray:
    n = affected_band_count(B, fraction)
    if n == 0:
        return np.array([], dtype=np.int64)
    return np.sort(R.generator(seed, kind).choice(B, size=min(n, B), replace=False))


def _pick_columns(g: np.random.Generator, W: int, frac_range: tuple) -> np.ndarray:
    frac = g.uniform(*frac_range)
    n = min(W, max(1, int(round(frac * W))))
    return np.sort(g.choice(W, size=n, replace=False))


def mixture_plan(shape: tuple, spec: NoiseSpec) -> MixturePlan:
    """Which bands, pixels and columns each corruption touches."""
    B, H, W = shape
    if B < 3 and any(f > 0 for f in (spec.impulse_band_fraction, spec.stripe_band_fraction,
                                     spec.deadline_band_fraction)):
        warnings.warn(f"only {B} bands: corruption fractions round up to at least one band each",
                      stacklevel=3)
    impulse = {}
    for b in _pick_bands(B, spec.impulse_band_fraction, spec.seed, R.IMPULSE_BANDS):
        g = R.generator(spec.seed, R.IMPULSE, int(b))
        density = g.uniform(*spec.impulse_intensity)
        hit = g.random((H, W)) < density
        salt = g.random((H, W)) < 0.5
        impulse[int(b)] = (density, hit & salt, hit & ~salt)
    stripes = {}
    for b in _pick_bands(B, spec.stripe_band_fraction, spec.seed, R.STRIPE_BANDS):
        g = R.generator(spec.seed, R.STRIPE, int(b))
        cols = _pick_columns(g, W, spec.stripe_column_fraction)
        stripes[int(b)] = (cols, g.uniform(-spec.stripe_amplitude, spec.stripe_amplitude, size=cols.size))
    deadlines = {}
    for b in _pick_bands(B, spec.deadline_band_fraction, spec.seed, R.DEADLINE_BANDS):
        g = R.generator(spec.seed, R.DEADLINE, int(b))
        deadlines[int(b)] = _pick_columns(g, W, spec.deadline_column_fraction)
    return MixturePlan(impulse, stripes, deadlines)


def add_mixture(x: np.ndarray, spec: NoiseSpec) -> np.ndarray:
    """Gaussian on every band, then impulse, stripes and deadlines on drawn band subsets."""
    x = np.asarray(x)
    y = add_gaussian_noniid(x, spec.sigma_max, spec.seed).astype(np.float64)
    plan = mixture_plan(x.shape, spec)
    for b, (_, salt, pepper) in plan.impulse.items():
        y[b][salt] = 1.0
        y[b][pepper] = 0.0
    for b, (cols, offsets) in plan.stripes.items():
        y[b][:, cols] += offsets
    # deadlines last so they stay exactly zero
    for b, cols in plan.deadlines.items():
        y[b][:, cols] = 0.0
    return y.astype(x.dtype) if np.issubdtype(x.dtype, np.floating) else y


def apply_noise(x: np.ndarray, spec: NoiseSpec) -> np.ndarray:
    if spec.kind == "gaussian":
        return add_gaussian_noniid(x, spec.sigma_max, spec.seed)
    return add_mixture(x, spec)
