"""Desk-scale experiments shared by ``scripts/`` and the acceptance suite."""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import io
from .data import synthetic_cube
from .metrics import psnr, sam
from .noise import add_gaussian_noniid
from .train import TrainConfig, TrainResult, train
from .unet import UnetConfig, UnetWeights, denoise

# 300 single-patch steps at the default 1e-4 barely move the output; 3e-4
# keeps the same decay shape and converges without spikes
SMOKE_LR = 3e-4


@dataclass
class SmokeResult:
    psnr_in: float
    psnr_out: float
    sam_in: float
    sam_out: float
    seconds: float
    checkpoint: Path
    result: TrainResult

    @property
    def gain_db(self) -> float:
        return self.psnr_out - self.psnr_in

    def to_text(self) -> str:
        return (f"psnr_in={self.psnr_in:.2f} psnr_out={self.psnr_out:.2f} gain_db={self.gain_db:.2f} "
                f"sam_in={self.sam_in:.4f} sam_out={self.sam_out:.4f} sec={self.seconds:.0f}")


def smoke_config(steps: int = 300, lr0: float = SMOKE_LR, seed: int = 0) -> TrainConfig:
    """15 epochs of steps//15 single 32x32x31 patches, sigma drawn in [0, 55]."""
    return TrainConfig(lr0=lr0, patch=(32, 32, 31), batch=1, epochs=15,
                       steps_per_epoch=max(1, steps // 15), seed=seed,
                       noise="kind=gaussian sigma_max=55")


def smoke_experiment(workdir, steps: int = 300, lr0: float = SMOKE_LR, seed: int = 0,
                     log=lambda s: None) -> SmokeResult:
    """Train C=12 on one synthetic 128x128x31 cube, score on a held-out one."""
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    io.write_cube(workdir / "train.hsic", synthetic_cube(seed=1))
    io.write_cube(workdir / "test.hsic", synthetic_cube(seed=2))
    manifest = io.parse_manifest("train train.hsic\n", workdir)
    res = train(manifest, smoke_config(steps, lr0, seed), UnetConfig(), workdir / "run",
                max_steps=steps, log=log)
    clean = io.read_cube(workdir / "test.hsic")
    noisy = add_gaussian_noniid(clean, 55, seed=123)
    out = denoise(noisy, res.weights)
    return SmokeResult(psnr(clean, noisy), psnr(clean, out), sam(clean, noisy), sam(clean, out),
                       time.perf_counter() - t0, res.checkpoint, res)


def band_generalization(weights: UnetWeights, bands=(8, 46), size: int = 64, seed: int = 5) -> dict:
    """Denoise cubes whose band count differs from training; returns B -> (in_shape, out_shape, finite)."""
    out = {}
    for B in bands:
        noisy = add_gaussian_noniid(synthetic_cube(size, size, B, seed=seed + B), 30, seed=B)
        den = denoise(noisy, weights)
        out[B] = (noisy.shape, den.shape, bool(np.isfinite(den).all()))
    return out
