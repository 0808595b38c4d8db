"""Denoise synthetic cubes of several band counts with one checkpoint.

    python scripts/band_generalization.py runs/smoke/run/last.ssrtw --bands 8 31 46
"""

import argparse

from ssrt import io
from ssrt.data import synthetic_cube
from ssrt.metrics import evaluate
from ssrt.noise import add_gaussian_noniid
from ssrt.unet import denoise


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("weights")
    p.add_argument("--bands", type=int, nargs="+", default=[8, 31, 46])
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--sigma-max", type=float, default=55)
    args = p.parse_args()
    w = io.weights_from_checkpoint(io.load_checkpoint(args.weights))
    for B in args.bands:
        clean = synthetic_cube(args.size, args.size, B, seed=100 + B)
        noisy = add_gaussian_noniid(clean, args.sigma_max, seed=B)
        den = denoise(noisy, w)
        before, after = evaluate(clean, noisy), evaluate(clean, den)
        print(f"bands={B} shape={den.shape} psnr {before.psnr_db:.2f} -> {after.psnr_db:.2f} "
              f"sam {before.sam_rad:.4f} -> {after.sam_rad:.4f}")


if __name__ == "__main__":
    main()
