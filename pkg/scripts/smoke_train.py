"""Train the C=12 model for a few hundred steps on a synthetic cube and report the denoising gain.

    python scripts/smoke_train.py --workdir runs/smoke --steps 300
"""

import argparse

from ssrt.experiments import SMOKE_LR, band_generalization, smoke_experiment


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--workdir", default="runs/smoke")
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--lr0", type=float, default=SMOKE_LR)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--quiet", action="store_true")
    args = p.parse_args()
    res = smoke_experiment(args.workdir, args.steps, args.lr0, args.seed,
                           log=(lambda s: None) if args.quiet else print)
    print(res.to_text())
    for B, (shape_in, shape_out, finite) in band_generalization(res.result.weights).items():
        print(f"bands={B} in={shape_in} out={shape_out} finite={finite}")
    print(f"checkpoint={res.checkpoint}")


if __name__ == "__main__":
    main()
