"""Write synthetic train/val/test cubes plus a manifest, ready for ``ssrt train``.

    python scripts/make_synthetic.py data/synth --size 128 --bands 31
"""

import argparse
from pathlib import Path

from ssrt import io
from ssrt.data import synthetic_cube


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("out")
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--bands", type=int, default=31)
    p.add_argument("--train", type=int, default=4)
    p.add_argument("--val", type=int, default=1)
    p.add_argument("--test", type=int, default=1)
    p.add_argument("--noise", default="kind=gaussian sigma_max=55",
                   help="noise spec recorded for the val/test entries")
    args = p.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines, seed = [], 0
    for split, n in (("train", args.train), ("val", args.val), ("test", args.test)):
        for i in range(n):
            name = f"{split}{i:02d}.hsic"
            io.write_cube(out / name, synthetic_cube(args.size, args.size, args.bands, seed=seed))
            seed += 1
            lines.append(f"{split} {name}" + ("" if split == "train" else f" {args.noise}"))
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")
    print(out / "manifest.txt")


if __name__ == "__main__":
    main()
