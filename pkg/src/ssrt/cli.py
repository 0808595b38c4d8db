"""Command-line entry point: ``ssrt {train,denoise,noise,eval,gradcheck}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import io
from .metrics import evaluate
from .noise import NoiseSpec, apply_noise

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _cmd_train(args) -> int:
    from .train import TrainConfig, train
    from .unet import UnetConfig

    raw = json.loads(Path(args.config).read_text()) if args.config else {}
    ucfg = UnetConfig(**raw.pop("unet", {}))
    cfg = TrainConfig.from_json(json.dumps(raw))
    manifest = io.load_manifest(args.manifest)
    res = train(manifest, cfg, ucfg, args.out, init_from=args.init_from,
                resume_from=args.resume, max_steps=args.max_steps)
    print(f"checkpoint={res.checkpoint}")
    return EXIT_OK


def _cmd_denoise(args) -> int:
    from .unet import denoise

    w = io.weights_from_checkpoint(io.load_checkpoint(args.weights))
    cube = io.read_cube(args.input)
    io.write_cube(args.output, denoise(cube, w))
    return EXIT_OK


def _cmd_noise(args) -> int:
    text = Path(args.spec).read_text() if Path(args.spec).is_file() else args.spec
    spec = NoiseSpec.from_text(text)
    if args.seed is not None:
        spec = spec.with_seed(args.seed)
    io.write_cube(args.output, apply_noise(io.read_cube(args.input), spec))
    return EXIT_OK


def _cmd_eval(args) -> int:
    ref, test = io.read_cube(args.ref), io.read_cube(args.test)
    if ref.shape != test.shape:
        raise io.DataError(f"reference {ref.shape} and test {test.shape} cubes differ in shape")
    report = evaluate(ref, test)
    sys.stdout.write(report.to_text())
    if args.json:
        Path(args.json).write_text(report.to_json())
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    from . import gradsuite

    worst = 0.0
    for bits in args.precision:
        res = gradsuite.run_all(bits, seed=args.seed)
        for name, err in res.items():
            print(f"precision={bits} check={name} max_rel_err={err:.3e}")
        top = max(res.values())
        ok = top < gradsuite.THRESHOLD[bits]
        print(f"precision={bits} max_rel_err={top:.3e} threshold={gradsuite.THRESHOLD[bits]:.0e} "
              f"status={'pass' if ok else 'FAIL'}")
        worst = max(worst, 0.0 if ok else 1.0)
    return EXIT_OK if worst == 0.0 else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ssrt", description="SSRT-UNet hyperspectral denoiser")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train from a manifest")
    t.add_argument("--manifest", required=True)
    t.add_argument("--config", help="JSON training config; an optional 'unet' object sets the model")
    t.add_argument("--out", default="runs/latest")
    t.add_argument("--init-from", help="start from these weights with a fresh optimizer")
    t.add_argument("--resume", help="continue a run from its checkpoint")
    t.add_argument("--max-steps", type=int)
    t.set_defaults(fn=_cmd_train)

    d = sub.add_parser("denoise", help="denoise one cube")
    d.add_argument("--input", required=True)
    d.add_argument("--weights", required=True)
    d.add_argument("--output", required=True)
    d.set_defaults(fn=_cmd_denoise)

    n = sub.add_parser("noise", help="synthesize a noisy cube")
    n.add_argument("--input", required=True)
    n.add_argument("--spec", required=True, help="key=value text or a file holding it")
    n.add_argument("--seed", type=int)
    n.add_argument("--output", required=True)
    n.set_defaults(fn=_cmd_noise)

    e = sub.add_parser("eval", help="PSNR / SSIM / SAM of a test cube against a reference")
    e.add_argument("--ref", required=True)
    e.add_argument("--test", required=True)
    e.add_argument("--json", help="also write the report as JSON here")
    e.set_defaults(fn=_cmd_eval)

    g = sub.add_parser("gradcheck", help="run the finite-difference gradient suites")
    g.add_argument("--precision", type=int, nargs="+", choices=(32, 64), default=[64, 32])
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(fn=_cmd_gradcheck)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    try:
        return args.fn(args)
    except (io.DataError, OSError, json.JSONDecodeError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"invalid input: {e}", file=sys.stderr)
        return EXIT_DATA
    except np.linalg.LinAlgError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
