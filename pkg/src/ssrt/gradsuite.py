"""Finite-difference verification of every differentiable piece.

Each check builds a scalar ``sum(out * r)`` with ``r`` a fixed random
tensor, so no coordinate of the output is weighted trivially, and runs
``grad_check`` over the inputs (and, for the composite models, a sampled
subset of parameters).
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from . import windowing as win
from .attention import relative_position_index
from .block import BidirectionalBlock
from .tensor import Tensor
from .train import loss_mse
from .unet import UnetConfig, UnetWeights, downsample, unet_forward, upsample

THRESHOLD = {32: 1e-3, 64: 1e-6}
# 32-bit needs a wide step to rise above rounding noise; 64-bit a narrow one
# to keep truncation error small
EPS = {32: 1e-2, 64: 1e-6}


def _dtype(bits: int):
    if bits not in THRESHOLD:
        raise ValueError(f"precision must be 32 or 64, got {bits}")
    return np.float32 if bits == 32 else np.float64


def _weighted(fn: Callable, shape_probe, rng) -> Callable:
    """Wrap ``fn`` so it returns sum(fn(...) * r) for a fixed r."""
    out = fn(*shape_probe)
    r = Tensor(rng.standard_normal(out.shape))
    return lambda *xs: T.sum_all(fn(*xs) * r)


def _check(fn, inputs, bits, max_coords=None, seed=0) -> float:
    rng = np.random.default_rng(seed + 1)
    with T.no_grad():
        g = _weighted(fn, inputs, rng)
    return T.grad_check(g, list(inputs), eps=EPS[bits], max_coords=max_coords, seed=seed)


def _away_from_zero(rng, shape, lo=0.1):
    # keep kinked activations off their kink by more than eps
    x = rng.uniform(lo, 1.5, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def primitive_checks(bits: int = 64, seed: int = 0) -> dict:
    """name -> max relative error for each primitive."""
    rng = np.random.default_rng(seed)
    out = {}
    with T.precision(_dtype(bits)):
        def P(shape, away=False):
            return Tensor(_away_from_zero(rng, shape) if away else rng.standard_normal(shape))

        M = 2
        P2 = M * M
        table = Tensor(rng.standard_normal((2 * M - 1) ** 2) * 0.1)
        mask = win.build_shift_mask(4, 4, M, 1)
        cases = {
            "add": (lambda a, b: a + b, [P((3, 4)), P((4,))]),
            "mul": (lambda a, b: a * b, [P((3, 4)), P((3, 1))]),
            "sub": (lambda a, b: a - b, [P((2, 3)), P((2, 3))]),
            "tanh": (T.tanh, [P((5, 3))]),
            "relu": (T.relu, [P((5, 3), away=True)]),
            "tanh_relu": (T.tanh_relu, [P((5, 3), away=True)]),
            "gelu": (T.gelu, [P((5, 3))]),
            "matmul": (T.matmul, [P((2, 3, 4)), P((4, 5))]),
            "linear": (T.linear, [P((2, 3, 4)), P((4, 5)), P((5,))]),
            "softmax_rows": (T.softmax_rows, [P((3, 5))]),
            "reshape_transpose": (lambda x: T.transpose(T.reshape(x, (3, 2, 4)), (2, 0, 1)), [P((6, 4))]),
            "getitem": (lambda x: T.getitem(x, (slice(1, 3), np.array([0, 2, 2]))), [P((4, 3))]),
            "concat": (lambda a, b: T.concat([a, b], axis=-1), [P((2, 3)), P((2, 2))]),
            "stack_unbind": (lambda x: T.stack([u * (i + 1.0) for i, u in enumerate(T.unbind(x, 1))], 0),
                             [P((2, 3, 2))]),
            "roll2d": (lambda x: T.roll2d(x, 1, axes=(0, 1)), [P((4, 4, 2))]),
            "window_attention": (
                lambda q, k, v, t: T.window_attention(q, k, v, t, relative_position_index(M), mask),
                [P((8, P2, 3)), P((8, P2, 3)), P((8, P2, 3)), table]),
            "conv3d": (T.conv3d_bnhwc, [P((3, 2, 4, 4, 2)), P((3, 2, 3, 3, 3)) * 0.3, P((3,))]),
            "conv3d_1x3x3": (T.conv3d_bnhwc, [P((2, 1, 4, 4, 2)), P((2, 2, 1, 3, 3))]),
            "upsample_nearest2": (lambda x: T.upsample_nearest2(x, axes=(2, 3)), [P((2, 1, 2, 3, 2))]),
            "downsample": (downsample, [P((2, 1, 4, 4, 3)), P((3, 3, 2, 2))]),
            "upsample": (upsample, [P((2, 1, 2, 2, 3)), P((3, 3, 1, 3, 3))]),
            "loss_mse": (loss_mse, [P((2, 3, 4, 4)), P((2, 3, 4, 4))]),
        }
        for name, (fn, inputs) in cases.items():
            inputs = [t if isinstance(t, Tensor) and t._parents == () else Tensor(t.data) for t in inputs]
            out[name] = _check(fn, inputs, bits, seed=seed)
    return out


def block_check(bits: int = 64, seed: int = 0, max_coords: int = 24) -> float:
    """One bidirectional shifted SSRT block at C=4, B=3, H=W=8, M=4."""
    rng = np.random.default_rng(seed)
    with T.precision(_dtype(bits)):
        blk = BidirectionalBlock.init(4, 4, rng, shifted=True)
        # move bias tables off zero so their gradients are exercised
        for t in blk.tensors().values():
            if t.ndim == 1 and t.size == 49:
                t.data = rng.standard_normal(t.shape).astype(t.dtype) * 0.1
        x = Tensor(rng.standard_normal((3, 1, 8, 8, 4)))
        params = list(blk.tensors().values())

        def fn(x, *ps):
            return blk(x)

        return _check(fn, [x] + params, bits, max_coords=max_coords, seed=seed)


def unet_check(bits: int = 64, seed: int = 0, max_coords: int = 6) -> float:
    """Micro U-Net in test mode: C=4, B=2, H=W=16, M=4."""
    cfg = UnetConfig(channels=4, window=4, test_mode=True)
    rng = np.random.default_rng(seed)
    with T.precision(_dtype(bits)):
        w = UnetWeights.init(cfg, seed=seed)
        x = Tensor(rng.random((2, 16, 16)))
        named = w.named_parameters()
        # input plus one representative tensor of each kind
        keep = [k for k in named if k.startswith(("shallow", "feature", "image"))
                or k.endswith(("conv.k", "down.k", "up.k", "proj.w_s_k", "w_h", "w_gate_f",
                               "mlp_spatial.w1", "bias.spatial_self"))]
        params = [named[k] for k in keep]

        def fn(x, *ps):
            return unet_forward(x, w, cfg)

        return _check(fn, [x] + params, bits, max_coords=max_coords, seed=seed)


def run_all(bits: int = 64, seed: int = 0) -> dict:
    res = {f"primitive.{k}": v for k, v in primitive_checks(bits, seed).items()}
    res["block"] = block_check(bits, seed)
    res["unet"] = unet_check(bits, seed)
    return res
