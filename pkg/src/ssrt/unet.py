"""SSRT-UNet: shallow 3-D conv, five SSRT layers, reconstruction convs.

Feature maps flow band-major and channels-last, (B, N, H, W, C), so a band
slice is contiguous and 3-D convolutions run over axes (B, H, W).

Layer resolutions for an H x W input: H, H/2, H/4, H/2, H. The two
encoders downsample, the bottleneck and the first decoder upsample, the
last decoder keeps its size. The first encoder's output is added to the
first decoder's input and the shallow features to the last decoder's
input.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .block import BidirectionalBlock
from .tensor import Tensor

PRODUCTION_BLOCKS = (2, 2, 6, 2, 2)
TEST_MODE_BLOCKS = (1, 1, 1, 1, 1)
SAMPLERS = ("down", "down", "up", "up", "none")


@dataclass(frozen=True)
class UnetConfig:
    channels: int = 12
    window: int = 8
    test_mode: bool = False
    outer_residual: bool = True

    def __post_init__(self):
        if self.channels < 2 or self.channels % 2:
            raise ValueError(f"channels must be a positive even number, got {self.channels}")
        if self.window < 1:
            raise ValueError(f"window must be positive, got {self.window}")

    @property
    def blocks_per_layer(self) -> tuple:
        return TEST_MODE_BLOCKS if self.test_mode else PRODUCTION_BLOCKS

    @property
    def pairs(self) -> tuple:
        """Window/shifted-window pairs per layer (production mode)."""
        return tuple(n // 2 for n in PRODUCTION_BLOCKS)

    @property
    def multiple(self) -> int:
        return 4 * self.window


def _conv_init(rng, c_out, c_in, kd, kh, kw, gain: float = 1.0):
    bound = gain / np.sqrt(c_in * kd * kh * kw)
    return rng.uniform(-bound, bound, size=(c_out, c_in, kd, kh, kw))


def _delta(c, kd, kh, kw):
    k = np.zeros((c, c, kd, kh, kw))
    k[np.arange(c), np.arange(c), kd // 2, kh // 2, kw // 2] = 1.0
    return k


@dataclass
class Layer:
    blocks: list
    conv_k: Tensor
    conv_b: Tensor
    sampler: str
    sampler_k: Tensor | None = None

    def tensors(self) -> dict:
        out = {}
        for i, blk in enumerate(self.blocks):
            out.update({f"block{i}.{k}": v for k, v in blk.tensors().items()})
        out["conv.k"] = self.conv_k
        out["conv.b"] = self.conv_b
        if self.sampler_k is not None:
            out[f"{self.sampler}.k"] = self.sampler_k
        return out


@dataclass
class UnetWeights:
    config: UnetConfig
    shallow_k: Tensor
    shallow_b: Tensor
    layers: list
    feature_k: Tensor
    feature_b: Tensor
    image_k: Tensor
    image_b: Tensor
    extra: dict = field(default_factory=dict)

    @classmethod
    def init(cls, cfg: UnetConfig, seed: int = 0) -> "UnetWeights":
        rng = np.random.default_rng(seed)
        C, M = cfg.channels, cfg.window
        P = T.parameter
        layers = []
        for n_blocks, sampler in zip(cfg.blocks_per_layer, SAMPLERS):
            blocks = [BidirectionalBlock.init(C, M, rng, shifted=bool(i % 2)) for i in range(n_blocks)]
            # each bidirectional block roughly doubles its input at init; keep
            # the post-block conv from amplifying that 2**n growth
            conv_k = P(_conv_init(rng, C, C, 3, 3, 3, gain=2.0 ** -n_blocks))
            sampler_k = None
            if sampler == "down":
                k = np.zeros((C, C, 2, 2))
                k[np.arange(C), np.arange(C)] = 0.25
                sampler_k = P(k)
            elif sampler == "up":
                sampler_k = P(_delta(C, 1, 3, 3))
            layers.append(Layer(blocks, conv_k, P(np.zeros(C)), sampler, sampler_k))
        return cls(cfg,
                   P(_conv_init(rng, C, 1, 3, 3, 3)), P(np.zeros(C)),
                   layers,
                   P(_conv_init(rng, C, C, 3, 3, 3)), P(np.zeros(C)),
                   P(_conv_init(rng, 1, C, 3, 3, 3, gain=0.1)), P(np.zeros(1)))

    def named_parameters(self) -> dict:
        out = {"shallow.k": self.shallow_k, "shallow.b": self.shallow_b}
        for i, layer in enumerate(self.layers):
            out.update({f"layer{i}.{k}": v for k, v in layer.tensors().items()})
        out.update({"feature.k": self.feature_k, "feature.b": self.feature_b,
                    "image.k": self.image_k, "image.b": self.image_b})
        return out

    def parameters(self) -> list:
        return list(self.named_parameters().values())

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def downsample(x: Tensor, k: Tensor) -> Tensor:
    """Stride-2 2x2 spatial convolution applied band by band."""
    B, N, H, W, C = x.shape
    if H % 2 or W % 2:
        raise ValueError(f"downsample needs even spatial extents, got {H}x{W}")
    co, ci = k.shape[:2]
    y = T.reshape(x, (B, N, H // 2, 2, W // 2, 2, C))
    y = T.reshape(T.transpose(y, (0, 1, 2, 4, 3, 5, 6)), (B, N, H // 2, W // 2, 4 * C))
    # rows ordered (dy, dx, c_in) to match the patch layout above
    w = T.reshape(T.transpose(k, (2, 3, 1, 0)), (4 * ci, co))
    return T.matmul(y, w)


def upsample(x: Tensor, k: Tensor) -> Tensor:
    """Nearest-neighbour doubling, then a 3x3 per-band convolution."""
    return T.conv3d_bnhwc(T.upsample_nearest2(x, axes=(2, 3)), k)


def _sample(x: Tensor, layer: Layer) -> Tensor:
    if layer.sampler == "down":
        return downsample(x, layer.sampler_k)
    if layer.sampler == "up":
        return upsample(x, layer.sampler_k)
    return x


def _block_params(blk: BidirectionalBlock) -> list:
    return list(blk.tensors().values())


def layer_forward(f0: Tensor, layer: Layer, remat: bool = False) -> Tensor:
    """L bidirectional blocks, a 3-D conv, the layer residual, then resampling.

    G(Conv(F^L)) + G(F^0) is evaluated as G(Conv(F^L) + F^0); the
    samplers are linear and bias-free so the two agree.
    """
    f = f0
    for blk in layer.blocks:
        f = T.checkpoint(blk, f, _block_params(blk)) if remat else blk(f)
    f = T.conv3d_bnhwc(f, layer.conv_k, layer.conv_b) + f0
    return _sample(f, layer)


def pad_to_multiple(y: np.ndarray, multiple: int) -> tuple:
    """Reflect-pad the last two axes up to a multiple; returns (padded, (H, W))."""
    H, W = y.shape[-2:]
    ph, pw = (-H) % multiple, (-W) % multiple
    if ph == 0 and pw == 0:
        return y, (H, W)
    pads = [(0, 0)] * (y.ndim - 2) + [(0, ph), (0, pw)]
    mode = "reflect" if ph < H and pw < W else "symmetric"
    return np.pad(y, pads, mode=mode), (H, W)


def unet_forward(y, w: UnetWeights, cfg: UnetConfig | None = None, remat: bool = False) -> Tensor:
    """Denoise a B x H x W cube, or an N x B x H x W batch.

    Spatial extents are reflect-padded to a multiple of 4M and cropped back.
    """
    cfg = cfg or w.config
    if isinstance(y, Tensor):
        if y.shape[-2] % cfg.multiple or y.shape[-1] % cfg.multiple:
            raise ValueError(f"spatial extents {y.shape[-2:]} must be multiples of {cfg.multiple}; "
                             "pass an array to have it padded")
        yt, (H, W) = y, y.shape[-2:]
    else:
        arr = np.asarray(y)
        if arr.ndim not in (3, 4):
            raise ValueError(f"expected a B x H x W cube or N x B x H x W batch, got shape {arr.shape}")
        arr, (H, W) = pad_to_multiple(arr, cfg.multiple)
        yt = Tensor(arr)
    single = yt.ndim == 3
    if single:
        yt = T.reshape(yt, (1,) + yt.shape)
    if yt.shape[1] < 1:
        raise ValueError("cube has no bands")
    for name, p in w.named_parameters().items():
        if not np.isfinite(p.data).all():
            raise FloatingPointError(f"non-finite weights in {name}")

    N, B, Hp, Wp = yt.shape
    x = T.reshape(T.transpose(yt, (1, 0, 2, 3)), (B, N, Hp, Wp, 1))
    shallow = T.conv3d_bnhwc(x, w.shallow_k, w.shallow_b)
    l0, l1, l2, l3, l4 = w.layers
    e1 = layer_forward(shallow, l0, remat)
    e2 = layer_forward(e1, l1, remat)
    d3 = layer_forward(e2, l2, remat)
    d4 = layer_forward(d3 + e1, l3, remat)
    d5 = layer_forward(d4 + shallow, l4, remat)
    feat = T.conv3d_bnhwc(d5, w.feature_k, w.feature_b) + shallow
    img = T.conv3d_bnhwc(feat, w.image_k, w.image_b)
    if cfg.outer_residual:
        img = img + x
    out = T.transpose(T.reshape(img, (B, N, Hp, Wp)), (1, 0, 2, 3))
    if (Hp, Wp) != (H, W):
        out = T.getitem(out, (slice(None), slice(None), slice(0, H), slice(0, W)))
    return T.reshape(out, out.shape[1:]) if single else out


def denoise(cube: np.ndarray, w: UnetWeights) -> np.ndarray:
    """Inference on one B x H x W cube; returns an array in the cube's dtype."""
    with T.no_grad():
        out = unet_forward(np.asarray(cube, dtype=T.default_dtype()), w)
    return out.data.astype(np.asarray(cube).dtype, copy=False)
