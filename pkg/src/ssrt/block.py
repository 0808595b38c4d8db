"""The SSRT block: spectral recurrence with SRU gates, spatial update, and
the bidirectional wrapper.

Cyclic shift and window partition are fixed pixel permutations, and every
op in a band step is either per-pixel or confined to one window. The
recurrence therefore runs entirely in window layout: a directional pass
shifts and partitions the whole band sequence once, steps through the
bands, and reverses the partition once at the end. The per-step
functions below wrap the same core for callers holding C x H x W maps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from . import windowing as win
from .attention import (BranchProjections, RelPosBias, SharedKV, StaleKeyValueError,
                        attend, fuse_attention, gate_projection, project_queries)
from . import attention
from .tensor import MlpParams, Tensor


@dataclass
class SsrtBlockWeights:
    proj: BranchProjections
    w_h: Tensor            # C x C, spectral fusion
    w_f: Tensor            # C x C, spatial fusion
    w_gate_f: Tensor       # C/2 x C, forget gate
    w_gate_r: Tensor       # C/2 x C, reset gate
    bias_spectral_cross: RelPosBias
    bias_spectral_self: RelPosBias
    bias_spatial_cross: RelPosBias
    bias_spatial_self: RelPosBias
    mlp_spectral: MlpParams
    mlp_spatial: MlpParams
    window_size: int
    shifted: bool = False

    @property
    def channels(self) -> int:
        return self.w_h.shape[0]

    @property
    def shift_size(self) -> int:
        return self.window_size // 2 if self.shifted else 0

    @classmethod
    def init(cls, C: int, M: int, rng: np.random.Generator, shifted: bool = False,
             mlp_ratio: int = 4) -> "SsrtBlockWeights":
        def mat(shape):
            return T.parameter(T.trunc_normal(rng, shape))

        return cls(
            proj=BranchProjections.init(C, rng),
            w_h=mat((C, C)), w_f=mat((C, C)),
            w_gate_f=mat((C // 2, C)), w_gate_r=mat((C // 2, C)),
            bias_spectral_cross=RelPosBias.zeros(M), bias_spectral_self=RelPosBias.zeros(M),
            bias_spatial_cross=RelPosBias.zeros(M), bias_spatial_self=RelPosBias.zeros(M),
            mlp_spectral=MlpParams.init(C, rng, mlp_ratio),
            mlp_spatial=MlpParams.init(C, rng, mlp_ratio),
            window_size=M, shifted=shifted)

    def tensors(self) -> dict:
        out = {f"proj.{k}": v for k, v in self.proj.tensors().items()}
        out.update({"w_h": self.w_h, "w_f": self.w_f,
                    "w_gate_f": self.w_gate_f, "w_gate_r": self.w_gate_r,
                    "bias.spectral_cross": self.bias_spectral_cross.table,
                    "bias.spectral_self": self.bias_spectral_self.table,
                    "bias.spatial_cross": self.bias_spatial_cross.table,
                    "bias.spatial_self": self.bias_spatial_self.table})
        out.update({f"mlp_spectral.{k}": v for k, v in self.mlp_spectral.tensors().items()})
        out.update({f"mlp_spatial.{k}": v for k, v in self.mlp_spatial.tensors().items()})
        return out


@dataclass
class SpectralState:
    """Highway state S and light-recurrence cell C, both C x H x W."""

    S: Tensor
    C_state: Tensor

    @classmethod
    def zeros(cls, C: int, H: int, W: int) -> "SpectralState":
        return cls(Tensor(np.zeros((C, H, W))), Tensor(np.zeros((C, H, W))))


# window-layout core; all maps are (G, P, C)


def _sru_update(a_h, a_f, a_r, c_prev, s_prev):
    h = T.tanh(a_h)
    forget = T.tanh_relu(a_f)
    reset = T.tanh_relu(a_r)
    c_t = forget * c_prev + (1.0 - forget) * h
    s_star = reset * c_t + (1.0 - reset) * s_prev
    return c_t, s_star, (h, forget, reset)


def spectral_core(s_prev: Tensor, c_prev: Tensor, kv: SharedKV, w: SsrtBlockWeights,
                  mask: np.ndarray | None):
    """One spectral-branch update on aligned window stacks.

    ``kv`` holds the keys/values projected from (s_prev, f_t); the spatial
    branch consumes the same object.
    """
    q_cross, q_self = project_queries(s_prev, w.proj.spectral)
    a_cross = attend(q_cross, kv.k_f, kv.v_f, w.bias_spectral_cross, mask)
    a_self = attend(q_self, kv.k_s, kv.v_s, w.bias_spectral_self, mask)
    a_h = fuse_attention(a_self, a_cross, w.w_h)
    a_f = gate_projection(a_self, w.w_gate_f)
    a_r = gate_projection(a_self, w.w_gate_r)
    c_t, s_star, gates = _sru_update(a_h, a_f, a_r, c_prev, s_prev)
    s_t = T.mlp_forward(s_star, w.mlp_spectral) + s_star
    return s_t, c_t, s_star, a_self, gates


def spatial_core(f_t: Tensor, kv: SharedKV, w: SsrtBlockWeights,
                 mask: np.ndarray | None) -> Tensor:
    q_cross, q_self = project_queries(f_t, w.proj.spatial)
    a_self = attend(q_self, kv.k_f, kv.v_f, w.bias_spatial_self, mask)
    a_cross = attend(q_cross, kv.k_s, kv.v_s, w.bias_spatial_cross, mask)
    f_star = fuse_attention(a_self, a_cross, w.w_f) + f_t
    return T.mlp_forward(f_star, w.mlp_spatial) + f_star


def _mask_for(w: SsrtBlockWeights, H: int, W: int):
    d = w.shift_size
    return win.build_shift_mask(H, W, w.window_size, d) if d else None


def _to_windows(x: Tensor, w: SsrtBlockWeights) -> Tensor:
    """(..., H, W, C) -> (..., N, P, C) after the block's cyclic shift."""
    return win.partition(win.cyclic_shift(x, w.shift_size), w.window_size)


def _from_windows(x: Tensor, w: SsrtBlockWeights, H: int, W: int) -> Tensor:
    return win.cyclic_shift(win.reverse(x, H, W), -w.shift_size)


def _chw_to_windows(x, w: SsrtBlockWeights) -> Tensor:
    return _to_windows(T.transpose(T.as_tensor(x), (1, 2, 0)), w)


def _windows_to_chw(x: Tensor, w: SsrtBlockWeights, H: int, W: int) -> Tensor:
    return T.transpose(_from_windows(x, w, H, W), (2, 0, 1))


# public per-band interface on C x H x W maps


@dataclass
class SpectralStepResult:
    state: SpectralState
    a_self: Tensor        # (N, P, C/2) spectral self-attention windows
    kv: SharedKV
    gates: tuple          # (H_t, F_t, R_t) in window layout
    s_star: Tensor        # C x H x W, before the residual MLP


def spectral_step(S_prev: SpectralState, F_t, w: SsrtBlockWeights) -> SpectralStepResult:
    source = (S_prev.S, F_t)
    F_t = T.as_tensor(F_t)
    C, H, W = F_t.shape
    if S_prev.S.shape != F_t.shape or S_prev.C_state.shape != F_t.shape:
        raise ValueError(f"state {S_prev.S.shape} incompatible with features {F_t.shape}")
    mask = _mask_for(w, H, W)
    s_w = _chw_to_windows(S_prev.S, w)
    kv = attention.project_shared(s_w, _chw_to_windows(F_t, w), w.proj)
    kv.source = source
    s_t, c_t, s_star, a_self, gates = spectral_core(
        s_w, _chw_to_windows(S_prev.C_state, w), kv, w, mask)
    state = SpectralState(_windows_to_chw(s_t, w, H, W), _windows_to_chw(c_t, w, H, W))
    return SpectralStepResult(state, a_self, kv, gates, _windows_to_chw(s_star, w, H, W))


def spatial_step(F_t, S_prev: SpectralState, kv: SharedKV, w: SsrtBlockWeights) -> Tensor:
    """Spatial-branch update of one band; ``kv`` must come from (S_prev, F_t)."""
    if len(kv.source) != 2 or kv.source[0] is not S_prev.S or kv.source[1] is not F_t:
        raise StaleKeyValueError("shared keys/values were not projected from this (state, band) pair")
    F_t = T.as_tensor(F_t)
    C, H, W = F_t.shape
    out = spatial_core(_chw_to_windows(F_t, w), kv, w, _mask_for(w, H, W))
    return _windows_to_chw(out, w, H, W)


# sequence passes on band-major channels-last tensors (B, N, H, W, C)


def _recurrence(bands: list, w: SsrtBlockWeights, mask, reverse: bool) -> list:
    order = range(len(bands) - 1, -1, -1) if reverse else range(len(bands))
    zeros = Tensor(np.zeros(bands[0].shape))
    s, c = zeros, zeros
    outs = [None] * len(bands)
    last = len(bands) - 1
    for step, t in enumerate(order):
        f_t = bands[t]
        kv = attention.project_shared(s, f_t, w.proj)
        outs[t] = spatial_core(f_t, kv, w, mask)
        if step != last:
            # the state after the final band feeds nothing
            s, c, *_ = spectral_core(s, c, kv, w, mask)
    return outs


def _check_sequence(x: Tensor, w: SsrtBlockWeights) -> None:
    if x.ndim != 5:
        raise ValueError(f"expected a (B, N, H, W, C) band sequence, got shape {x.shape}")
    if x.shape[0] < 1:
        raise ValueError("empty band sequence")
    if x.shape[-1] != w.channels:
        raise ValueError(f"sequence has {x.shape[-1]} channels, block expects {w.channels}")


def directional_pass(x: Tensor, w: SsrtBlockWeights, reverse: bool = False) -> Tensor:
    _check_sequence(x, w)
    B, N, H, W, C = x.shape
    xw = _to_windows(x, w)
    nw, P = xw.shape[2], xw.shape[3]
    bands = T.unbind(T.reshape(xw, (B, N * nw, P, C)), 0)
    outs = _recurrence(bands, w, _mask_for(w, H, W), reverse)
    y = T.reshape(T.stack(outs, 0), (B, N, nw, P, C))
    return _from_windows(y, w, H, W)


def bidirectional_pass(x: Tensor, w_fwd: SsrtBlockWeights, w_bwd: SsrtBlockWeights) -> Tensor:
    """Sum of a forward-order and a reverse-order pass with independent weights."""
    _check_sequence(x, w_fwd)
    if (w_fwd.window_size, w_fwd.shifted) != (w_bwd.window_size, w_bwd.shifted):
        raise ValueError("forward and backward weights must share window size and shift")
    B, N, H, W, C = x.shape
    xw = _to_windows(x, w_fwd)
    nw, P = xw.shape[2], xw.shape[3]
    bands = T.unbind(T.reshape(xw, (B, N * nw, P, C)), 0)
    mask = _mask_for(w_fwd, H, W)
    fwd = _recurrence(bands, w_fwd, mask, reverse=False)
    bwd = _recurrence(bands, w_bwd, mask, reverse=True)
    assert len(fwd) == len(bwd) == B
    y = T.stack([a + b for a, b in zip(fwd, bwd)], 0)
    return _from_windows(T.reshape(y, (B, N, nw, P, C)), w_fwd, H, W)


def _seq_to_internal(seq) -> Tensor:
    seq = T.as_tensor(seq)
    if seq.ndim != 4:
        raise ValueError(f"expected a B x C x H x W band sequence, got shape {seq.shape}")
    if seq.shape[0] < 1:
        raise ValueError("empty band sequence")
    return T.reshape(T.transpose(seq, (0, 2, 3, 1)), (seq.shape[0], 1) + seq.shape[2:] + (seq.shape[1],))


def _internal_to_seq(y: Tensor) -> Tensor:
    B, _, H, W, C = y.shape
    return T.transpose(T.reshape(y, (B, H, W, C)), (0, 3, 1, 2))


def ssrt_forward(seq, w: SsrtBlockWeights, direction: str = "fwd") -> Tensor:
    """Run one directional SSRT block over a B x C x H x W band sequence.

    ``bwd`` processes the bands last-to-first, which equals reversing the
    sequence, running ``fwd`` and reversing the result.
    """
    if direction not in ("fwd", "bwd"):
        raise ValueError(f"direction must be 'fwd' or 'bwd', got {direction!r}")
    return _internal_to_seq(directional_pass(_seq_to_internal(seq), w, reverse=direction == "bwd"))


def bidirectional_ssrt(seq, w_fwd: SsrtBlockWeights, w_bwd: SsrtBlockWeights) -> Tensor:
    return _internal_to_seq(bidirectional_pass(_seq_to_internal(seq), w_fwd, w_bwd))


@dataclass
class BidirectionalBlock:
    fwd: SsrtBlockWeights
    bwd: SsrtBlockWeights

    @classmethod
    def init(cls, C: int, M: int, rng: np.random.Generator, shifted: bool) -> "BidirectionalBlock":
        return cls(SsrtBlockWeights.init(C, M, rng, shifted), SsrtBlockWeights.init(C, M, rng, shifted))

    def __call__(self, x: Tensor) -> Tensor:
        return bidirectional_pass(x, self.fwd, self.bwd)

    def tensors(self) -> dict:
        out = {f"fwd.{k}": v for k, v in self.fwd.tensors().items()}
        out.update({f"bwd.{k}": v for k, v in self.bwd.tensors().items()})
        return out
