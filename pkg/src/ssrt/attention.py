"""Shared-key/value dual attention used by both SSRT branches.

Every branch owns two query projections (cross and self). The four
key/value projections are computed once per (band, window) and consumed
by the spectral and the spatial branch alike.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import tensor as T
from .tensor import Tensor


@lru_cache(maxsize=32)
def relative_position_index(M: int) -> np.ndarray:
    """(M*M, M*M) map from position pairs to rows of a (2M-1)^2 table."""
    coords = np.stack(np.meshgrid(np.arange(M), np.arange(M), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :]
    rel = rel + (M - 1)
    idx = rel[0] * (2 * M - 1) + rel[1]
    idx.setflags(write=False)
    return idx


@dataclass
class RelPosBias:
    table: Tensor
    window_size: int

    @classmethod
    def zeros(cls, M: int) -> "RelPosBias":
        return cls(T.parameter(np.zeros((2 * M - 1) ** 2)), M)

    @property
    def index(self) -> np.ndarray:
        return relative_position_index(self.window_size)

    def matrix(self) -> np.ndarray:
        return self.table.data[self.index]


@dataclass
class QueryProjections:
    w_cross_q: Tensor
    w_self_q: Tensor


@dataclass
class BranchProjections:
    """Per-branch queries plus the key/value matrices shared across branches."""

    spectral: QueryProjections
    spatial: QueryProjections
    w_s_k: Tensor
    w_s_v: Tensor
    w_f_k: Tensor
    w_f_v: Tensor

    @classmethod
    def init(cls, C: int, rng: np.random.Generator) -> "BranchProjections":
        _check_even(C)

        def mat():
            return T.parameter(T.trunc_normal(rng, (C, C // 2)))

        return cls(QueryProjections(mat(), mat()), QueryProjections(mat(), mat()),
                   mat(), mat(), mat(), mat())

    def tensors(self) -> dict:
        return {
            "spectral.w_cross_q": self.spectral.w_cross_q,
            "spectral.w_self_q": self.spectral.w_self_q,
            "spatial.w_cross_q": self.spatial.w_cross_q,
            "spatial.w_self_q": self.spatial.w_self_q,
            "w_s_k": self.w_s_k, "w_s_v": self.w_s_v,
            "w_f_k": self.w_f_k, "w_f_v": self.w_f_v,
        }


@dataclass
class SharedKV:
    k_s: Tensor
    v_s: Tensor
    k_f: Tensor
    v_f: Tensor
    # identities of the (state, feature) inputs these were projected from
    source: tuple = field(default=(), repr=False)


class StaleKeyValueError(RuntimeError):
    """Shared keys/values were produced from a different (state, band) pair."""


# number of shared key/value projections performed; read by instrumentation
PROJECTION_CALLS = {"shared_kv": 0}


def _check_even(C: int) -> None:
    if C % 2:
        raise ValueError(f"channel count must be even so C/2 is integral, got C={C}")


def project_shared(S: Tensor, F: Tensor, p: BranchProjections) -> SharedKV:
    """K_S, V_S from the state windows and K_F, V_F from the feature windows."""
    if S.shape != F.shape:
        raise ValueError(f"state windows {S.shape} and feature windows {F.shape} are not aligned")
    _check_even(S.shape[-1])
    PROJECTION_CALLS["shared_kv"] += 1
    return SharedKV(T.matmul(S, p.w_s_k), T.matmul(S, p.w_s_v),
                    T.matmul(F, p.w_f_k), T.matmul(F, p.w_f_v), source=(S, F))


def project_queries(X: Tensor, q: QueryProjections) -> tuple:
    _check_even(X.shape[-1])
    return T.matmul(X, q.w_cross_q), T.matmul(X, q.w_self_q)


def project(S, F, p: BranchProjections, branch: str, kv: SharedKV | None = None) -> tuple:
    """(Q_cross, Q_self, K_S, V_S, K_F, V_F) for one branch.

    The spectral branch draws both queries from S, the spatial branch from F.
    Pass ``kv`` to reuse keys/values already projected for the other branch.
    """
    S, F = T.as_tensor(S), T.as_tensor(F)
    if branch not in ("spectral", "spatial"):
        raise ValueError(f"branch must be 'spectral' or 'spatial', got {branch!r}")
    if kv is None:
        kv = project_shared(S, F, p)
    if branch == "spectral":
        qc, qs = project_queries(S, p.spectral)
    else:
        qc, qs = project_queries(F, p.spatial)
    return qc, qs, kv.k_s, kv.v_s, kv.k_f, kv.v_f


def attend(Q, K, V, bias: RelPosBias, mask: np.ndarray | None = None) -> Tensor:
    """softmax(Q Kᵀ/√d + bias + mask) V over the key axis.

    Accepts a single window (P, d) or a stack (G, P, d); ``mask`` is
    (N, P, P) with G a multiple of N.
    """
    Q, K, V = T.as_tensor(Q), T.as_tensor(K), T.as_tensor(V)
    single = Q.ndim == 2
    if single:
        Q, K, V = (T.reshape(t, (1,) + t.shape) for t in (Q, K, V))
        if mask is not None and mask.ndim == 2:
            mask = mask[None]
    P = Q.shape[-2]
    if P != bias.window_size ** 2:
        raise ValueError(f"window length {P} does not match bias window {bias.window_size}")
    out = T.window_attention(Q, K, V, bias.table, bias.index, mask)
    if not np.isfinite(out.data).all():
        raise FloatingPointError("non-finite attention output")
    return T.reshape(out, out.shape[1:]) if single else out


def fuse_attention(a_self, a_cross, w) -> Tensor:
    """cat(A_self, A_cross) along channels, then the C x C fusion matrix."""
    a_self, a_cross, w = T.as_tensor(a_self), T.as_tensor(a_cross), T.as_tensor(w)
    cat = T.concat([a_self, a_cross], axis=-1)
    if w.shape != (cat.shape[-1], cat.shape[-1]):
        raise ValueError(f"fusion matrix {w.shape} does not match concatenated width {cat.shape[-1]}")
    return T.matmul(cat, w)


def gate_projection(a_self, w) -> Tensor:
    """Lift C/2-channel self-attention to C channels for a gate pre-activation."""
    a_self, w = T.as_tensor(a_self), T.as_tensor(w)
    if w.ndim != 2 or w.shape[0] != a_self.shape[-1] or w.shape[1] != 2 * w.shape[0]:
        raise ValueError(f"gate matrix {w.shape} incompatible with input width {a_self.shape[-1]}")
    return T.matmul(a_self, w)
