"""Reverse-mode autodiff over numpy arrays.

A ``Tensor`` wraps an ndarray and, when any input requires a gradient,
records the op that produced it. ``Tensor.backward`` walks the recorded
graph in reverse topological order. Ops that dominate the SSRT cost
(windowed attention, 3-D convolution) are fused with hand-written
backward rules; everything else is composed from small primitives.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

_DTYPE = np.float32
_GRAD_ENABLED = True


def default_dtype():
    return _DTYPE


def set_default_dtype(dtype) -> None:
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported scalar type {dtype!r}; use float32 or float64")
    _DTYPE = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default scalar width (used for gradient verification)."""
    old = _DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


@contextlib.contextmanager
def enable_grad():
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = True
    try:
        yield
    finally:
        _GRAD_ENABLED = old


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != _DTYPE:
            arr = arr.astype(_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{tag})"

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad=None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        self.grad = np.asarray(grad, dtype=self.data.dtype)
        for node in reversed(_toposort(self)):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # interior grads are not needed once propagated
                if node._parents:
                    node.grad = None if node is not self else node.grad

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self):
        return sum_all(self)


def _toposort(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _accum(t: Tensor, g) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def _node(data, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED:
        for p in parents:
            if p.requires_grad:
                out.requires_grad = True
                out._parents = tuple(parents)
                out._backward = backward
                break
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _node(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _node(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), backward)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _node(y, (x,), lambda g: _accum(x, g * (1.0 - y * y)))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _node(np.where(pos, x.data, 0).astype(x.dtype), (x,),
                 lambda g: _accum(x, g * pos))


def tanh_relu(x: Tensor) -> Tensor:
    """tanh(max(x, 0)); the gate nonlinearity, range [0, 1)."""
    y = np.tanh(np.maximum(x.data, 0))
    pos = x.data > 0
    return _node(y, (x,), lambda g: _accum(x, g * (1.0 - y * y) * pos))


_SQRT_HALF = float(np.sqrt(0.5))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


def gelu(x: Tensor) -> Tensor:
    # exact (erf) form
    cdf = 0.5 * (1.0 + erf(x.data * _SQRT_HALF))
    y = (x.data * cdf).astype(x.dtype)

    def backward(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        _accum(x, (g * (cdf + x.data * pdf)).astype(x.dtype))

    return _node(y, (x,), backward)


ACTIVATIONS = {"tanh": tanh, "relu": relu, "tanh_relu": tanh_relu, "gelu": gelu}


def act(x: Tensor, kind: str) -> Tensor:
    try:
        fn = ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(ACTIVATIONS)}")
    return fn(as_tensor(x))


# reductions and shape ops


def sum_all(x: Tensor) -> Tensor:
    # accumulate in float64 so 32-bit finite differences stay usable
    s = np.asarray(np.sum(x.data, dtype=np.float64), dtype=x.dtype)
    return _node(s, (x,), lambda g: _accum(x, np.broadcast_to(g, x.shape)))


def mean_all(x: Tensor) -> Tensor:
    return mul(sum_all(x), 1.0 / x.size)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: _accum(x, g.reshape(old)))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(x.data.transpose(axes), (x,), lambda g: _accum(x, g.transpose(inv)))


def getitem(x: Tensor, index) -> Tensor:
    def backward(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        np.add.at(full, index, g) if _is_fancy(index) else full.__setitem__(index, g)
        _accum(x, full)

    return _node(x.data[index], (x,), backward)


def _is_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def backward(g):
        for x, part in zip(xs, np.split(g, sizes, axis=axis)):
            _accum(x, part)

    return _node(np.concatenate([x.data for x in xs], axis=axis), xs, backward)


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]

    def backward(g):
        for i, x in enumerate(xs):
            _accum(x, np.take(g, i, axis=axis))

    return _node(np.stack([x.data for x in xs], axis=axis), xs, backward)


def unbind(x: Tensor, axis: int = 0) -> list:
    """Split along ``axis``; slice gradients are written into one owned buffer."""
    owned = {}

    def make(i):
        idx = [slice(None)] * x.ndim
        idx[axis] = i
        idx = tuple(idx)

        def backward(g):
            if not x.requires_grad:
                return
            if x.grad is None or x.grad is not owned.get("buf"):
                buf = np.zeros(x.shape, dtype=g.dtype)
                if x.grad is not None:
                    buf += x.grad
                x.grad = owned["buf"] = buf
            x.grad[idx] += g
        return backward

    return [_node(np.take(x.data, i, axis=axis), (x,), make(i)) for i in range(x.shape[axis])]


def roll2d(x: Tensor, shift: int, axes=(-3, -2)) -> Tensor:
    """Cyclic shift by ``shift`` along both ``axes``."""
    if shift == 0:
        return x
    y = np.roll(x.data, (shift, shift), axis=axes)
    return _node(y, (x,), lambda g: _accum(x, np.roll(g, (-shift, -shift), axis=axes)))


# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            ga = g @ b.data.swapaxes(-1, -2)
            _accum(a, _unbroadcast(ga, a.shape))
        if b.requires_grad:
            if b.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.shape)
            _accum(b, gb)

    return _node(a.data @ b.data, (a, b), backward)


def linear(x, w, b=None) -> Tensor:
    """``x @ w (+ b)`` over the last axis of ``x``."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear: input shape {x.shape} incompatible with weight shape {w.shape}")
    if b is None:
        return matmul(x, w)
    b = as_tensor(b)
    if b.shape != (w.shape[1],):
        raise ValueError(f"linear: bias shape {b.shape} does not match weight shape {w.shape}")
    y = x.data @ w.data
    y += b.data

    def backward(g):
        if x.requires_grad:
            _accum(x, g @ w.data.T)
        g2 = g.reshape(-1, g.shape[-1])
        if w.requires_grad:
            _accum(w, x.data.reshape(-1, x.shape[-1]).T @ g2)
        if b.requires_grad:
            _accum(b, g2.sum(axis=0))

    return _node(y, (x, w, b), backward)


def softmax_rows(x) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        _accum(x, p * (g - (g * p).sum(axis=-1, keepdims=True)))

    return _node(p, (x,), backward)


def window_attention(q: Tensor, k: Tensor, v: Tensor, table: Tensor,
                     rel_index: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """softmax(q kᵀ/√d + table[rel_index] + mask) v, batched over windows.

    q, k, v: (G, P, d). ``mask`` is (nW, P, P) with G a multiple of nW; it
    repeats over the leading batch. ``table`` is the learned relative bias.
    Scores are held key-major, (G, P_key, P_query), so the per-row softmax
    reductions run over axis -2, which numpy reduces much faster.
    """
    G, P, d = q.shape
    scale = float(1.0 / np.sqrt(d))
    bias = table.data[rel_index]
    if mask is not None:
        bias = bias + mask
    bias_t = bias.swapaxes(-1, -2)
    nw = bias.shape[0] if bias.ndim == 3 else 1
    st = k.data @ q.data.swapaxes(-1, -2)
    st *= scale
    st4 = st.reshape(G // nw, nw, P, P)
    st4 += bias_t
    st -= st.max(axis=-2, keepdims=True)
    np.exp(st, out=st)
    st /= st.sum(axis=-2, keepdims=True)
    pt = st
    out = pt.swapaxes(-1, -2) @ v.data
    n_table = table.size

    def backward(g):
        if v.requires_grad:
            _accum(v, pt @ g)
        dst = v.data @ g.swapaxes(-1, -2)
        dst -= (dst * pt).sum(axis=-2, keepdims=True)
        dst *= pt
        if table.requires_grad:
            gt = np.bincount(rel_index.T.ravel(), weights=dst.sum(axis=0).ravel(), minlength=n_table)
            _accum(table, gt.astype(table.dtype))
        dst *= scale
        if q.requires_grad:
            _accum(q, dst.swapaxes(-1, -2) @ k.data)
        if k.requires_grad:
            _accum(k, dst @ q.data)

    return _node(out, (q, k, v, table), backward)


# convolution


def _im2col_hw(xp: np.ndarray, kh: int, kw: int, H: int, W: int) -> np.ndarray:
    """Stack the kh*kw spatial taps of a padded (D, N, H', W', C) array on the channel axis."""
    D, N, _, _, C = xp.shape
    cols = np.empty((D, N, H, W, kh * kw * C), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            t = i * kw + j
            cols[..., t * C:(t + 1) * C] = xp[:, :, i:i + H, j:j + W, :]
    return cols


def conv3d_bnhwc(x: Tensor, k: Tensor, b: Tensor | None = None) -> Tensor:
    """Zero-padded stride-1 3-D convolution on band-major channels-last input.

    x: (B, N, H, W, C_in), convolved over axes (B, H, W).
    k: (C_out, C_in, kd, kh, kw) with odd kernel extents.
    """
    x, k = as_tensor(x), as_tensor(k)
    if x.ndim != 5:
        raise ValueError(f"conv3d: expected (B, N, H, W, C) input, got shape {x.shape}")
    co, ci, kd, kh, kw = k.shape
    if x.shape[-1] != ci:
        raise ValueError(f"conv3d: input channels {x.shape[-1]} != kernel channels {ci}")
    if min(kd, kh, kw) < 1 or not (kd % 2 and kh % 2 and kw % 2):
        raise ValueError(f"conv3d: kernel extents must be odd, got {k.shape[2:]}")
    B, N, H, W, _ = x.shape
    if min(B, H, W) < 1:
        raise ValueError(f"conv3d: extents must be at least 1, got {x.shape}")
    pd, ph, pw = kd // 2, kh // 2, kw // 2
    xp = np.pad(x.data, ((pd, pd), (0, 0), (ph, ph), (pw, pw), (0, 0)))
    cols = _im2col_hw(xp, kh, kw, H, W)
    # (kh, kw, ci) column order per depth tap
    kmats = [k.data[:, :, dz].transpose(2, 3, 1, 0).reshape(kh * kw * ci, co) for dz in range(kd)]
    out = cols[0:B] @ kmats[0]
    for dz in range(1, kd):
        out += cols[dz:dz + B] @ kmats[dz]
    if b is not None:
        out += b.data

    def backward(g):
        if x.requires_grad:
            gcols = np.zeros_like(cols)
            for dz in range(kd):
                gcols[dz:dz + B] += g @ kmats[dz].T
            gp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    t = i * kw + j
                    gp[:, :, i:i + H, j:j + W, :] += gcols[..., t * ci:(t + 1) * ci]
            _accum(x, gp[pd:pd + B, :, ph:ph + H, pw:pw + W, :])
        if k.requires_grad:
            gk = np.empty(k.shape, dtype=k.dtype)
            g2 = g.reshape(-1, co)
            for dz in range(kd):
                gm = cols[dz:dz + B].reshape(-1, kh * kw * ci).T @ g2
                gk[:, :, dz] = gm.reshape(kh, kw, ci, co).transpose(3, 2, 0, 1)
            _accum(k, gk)
        if b is not None and b.requires_grad:
            _accum(b, g.reshape(-1, co).sum(axis=0))

    parents = (x, k) if b is None else (x, k, b)
    return _node(out, parents, backward)


def conv3d(x, k, b=None) -> Tensor:
    """3x3x3 (or any odd) zero-padded convolution on a C_in x B x H x W tensor."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ValueError(f"conv3d: expected C x B x H x W input, got shape {x.shape}")
    xl = reshape(transpose(x, (1, 2, 3, 0)), (x.shape[1], 1, x.shape[2], x.shape[3], x.shape[0]))
    y = conv3d_bnhwc(xl, k, b)
    return transpose(reshape(y, (y.shape[0], y.shape[2], y.shape[3], y.shape[4])), (3, 0, 1, 2))


def upsample_nearest2(x: Tensor, axes=(2, 3)) -> Tensor:
    """Nearest-neighbour doubling along two axes."""
    a0, a1 = axes
    y = np.repeat(np.repeat(x.data, 2, axis=a0), 2, axis=a1)

    def backward(g):
        shp = list(g.shape)
        new = shp[:a0] + [shp[a0] // 2, 2] + shp[a0 + 1:a1] + [shp[a1] // 2, 2] + shp[a1 + 1:]
        _accum(x, g.reshape(new).sum(axis=(a0 + 1, a1 + 2)))

    return _node(y, (x,), backward)


# MLP


class MlpParams:
    """Two-layer perceptron C -> rC -> C with a GELU in between."""

    def __init__(self, w1, b1, w2, b2, activation: str = "gelu"):
        self.w1, self.b1, self.w2, self.b2 = w1, b1, w2, b2
        self.activation = activation
        c, rc = w1.shape
        if w2.shape != (rc, c) or b1.shape != (rc,) or b2.shape != (c,):
            raise ValueError(f"inconsistent MLP shapes: w1 {w1.shape}, b1 {b1.shape}, "
                             f"w2 {w2.shape}, b2 {b2.shape}")

    @property
    def channels(self) -> int:
        return self.w1.shape[0]

    @property
    def expansion(self) -> int:
        return self.w1.shape[1] // self.w1.shape[0]

    def tensors(self) -> dict:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    @classmethod
    def init(cls, channels: int, rng: np.random.Generator, expansion: int = 4,
             activation: str = "gelu") -> "MlpParams":
        hidden = channels * expansion
        return cls(parameter(trunc_normal(rng, (channels, hidden))),
                   parameter(np.zeros(hidden)),
                   parameter(trunc_normal(rng, (hidden, channels))),
                   parameter(np.zeros(channels)),
                   activation=activation)


def mlp_forward(x, p: MlpParams) -> Tensor:
    x = as_tensor(x)
    if x.shape[-1] != p.channels:
        raise ValueError(f"mlp: input channels {x.shape[-1]} != MLP width {p.channels}")
    h = act(linear(x, p.w1, p.b1), p.activation)
    return linear(h, p.w2, p.b2)


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by redrawing."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def checkpoint(fn: Callable[[Tensor], Tensor], x: Tensor, params: Sequence[Tensor]) -> Tensor:
    """Evaluate ``fn(x)`` without keeping intermediates; recompute them on backward.

    ``params`` must list every leaf tensor ``fn`` reads that needs a gradient.
    """
    params = tuple(params)
    if not _GRAD_ENABLED or not (x.requires_grad or any(p.requires_grad for p in params)):
        return fn(x)
    with no_grad():
        y = fn(x).data

    def backward(g):
        xd = Tensor(x.data, requires_grad=x.requires_grad)
        with enable_grad():
            out = fn(xd)
        out.backward(g)
        if x.requires_grad and xd.grad is not None:
            _accum(x, xd.grad)

    return _node(y, (x,) + params, backward)


# gradient verification


class NonFiniteError(FloatingPointError):
    def __init__(self, message: str, index=None):
        super().__init__(message)
        self.index = index


def grad_check(f: Callable[..., Tensor], x, eps: float = 1e-3, *,
               max_coords: int | None = None, seed: int = 0) -> float:
    """Max relative error between backprop and central differences.

    ``f`` maps the input tensor(s) to a scalar Tensor. ``x`` is one Tensor or
    a list of Tensors; all are checked. With ``max_coords`` only a seeded
    random subset of coordinates per tensor is probed.
    """
    if not 1e-6 <= eps <= 1e-2:
        raise ValueError(f"eps must lie in [1e-6, 1e-2], got {eps}")
    xs = list(x) if isinstance(x, (list, tuple)) else [x]
    for t in xs:
        t.requires_grad = True
        t.grad = None
    out = f(*xs) if isinstance(x, (list, tuple)) else f(xs[0])
    if out.size != 1:
        raise ValueError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    out.backward()
    analytic = [np.zeros(t.shape) if t.grad is None else np.array(t.grad, dtype=np.float64)
                for t in xs]

    def evaluate() -> float:
        with no_grad():
            val = f(*xs) if isinstance(x, (list, tuple)) else f(xs[0])
        return float(val.data)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for ti, t in enumerate(xs):
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            fp = evaluate()
            flat[i] = orig - eps
            fm = evaluate()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError(f"non-finite value probing tensor {ti} coordinate {int(i)}",
                                     index=(ti, int(i)))
            # use the realised step: orig +- eps rounds in 32-bit
            step = float(np.asarray(orig + eps, t.dtype)) - float(np.asarray(orig - eps, t.dtype))
            fd = (fp - fm) / step
            err = abs(analytic[ti].reshape(-1)[i] - fd) / max(1.0, abs(fd))
            worst = max(worst, err)
    return worst
