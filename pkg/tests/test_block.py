import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ssrt import attention as A
from ssrt import block as K
from ssrt import tensor as T
from ssrt.tensor import Tensor


def random_weights(C, M, rng, shifted=False, scale=0.5):
    """Block weights with O(1) entries so every path matters."""
    w = K.SsrtBlockWeights.init(C, M, rng, shifted)
    for t in w.tensors().values():
        t.data = (rng.standard_normal(t.shape) * scale).astype(t.dtype)
    return w


def zero_attention(w):
    for t in list(w.proj.tensors().values()) + [w.w_h, w.w_f, w.w_gate_f, w.w_gate_r]:
        t.data[:] = 0


def zero_mlps(w):
    for m in (w.mlp_spectral, w.mlp_spatial):
        for t in m.tensors().values():
            t.data[:] = 0


# scalar oracle for M=1, H=W=1: each window holds one position, so every
# attention output equals its value vector


def _gelu(x):
    return 0.5 * x * (1.0 + math.erf(x / math.sqrt(2.0)))


def _vecmat(x, m):
    return [sum(x[i] * m[i][j] for i in range(len(x))) for j in range(len(m[0]))]


def _mlp(x, p):
    h = [_gelu(v + b) for v, b in zip(_vecmat(x, p.w1.data.tolist()), p.b1.data.tolist())]
    return [v + b for v, b in zip(_vecmat(h, p.w2.data.tolist()), p.b2.data.tolist())]


def _trelu(x):
    return math.tanh(max(x, 0.0))


def scalar_oracle(bands, w):
    """Unrolled gates over a list of C-vectors; returns (states, cells, outputs)."""
    C = len(bands[0])
    m = lambda t: t.data.tolist()
    s, c = [0.0] * C, [0.0] * C
    states, cells, outs = [], [], []
    for f in bands:
        v_s = _vecmat(s, m(w.proj.w_s_v))
        v_f = _vecmat(f, m(w.proj.w_f_v))
        # spatial branch: self over F, cross over S
        f_star = [a + b for a, b in zip(_vecmat(v_f + v_s, m(w.w_f)), f)]
        outs.append([a + b for a, b in zip(_mlp(f_star, w.mlp_spatial), f_star)])
        # spectral branch: self over S, cross over F
        a_h = _vecmat(v_s + v_f, m(w.w_h))
        a_f = _vecmat(v_s, m(w.w_gate_f))
        a_r = _vecmat(v_s, m(w.w_gate_r))
        h = [math.tanh(x) for x in a_h]
        fg = [_trelu(x) for x in a_f]
        c = [fi * ci + (1 - fi) * hi for fi, ci, hi in zip(fg, c, h)]
        r = [_trelu(x) for x in a_r]
        s_star = [ri * ci + (1 - ri) * si for ri, ci, si in zip(r, c, s)]
        s = [a + b for a, b in zip(_mlp(s_star, w.mlp_spectral), s_star)]
        states.append(s)
        cells.append(c)
    return states, cells, outs


def test_spectral_step_matches_scalar_oracle_over_five_bands(rng, f64):
    C, B = 2, 5
    w = random_weights(C, 1, rng)
    bands = [rng.standard_normal(C) for _ in range(B)]
    states, cells, outs = scalar_oracle([b.tolist() for b in bands], w)
    st_ = K.SpectralState.zeros(C, 1, 1)
    for t, f in enumerate(bands):
        F = Tensor(f.reshape(C, 1, 1))
        res = K.spectral_step(st_, F, w)
        out = K.spatial_step(F, st_, res.kv, w)
        np.testing.assert_allclose(out.data.ravel(), outs[t], atol=1e-6, rtol=0)
        st_ = res.state
        np.testing.assert_allclose(st_.S.data.ravel(), states[t], atol=1e-6, rtol=0)
        np.testing.assert_allclose(st_.C_state.data.ravel(), cells[t], atol=1e-6, rtol=0)
    seq = np.stack(bands).reshape(B, C, 1, 1)
    np.testing.assert_allclose(K.ssrt_forward(seq, w).data.reshape(B, C), outs, atol=1e-6, rtol=0)


def test_zero_forget_gate_gives_candidate_exactly(rng, f64):
    w = random_weights(4, 2, rng)
    w.w_gate_f.data[:] = 0
    S = K.SpectralState(Tensor(rng.standard_normal((4, 4, 4))), Tensor(rng.standard_normal((4, 4, 4))))
    res = K.spectral_step(S, rng.standard_normal((4, 4, 4)), w)
    h, fg, _ = res.gates
    assert not fg.data.any()
    np.testing.assert_array_equal(K._chw_to_windows(res.state.C_state, w).data, h.data)


def test_zero_reset_gate_passes_state_exactly(rng, f64):
    w = random_weights(4, 2, rng)
    w.w_gate_r.data[:] = 0
    S = K.SpectralState(Tensor(rng.standard_normal((4, 4, 4))), Tensor(rng.standard_normal((4, 4, 4))))
    res = K.spectral_step(S, rng.standard_normal((4, 4, 4)), w)
    np.testing.assert_array_equal(res.s_star.data, S.S.data)


def test_spatial_identity_paths(rng, f64):
    w = random_weights(4, 2, rng)
    zero_attention(w)
    F = Tensor(rng.standard_normal((4, 4, 4)))
    S = K.SpectralState.zeros(4, 4, 4)
    kv = K.spectral_step(S, F, w).kv
    out = K.spatial_step(F, S, kv, w)
    f_last = np.moveaxis(F.data, 0, -1)
    expected = T.mlp_forward(Tensor(f_last), w.mlp_spatial).data + f_last
    np.testing.assert_allclose(np.moveaxis(out.data, 0, -1), expected, atol=1e-14)
    zero_mlps(w)
    np.testing.assert_array_equal(K.spatial_step(F, S, kv, w).data, F.data)


def test_stale_key_values_rejected(rng, f64):
    w = random_weights(4, 2, rng)
    S = K.SpectralState.zeros(4, 4, 4)
    F1, F2 = rng.standard_normal((4, 4, 4)), rng.standard_normal((4, 4, 4))
    kv = K.spectral_step(S, F1, w).kv
    with pytest.raises(A.StaleKeyValueError):
        K.spatial_step(F2, S, kv, w)
    K.spatial_step(F1, S, kv, w)


def test_one_projection_per_band_serves_both_branches(rng, f64):
    w = random_weights(4, 2, rng)
    seq = rng.standard_normal((5, 4, 4, 4))
    before = A.PROJECTION_CALLS["shared_kv"]
    K.ssrt_forward(seq, w)
    assert A.PROJECTION_CALLS["shared_kv"] - before == 5


def test_backward_direction_is_reversed_forward(rng, f64):
    w = random_weights(4, 2, rng, shifted=True)
    seq = rng.standard_normal((4, 4, 4, 4))
    bwd = K.ssrt_forward(seq, w, "bwd").data
    ref = K.ssrt_forward(seq[::-1].copy(), w, "fwd").data[::-1]
    np.testing.assert_array_equal(bwd, ref)


def test_single_band_equals_spatial_step_from_zero_state(rng, f64):
    w = random_weights(4, 2, rng)
    F = Tensor(rng.standard_normal((4, 4, 4)))
    S = K.SpectralState.zeros(4, 4, 4)
    expected = K.spatial_step(F, S, K.spectral_step(S, F, w).kv, w).data
    np.testing.assert_allclose(K.ssrt_forward(F.data[None], w).data[0], expected, atol=1e-14)


def test_bidirectional_is_sum_of_directions(rng, f64):
    wf, wb = random_weights(4, 2, rng, True), random_weights(4, 2, rng, True)
    seq = rng.standard_normal((3, 4, 4, 4))
    both = K.bidirectional_ssrt(seq, wf, wb).data
    explicit = K.ssrt_forward(seq, wf, "fwd").data + K.ssrt_forward(seq, wb, "bwd").data
    np.testing.assert_allclose(both, explicit, atol=1e-14)


def test_bidirectional_zero_backward_adds_identity(rng, f64):
    wf, wb = random_weights(4, 2, rng), random_weights(4, 2, rng)
    zero_attention(wb)
    zero_mlps(wb)
    seq = rng.standard_normal((3, 4, 4, 4))
    np.testing.assert_allclose(K.bidirectional_ssrt(seq, wf, wb).data,
                               K.ssrt_forward(seq, wf).data + seq, atol=1e-14)


def test_palindromic_input_gives_palindromic_output(rng, f64):
    w = random_weights(4, 2, rng)
    half = rng.standard_normal((2, 4, 4, 4))
    seq = np.concatenate([half, rng.standard_normal((1, 4, 4, 4)), half[::-1]])
    out = K.bidirectional_ssrt(seq, w, w).data
    np.testing.assert_array_equal(out, out[::-1])


def test_single_band_equal_weights_doubles(rng, f64):
    w = random_weights(4, 2, rng)
    seq = rng.standard_normal((1, 4, 4, 4))
    np.testing.assert_allclose(K.bidirectional_ssrt(seq, w, w).data, 2 * K.ssrt_forward(seq, w).data,
                               atol=1e-14)


@given(st.integers(0, 10_000), st.booleans())
def test_gate_ranges(seed, shifted):
    rng = np.random.default_rng(seed)
    with T.precision(np.float64):
        w = random_weights(4, 2, rng, shifted, scale=0.5)
        S = K.SpectralState(Tensor(rng.standard_normal((4, 4, 4))),
                            Tensor(rng.uniform(-1, 1, (4, 4, 4))))
        h, fg, r = K.spectral_step(S, rng.standard_normal((4, 4, 4)), w).gates
        assert np.all((fg.data >= 0) & (fg.data < 1)) and np.all((r.data >= 0) & (r.data < 1))
        assert np.all(np.abs(h.data) < 1)


def test_gates_saturate_but_never_overshoot(rng, f64):
    # tanh rounds to exactly 1 past |x| ~ 19, so the open bound becomes closed
    w = random_weights(4, 2, rng, scale=20.0)
    S = K.SpectralState(Tensor(rng.standard_normal((4, 4, 4)) * 10), Tensor(np.zeros((4, 4, 4))))
    h, fg, r = K.spectral_step(S, rng.standard_normal((4, 4, 4)) * 10, w).gates
    for g in (fg, r):
        assert g.data.min() >= 0 and g.data.max() <= 1
    assert np.abs(h.data).max() <= 1


def test_band_count_freedom(rng):
    w = K.SsrtBlockWeights.init(4, 2, rng, shifted=True)
    for B in (1, 2, 8, 31, 46):
        out = K.ssrt_forward(rng.standard_normal((B, 4, 4, 4)), w)
        assert out.shape == (B, 4, 4, 4)


def test_state_stays_bounded_over_long_sequences(rng, f64):
    w = random_weights(4, 2, rng, scale=1.0)
    for m in (w.mlp_spectral, w.mlp_spatial):
        for t in m.tensors().values():
            t.data = rng.uniform(-0.1, 0.1, t.shape)
    S = K.SpectralState.zeros(4, 2, 2)
    peaks = []
    for _ in range(200):
        S = K.spectral_step(S, rng.uniform(-1, 1, (4, 2, 2)), w).state
        peaks.append(np.abs(S.S.data).max())
    assert np.isfinite(peaks).all()
    assert max(peaks) < 10.0
    assert max(peaks[150:]) <= 2 * max(peaks[:150])


def test_shifted_block_keeps_constant_map_constant(rng, f64):
    w = random_weights(4, 4, rng, shifted=True)
    seq = np.broadcast_to(rng.standard_normal((3, 4, 1, 1)), (3, 4, 8, 8)).copy()
    out = K.ssrt_forward(seq, w).data
    np.testing.assert_allclose(out, np.broadcast_to(out[:, :, :1, :1], out.shape), atol=1e-12)


def test_determinism(rng):
    w = K.SsrtBlockWeights.init(4, 2, rng, shifted=True)
    seq = rng.standard_normal((3, 4, 4, 4))
    assert np.array_equal(K.ssrt_forward(seq, w).data, K.ssrt_forward(seq, w).data)


def test_errors(rng):
    w = K.SsrtBlockWeights.init(4, 2, rng)
    with pytest.raises(ValueError, match="empty"):
        K.ssrt_forward(np.zeros((0, 4, 4, 4)), w)
    with pytest.raises(ValueError, match="does not divide"):
        K.ssrt_forward(np.zeros((2, 4, 3, 4)), w)
    with pytest.raises(ValueError, match="direction"):
        K.ssrt_forward(np.zeros((2, 4, 4, 4)), w, "sideways")


def test_block_gradient_check():
    from ssrt import gradsuite

    assert gradsuite.block_check(64) < 1e-6
