import numpy as np
import pytest

from ssrt import tensor as T
from ssrt import unet as U
from ssrt.tensor import Tensor
from tests.test_tensor import naive_conv3d


def micro(seed=0, **kw):
    cfg = U.UnetConfig(channels=4, window=2, test_mode=True, **kw)
    return cfg, U.UnetWeights.init(cfg, seed=seed)


def zero_blocks(layer):
    for blk in layer.blocks:
        for name, t in blk.tensors().items():
            t.data[:] = 0


def test_config_invariants():
    cfg = U.UnetConfig()
    assert cfg.blocks_per_layer == (2, 2, 6, 2, 2)
    assert cfg.pairs == (1, 1, 3, 1, 1)
    assert all(b == 2 * p for b, p in zip(cfg.blocks_per_layer, cfg.pairs))
    assert cfg.multiple == 32
    with pytest.raises(ValueError, match="even"):
        U.UnetConfig(channels=5)


def test_blocks_alternate_shift():
    w = U.UnetWeights.init(U.UnetConfig(channels=4, window=2))
    for layer in w.layers:
        assert [b.fwd.shifted for b in layer.blocks] == [i % 2 == 1 for i in range(len(layer.blocks))]


def test_parameter_count_depends_only_on_width_and_window():
    a = U.UnetWeights.init(U.UnetConfig(12, 8), seed=0).num_parameters()
    b = U.UnetWeights.init(U.UnetConfig(12, 8), seed=5).num_parameters()
    assert a == b
    # same order of magnitude as a 0.6M-parameter model
    assert 6e4 < a < 6e6


@pytest.mark.parametrize("L", [1, 2])
def test_zero_block_layer_composition(rng, f64, L):
    # a bidirectional block with zero attention and MLP weights returns
    # fwd(x) + bwd(x) = 2x, so L blocks give 2**L x; with a delta conv the
    # layer output is G((2**L + 1) F0)
    C = 4
    blocks = [U.BidirectionalBlock.init(C, 2, rng, shifted=bool(i % 2)) for i in range(L)]
    for sampler, sk in (("none", None), ("down", None), ("up", None)):
        if sampler == "down":
            k = np.zeros((C, C, 2, 2))
            k[np.arange(C), np.arange(C)] = 0.25
            sk = T.parameter(k)
        elif sampler == "up":
            sk = T.parameter(U._delta(C, 1, 3, 3))
        layer = U.Layer(blocks, T.parameter(U._delta(C, 3, 3, 3)), T.parameter(np.zeros(C)), sampler, sk)
        zero_blocks(layer)
        f0 = Tensor(rng.standard_normal((3, 1, 4, 4, C)))
        out = U.layer_forward(f0, layer).data
        expected = U._sample(Tensor((2 ** L + 1) * f0.data), layer).data
        np.testing.assert_allclose(out, expected, atol=1e-12)


def test_zero_input_zero_output():
    cfg, w = micro()
    with T.no_grad():
        assert not U.layer_forward(Tensor(np.zeros((2, 1, 8, 8, 4))), w.layers[0]).data.any()
        assert not U.unet_forward(np.zeros((2, 8, 8)), w).data.any()


def test_sampler_shape_laws(rng):
    cfg, w = micro()
    x = Tensor(rng.standard_normal((3, 2, 8, 8, 4)))
    assert U.downsample(x, w.layers[0].sampler_k).shape == (3, 2, 4, 4, 4)
    assert U.upsample(x, w.layers[2].sampler_k).shape == (3, 2, 16, 16, 4)
    assert U._sample(x, w.layers[4]).shape == x.shape
    with pytest.raises(ValueError, match="even"):
        U.downsample(Tensor(np.zeros((1, 1, 3, 4, 4))), w.layers[0].sampler_k)


def test_downsample_constant_stays_constant():
    cfg, w = micro()
    x = Tensor(np.full((2, 1, 8, 8, 4), 0.75))
    np.testing.assert_allclose(U.downsample(x, w.layers[0].sampler_k).data, 0.75, rtol=1e-6)


def test_downsample_hand_computed(f64):
    k = T.parameter(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    ramp = np.arange(16.0).reshape(1, 1, 4, 4, 1)
    np.testing.assert_array_equal(U.downsample(Tensor(ramp), k).data[0, 0, :, :, 0], [[34, 54], [114, 134]])
    checker = (np.indices((4, 4)).sum(0) % 2).astype(float).reshape(1, 1, 4, 4, 1)
    np.testing.assert_array_equal(U.downsample(Tensor(checker), k).data[0, 0, :, :, 0], [[5, 5], [5, 5]])


def test_upsample_constant_and_nearest_law(f64):
    delta = T.parameter(U._delta(1, 1, 3, 3))
    const = Tensor(np.full((1, 1, 3, 3, 1), 2.5))
    np.testing.assert_array_equal(U.upsample(const, delta).data, 2.5)
    pix = np.zeros((1, 1, 3, 3, 1))
    pix[0, 0, 1, 2, 0] = 1.0
    up = T.upsample_nearest2(Tensor(pix), axes=(2, 3)).data[0, 0, :, :, 0]
    assert np.argwhere(up).tolist() == [[2, 4], [2, 5], [3, 4], [3, 5]]


def test_upsample_matches_loop_oracle(rng, f64):
    x = rng.standard_normal((2, 1, 3, 2, 3))
    k = rng.standard_normal((3, 3, 1, 3, 3))
    up = x.repeat(2, axis=2).repeat(2, axis=3)
    np.testing.assert_allclose(U.upsample(Tensor(x), Tensor(k)).data, naive_conv3d(up, k), atol=1e-12)


def test_identity_configuration_returns_input(rng):
    cfg, w = micro()
    for p in w.parameters():
        p.data[:] = 0
    y = rng.random((3, 8, 8)).astype(np.float32)
    with T.no_grad():
        np.testing.assert_array_equal(U.unet_forward(y, w).data, y)


@pytest.mark.parametrize("B", [3, 31, 46])
def test_output_shape_matches_input(rng, B):
    cfg, w = micro()
    with T.no_grad():
        assert U.unet_forward(rng.random((B, 8, 8)), w).shape == (B, 8, 8)


def test_batch_and_single_agree(rng):
    cfg, w = micro()
    y = rng.random((2, 3, 8, 8))
    with T.no_grad():
        batch = U.unet_forward(y, w).data
        single = U.unet_forward(y[1], w).data
    np.testing.assert_allclose(batch[1], single, atol=1e-6)


def test_padding_transparency(rng):
    cfg, w = micro()
    y = rng.random((2, 13, 11))
    padded, _ = U.pad_to_multiple(y, cfg.multiple)
    assert padded.shape == (2, 16, 16)
    with T.no_grad():
        auto = U.unet_forward(y, w).data
        native = U.unet_forward(padded, w).data[:, :13, :11]
    assert auto.shape == y.shape
    np.testing.assert_array_equal(auto, native)


def test_tiny_inputs_use_symmetric_padding(rng):
    cfg, w = micro()
    with T.no_grad():
        assert U.unet_forward(rng.random((2, 3, 2)), w).shape == (2, 3, 2)


def test_tensor_input_must_be_divisible():
    cfg, w = micro()
    with pytest.raises(ValueError, match="multiples"):
        U.unet_forward(Tensor(np.zeros((2, 6, 8))), w)


def test_nonfinite_weights_rejected():
    cfg, w = micro()
    w.image_k.data[0, 0, 0, 0, 0] = np.nan
    with pytest.raises(FloatingPointError, match="image.k"):
        U.unet_forward(np.zeros((2, 8, 8)), w)


def test_outer_residual_toggle(rng):
    y = rng.random((2, 8, 8))
    _, w_on = micro(seed=3)
    _, w_off = micro(seed=3, outer_residual=False)
    with T.no_grad():
        diff = U.unet_forward(y, w_on).data - U.unet_forward(y, w_off).data
    np.testing.assert_allclose(diff, y, atol=1e-6)


def test_remat_gives_same_gradients(rng):
    cfg, w = micro()
    y = Tensor(rng.random((1, 2, 8, 8)))
    grads = []
    for remat in (False, True):
        w.zero_grad()
        T.sum_all(U.unet_forward(y, w, remat=remat)).backward()
        grads.append([p.grad.copy() for p in w.parameters()])
    for a, b in zip(*grads):
        np.testing.assert_allclose(a, b, rtol=1e-5, atol=1e-7)


def test_denoise_keeps_dtype(rng):
    cfg, w = micro()
    out = U.denoise(rng.random((2, 8, 8)), w)
    assert out.dtype == np.float64 and out.shape == (2, 8, 8)


def test_determinism(rng):
    cfg, w = micro()
    y = rng.random((3, 8, 8))
    assert np.array_equal(U.denoise(y, w), U.denoise(y, w))


def test_micro_unet_gradient_check():
    from ssrt import gradsuite

    assert gradsuite.unet_check(64) < 1e-6
