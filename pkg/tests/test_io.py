import struct

import numpy as np
import pytest

from ssrt import io
from ssrt import tensor as T
from ssrt.noise import NoiseSpec
from ssrt.unet import UnetConfig, UnetWeights, denoise


@pytest.mark.parametrize("dtype,code", [(np.float32, 1), (np.float64, 2)])
def test_cube_roundtrip_and_header(tmp_path, rng, dtype, code):
    cube = rng.random((3, 5, 4)).astype(dtype)
    path = tmp_path / "c.hsic"
    io.write_cube(path, cube)
    raw = path.read_bytes()
    assert raw[:4] == b"HSIC"
    assert struct.unpack("<HHIII", raw[4:20]) == (1, code, 3, 5, 4)
    assert len(raw) == 20 + cube.nbytes
    back = io.read_cube(path)
    assert back.dtype == dtype and np.array_equal(back, cube)


def test_cube_payload_is_band_major_little_endian(tmp_path):
    cube = np.arange(6, dtype=np.float32).reshape(1, 2, 3)
    io.write_cube(tmp_path / "c", cube)
    assert np.frombuffer((tmp_path / "c").read_bytes()[20:], "<f4").tolist() == [0, 1, 2, 3, 4, 5]


@pytest.mark.parametrize("mutate,msg", [
    (lambda b: b"XXXX" + b[4:], "magic"),
    (lambda b: b[:-1], "payload"),
    (lambda b: b + b"\0\0\0\0", "payload"),
    (lambda b: b[:4] + struct.pack("<H", 9) + b[6:], "version"),
    (lambda b: b[:6] + struct.pack("<H", 7) + b[8:], "dtype code"),
    (lambda b: b[:10], "truncated"),
])
def test_cube_reader_is_strict(tmp_path, mutate, msg):
    path = tmp_path / "c"
    io.write_cube(path, np.zeros((2, 2, 2), np.float32))
    path.write_bytes(mutate(path.read_bytes()))
    with pytest.raises(io.DataError, match=msg):
        io.read_cube(path)


def test_cube_writer_rejects_bad_input(tmp_path):
    with pytest.raises(ValueError):
        io.write_cube(tmp_path / "c", np.zeros((2, 2)))
    with pytest.raises(ValueError):
        io.write_cube(tmp_path / "c", np.zeros((1, 2, 2), np.int32))


def test_missing_cube_is_data_error(tmp_path):
    with pytest.raises(io.DataError):
        io.read_cube(tmp_path / "nope")


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_checkpoint_roundtrip_bit_exact_forward(tmp_path, rng, dtype):
    cfg = UnetConfig(channels=4, window=2, test_mode=True)
    with T.precision(dtype):
        w = UnetWeights.init(cfg, seed=3)
    ck = io.weights_to_checkpoint(w, {"train.step": np.array([7])})
    io.save_checkpoint(tmp_path / "w.ssrtw", ck)
    w2 = io.weights_from_checkpoint(io.load_checkpoint(tmp_path / "w.ssrtw"))
    assert w2.config == cfg
    for (n1, a), (n2, b) in zip(w.named_parameters().items(), w2.named_parameters().items()):
        assert n1 == n2 and a.dtype == b.dtype and np.array_equal(a.data, b.data)
    assert w2.extra["train.step"][0] == 7
    y = rng.random((3, 8, 8))
    with T.precision(dtype):
        assert np.array_equal(denoise(y, w), denoise(y, w2))


def test_checkpoint_layout(tmp_path):
    ck = io.Checkpoint(12, 8, 4, {"a": np.array([[1.0, 2.0]])})
    io.save_checkpoint(tmp_path / "w", ck)
    raw = (tmp_path / "w").read_bytes()
    assert raw[:6] == b"SSRTW\0"
    assert struct.unpack("<IIII", raw[6:22]) == (1, 12, 8, 4)
    assert struct.unpack("<I", raw[22:26]) == (1,) and raw[26:27] == b"a"
    assert struct.unpack("<III", raw[27:39]) == (2, 1, 2)
    assert np.frombuffer(raw[39:], "<f4").tolist() == [1.0, 2.0]


def test_checkpoint_corruption_detected(tmp_path):
    io.save_checkpoint(tmp_path / "w", io.Checkpoint(4, 2, 8, {"a": np.ones(5)}))
    raw = (tmp_path / "w").read_bytes()
    (tmp_path / "t").write_bytes(raw[:-3])
    with pytest.raises(io.DataError):
        io.load_checkpoint(tmp_path / "t")
    (tmp_path / "m").write_bytes(b"SSRTX\0" + raw[6:])
    with pytest.raises(io.DataError, match="magic"):
        io.load_checkpoint(tmp_path / "m")


def test_checkpoint_missing_tensor(tmp_path):
    w = UnetWeights.init(UnetConfig(channels=4, window=2, test_mode=True))
    ck = io.weights_to_checkpoint(w)
    del ck.tensors["image.k"]
    with pytest.raises(io.DataError, match="image.k"):
        io.weights_from_checkpoint(ck)


def test_manifest_parse_and_validate(tmp_path):
    io.write_cube(tmp_path / "a.hsic", np.zeros((2, 2, 2), np.float32))
    (tmp_path / "sub").mkdir()
    io.write_cube(tmp_path / "sub" / "b.hsic", np.zeros((2, 2, 2), np.float32))
    (tmp_path / "m.txt").write_text(
        "# comment\ntrain a.hsic\n\nval sub/b.hsic kind=mixture sigma_max=95 seed=4  # trailing\n")
    m = io.load_manifest(tmp_path / "m.txt")
    assert [e.split for e in m.entries] == ["train", "val"]
    assert m.split("val")[0].noise == NoiseSpec.mixture(4)
    assert m.split("train")[0].path == tmp_path / "a.hsic"


@pytest.mark.parametrize("text", ["train", "holdout a.hsic", "train a.hsic sigma_max=abc",
                                  "train missing.hsic"])
def test_manifest_errors(tmp_path, text):
    io.write_cube(tmp_path / "a.hsic", np.zeros((2, 2, 2), np.float32))
    (tmp_path / "m.txt").write_text(text + "\n")
    with pytest.raises(io.DataError):
        io.load_manifest(tmp_path / "m.txt")


def test_manifest_write_roundtrip(tmp_path):
    entries = [io.ManifestEntry("train", tmp_path / "x.hsic"),
               io.ManifestEntry("test", tmp_path / "y.hsic", NoiseSpec.mixture(3))]
    io.write_manifest(tmp_path / "m.txt", entries)
    assert io.parse_manifest((tmp_path / "m.txt").read_text()).entries == entries
