"""On-disk formats: HSI cube files, weight checkpoints and dataset manifests.

All integers and scalars are little-endian.

Cube file::

    "HSIC" | version u16 | dtype code u16 (1=f32, 2=f64) | B, H, W u32 | payload

Checkpoint::

    "SSRTW\\0" | version u32 | C u32 | M u32 | scalar width u32 (4 or 8)
    then until EOF: name length u32 | utf-8 name | rank u32 | extents u32 x rank | scalars
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .noise import NoiseSpec


class DataError(Exception):
    """A file is missing, truncated or not in the expected format."""


CUBE_MAGIC = b"HSIC"
CUBE_VERSION = 1
_CUBE_HEADER = struct.Struct("<4sHHIII")
_DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def write_cube(path, cube: np.ndarray) -> None:
    cube = np.asarray(cube)
    if cube.ndim != 3:
        raise ValueError(f"cube must be B x H x W, got shape {cube.shape}")
    dt = np.dtype(cube.dtype).newbyteorder("<")
    if dt not in _DTYPE_CODES:
        raise ValueError(f"cube dtype must be float32 or float64, got {cube.dtype}")
    B, H, W = cube.shape
    with open(path, "wb") as fh:
        fh.write(_CUBE_HEADER.pack(CUBE_MAGIC, CUBE_VERSION, _DTYPE_CODES[dt], B, H, W))
        fh.write(np.ascontiguousarray(cube, dtype=dt).tobytes())


def read_cube(path) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"cannot read cube {path}: {e}") from e
    if len(raw) < _CUBE_HEADER.size:
        raise DataError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, code, B, H, W = _CUBE_HEADER.unpack_from(raw)
    if magic != CUBE_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if version != CUBE_VERSION:
        raise DataError(f"{path}: unsupported cube version {version}")
    if code not in _CODE_DTYPES:
        raise DataError(f"{path}: unknown dtype code {code}")
    dt = _CODE_DTYPES[code]
    expected = B * H * W * dt.itemsize
    payload = len(raw) - _CUBE_HEADER.size
    if payload != expected:
        raise DataError(f"{path}: payload is {payload} bytes, header {B}x{H}x{W} needs {expected}")
    arr = np.frombuffer(raw, dtype=dt, offset=_CUBE_HEADER.size).reshape(B, H, W)
    return arr.astype(dt.newbyteorder("="))


CKPT_MAGIC = b"SSRTW\0"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<6sIIII")
_U32 = struct.Struct("<I")


@dataclass
class Checkpoint:
    channels: int
    window: int
    scalar_width: int
    tensors: dict = field(default_factory=dict)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write atomically (temp file then rename) so a crash never leaves a partial file."""
    if ckpt.scalar_width not in (4, 8):
        raise ValueError(f"scalar width must be 4 or 8, got {ckpt.scalar_width}")
    dt = np.dtype(f"<f{ckpt.scalar_width}")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, ckpt.channels, ckpt.window, ckpt.scalar_width))
        for name, arr in ckpt.tensors.items():
            arr = np.asarray(arr)
            key = name.encode("utf-8")
            fh.write(_U32.pack(len(key)) + key + _U32.pack(arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=dt).tobytes())
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from e
    if len(raw) < _CKPT_HEADER.size:
        raise DataError(f"{path}: truncated checkpoint header")
    magic, version, C, M, width = _CKPT_HEADER.unpack_from(raw)
    if magic != CKPT_MAGIC:
        raise DataError(f"{path}: bad checkpoint magic {magic!r}")
    if version != CKPT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    if width not in (4, 8):
        raise DataError(f"{path}: bad scalar width {width}")
    dt = np.dtype(f"<f{width}")
    tensors = {}
    pos = _CKPT_HEADER.size
    try:
        while pos < len(raw):
            (n,) = _U32.unpack_from(raw, pos)
            pos += 4
            name = raw[pos:pos + n].decode("utf-8")
            if len(name.encode()) != n:
                raise DataError(f"{path}: truncated tensor name")
            pos += n
            (rank,) = _U32.unpack_from(raw, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            nbytes = int(np.prod(shape, dtype=np.int64)) * width
            if pos + nbytes > len(raw):
                raise DataError(f"{path}: tensor {name!r} runs past end of file")
            tensors[name] = np.frombuffer(raw, dtype=dt, count=nbytes // width, offset=pos) \
                .reshape(shape).astype(dt.newbyteorder("="))
            pos += nbytes
    except (struct.error, UnicodeDecodeError) as e:
        raise DataError(f"{path}: corrupt checkpoint record: {e}") from e
    return Checkpoint(C, M, width, tensors)


SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class ManifestEntry:
    split: str
    path: Path
    noise: NoiseSpec | None = None


@dataclass
class Manifest:
    entries: list

    def split(self, name: str) -> list:
        return [e for e in self.entries if e.split == name]


def parse_manifest(text: str, base: Path = Path(".")) -> Manifest:
    """``split path [noise key=value ...]`` per line; ``#`` starts a comment."""
    entries = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) < 2:
            raise DataError(f"manifest line {lineno}: expected 'split path [key=value ...]'")
        split, rel, rest = parts[0], parts[1], parts[2:]
        if split not in SPLITS:
            raise DataError(f"manifest line {lineno}: split must be one of {SPLITS}, got {split!r}")
        try:
            noise = NoiseSpec.from_text(" ".join(rest)) if rest else None
        except (ValueError, TypeError) as e:
            raise DataError(f"manifest line {lineno}: {e}") from e
        p = Path(rel)
        entries.append(ManifestEntry(split, p if p.is_absolute() else base / p, noise))
    return Manifest(entries)


def load_manifest(path) -> Manifest:
    """Parse a manifest and check that every referenced cube exists and parses."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise DataError(f"cannot read manifest {path}: {e}") from e
    m = parse_manifest(text, path.parent)
    for e in m.entries:
        read_cube(e.path)
    return m


def write_manifest(path, entries) -> None:
    lines = []
    for e in entries:
        extra = " " + e.noise.to_text().replace("\n", " ").strip() if e.noise else ""
        lines.append(f"{e.split} {e.path}{extra}")
    Path(path).write_text("\n".join(lines) + "\n")


def weights_to_checkpoint(w, extra: dict | None = None) -> Checkpoint:
    """Pack U-Net weights plus optional extra named arrays (optimizer state, counters)."""
    cfg = w.config
    params = w.named_parameters()
    width = next(iter(params.values())).data.dtype.itemsize
    tensors = {
        "meta.test_mode": np.array([float(cfg.test_mode)]),
        "meta.outer_residual": np.array([float(cfg.outer_residual)]),
        "meta.blocks_per_layer": np.array(cfg.blocks_per_layer, dtype=float),
    }
    tensors.update({name: p.data for name, p in params.items()})
    tensors.update(extra or {})
    return Checkpoint(cfg.channels, cfg.window, width, tensors)


def weights_from_checkpoint(ckpt: Checkpoint):
    """Rebuild ``UnetWeights`` in the checkpoint's scalar width; extra arrays land in ``.extra``."""
    from . import tensor as T
    from .unet import UnetConfig, UnetWeights

    t = ckpt.tensors
    try:
        cfg = UnetConfig(channels=ckpt.channels, window=ckpt.window,
                         test_mode=bool(t["meta.test_mode"][0]),
                         outer_residual=bool(t["meta.outer_residual"][0]))
    except KeyError as e:
        raise DataError(f"checkpoint lacks config entry {e}") from e
    except ValueError as e:
        raise DataError(f"checkpoint config invalid: {e}") from e
    if tuple(int(v) for v in t.get("meta.blocks_per_layer", ())) != cfg.blocks_per_layer:
        raise DataError("checkpoint block layout does not match its test-mode flag")
    dtype = np.float32 if ckpt.scalar_width == 4 else np.float64
    with T.precision(dtype):
        w = UnetWeights.init(cfg, seed=0)
    params = w.named_parameters()
    for name, p in params.items():
        if name not in t:
            raise DataError(f"checkpoint is missing tensor {name!r}")
        if t[name].shape != p.shape:
            raise DataError(f"tensor {name!r} has shape {t[name].shape}, model expects {p.shape}")
        p.data = t[name].astype(dtype, copy=True)
    w.extra = {k: v for k, v in t.items() if k not in params and not k.startswith("meta.")}
    return w
