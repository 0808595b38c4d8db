"""Loss, Adam, the step-decay schedule, patch sampling and the training loop."""

from __future__ import annotations

import json
import math
import os
import queue
import threading
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.ndimage import zoom

from . import io
from . import rng as R
from . import tensor as T
from .metrics import psnr
from .noise import NoiseSpec, apply_noise
from .tensor import Tensor
from .unet import UnetConfig, UnetWeights, denoise, unet_forward


class TrainingDiverged(FloatingPointError):
    """The loss became non-finite; the last good checkpoint is kept on disk."""


RESIZE_FACTORS = (0.5, 1.0, 1.5)


@dataclass
class TrainConfig:
    epochs: int = 15
    lr0: float = 1e-4
    decay_epochs: tuple = (8, 12)
    decay_factor: float = 0.3
    patch: tuple = (64, 64, 31)
    batch: int = 4
    seed: int = 0
    flip_h: bool = True
    flip_v: bool = True
    crop: bool = True
    resize: bool = True
    # None: one pass over the training pixels per epoch
    steps_per_epoch: int | None = None
    noise: str = "kind=gaussian sigma_max=55"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    remat: bool = False

    def __post_init__(self):
        self.decay_epochs = tuple(int(d) for d in self.decay_epochs)
        self.patch = tuple(int(p) for p in self.patch)
        if len(self.patch) != 3 or min(self.patch) < 1:
            raise ValueError(f"patch must be (H, W, B) with positive extents, got {self.patch}")
        if self.batch < 1 or self.epochs < 1:
            raise ValueError("batch and epochs must be positive")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ValueError("steps_per_epoch must be positive")
        NoiseSpec.from_text(self.noise)

    @property
    def noise_spec(self) -> NoiseSpec:
        return NoiseSpec.from_text(self.noise)

    def lr(self, epoch: int) -> float:
        """Learning rate for a 1-based epoch."""
        n = sum(epoch >= d for d in self.decay_epochs)
        return self.lr0 * self.decay_factor ** n

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        raw = json.loads(text)
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known - {"unet"}
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**{k: v for k, v in raw.items() if k in known})


def loss_mse(pred, target) -> Tensor:
    """(1/N) sum_i ||pred_i - target_i||_F^2 over a batch of N cubes (N=1 for a single cube)."""
    pred, target = T.as_tensor(pred), T.as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: prediction {pred.shape} vs target {target.shape}")
    n = pred.shape[0] if pred.ndim == 4 else 1
    d = pred - target
    return T.sum_all(d * d) * (1.0 / n)


def adam_update(w, g, m, v, t: int, lr: float, beta1=0.9, beta2=0.999, eps=1e-8) -> tuple:
    """One bias-corrected Adam update; returns new (w, m, v)."""
    m = beta1 * m + (1 - beta1) * g
    v = beta2 * v + (1 - beta2) * (g * g)
    mhat = m / (1 - beta1 ** t)
    vhat = v / (1 - beta2 ** t)
    return w - lr * mhat / (np.sqrt(vhat) + eps), m, v


@dataclass
class Adam:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    skipped: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict, lr: float) -> bool:
        """Update ``params`` in place from their ``.grad``; False if skipped on a non-finite gradient."""
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
        if not all(np.isfinite(g).all() for g in grads.values()):
            self.skipped += 1
            return False
        self.t += 1
        for k, p in params.items():
            m = self.m.get(k, np.zeros_like(p.data))
            v = self.v.get(k, np.zeros_like(p.data))
            p.data, self.m[k], self.v[k] = adam_update(p.data, grads[k], m, v, self.t, lr,
                                                       self.beta1, self.beta2, self.eps)
        return True

    def state_arrays(self) -> dict:
        out = {"adam.t": np.array([self.t]), "adam.skipped": np.array([self.skipped]),
               "adam.beta1": np.array([self.beta1]), "adam.beta2": np.array([self.beta2]),
               "adam.eps": np.array([self.eps])}
        out.update({f"adam.m.{k}": a for k, a in self.m.items()})
        out.update({f"adam.v.{k}": a for k, a in self.v.items()})
        return out

    @classmethod
    def from_arrays(cls, arrays: dict, beta1: float, beta2: float, eps: float) -> "Adam":
        # hyperparameters come from the run config; the stored copies are for provenance only
        opt = cls(beta1, beta2, eps, int(arrays["adam.t"][0]), int(arrays["adam.skipped"][0]))
        for k, a in arrays.items():
            if k.startswith("adam.m."):
                opt.m[k[7:]] = a
            elif k.startswith("adam.v."):
                opt.v[k[7:]] = a
        return opt


def crop_offset(g: np.random.Generator, extent: tuple, size: tuple) -> tuple:
    """Uniform top-left corner for a ``size`` window inside ``extent``."""
    return tuple(int(g.integers(0, e - s + 1)) for e, s in zip(extent, size))


def _fit(a: np.ndarray, h: int, w: int) -> np.ndarray:
    """Center-crop or reflect-pad the last two axes to (h, w)."""
    H, W = a.shape[-2:]
    if H > h:
        a = a[..., (H - h) // 2:(H - h) // 2 + h, :]
    if W > w:
        a = a[..., (W - w) // 2:(W - w) // 2 + w]
    ph, pw = h - a.shape[-2], w - a.shape[-1]
    if ph or pw:
        a = np.pad(a, [(0, 0)] * (a.ndim - 2) + [(ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2)],
                   mode="symmetric")
    return a


def augment_patch(cube: np.ndarray, cfg: TrainConfig, g: np.random.Generator) -> np.ndarray:
    """Crop (with optional resize) then flip one clean patch out of a B x H x W cube."""
    ph, pw, pb = cfg.patch
    B, H, W = cube.shape
    if B < pb or H < ph or W < pw:
        raise ValueError(f"cube extents (B={B}, H={H}, W={W}) smaller than patch (B={pb}, H={ph}, W={pw})")
    scale = RESIZE_FACTORS[g.integers(len(RESIZE_FACTORS))] if cfg.resize else 1.0
    # source window that becomes the patch after resizing
    sh, sw = min(H, math.ceil(ph / scale)), min(W, math.ceil(pw / scale))
    if cfg.crop:
        b0, y0, x0 = crop_offset(g, (B, H, W), (pb, sh, sw))
    else:
        b0 = y0 = x0 = 0
    p = cube[b0:b0 + pb, y0:y0 + sh, x0:x0 + sw]
    if scale != 1.0:
        p = zoom(p, (1, scale, scale), order=1, mode="reflect", grid_mode=True)
    p = _fit(p, ph, pw)
    if cfg.flip_h and g.random() < 0.5:
        p = p[:, :, ::-1]
    if cfg.flip_v and g.random() < 0.5:
        p = p[:, ::-1, :]
    return np.ascontiguousarray(p)


def sample_patches(cubes, cfg: TrainConfig, seed: int, step: int = 0) -> tuple:
    """(noisy, clean) batches of shape (batch, B, H, W); noise is added after augmentation."""
    if isinstance(cubes, np.ndarray):
        cubes = [cubes]
    spec = cfg.noise_spec
    clean, noisy = [], []
    for i in range(cfg.batch):
        g = R.generator(seed, R.PATCH, step, i)
        cube = cubes[int(g.integers(len(cubes)))] if len(cubes) > 1 else cubes[0]
        p = augment_patch(cube, cfg, g)
        clean.append(p)
        noisy.append(apply_noise(p, spec.with_seed(int(g.integers(2 ** 63)))))
    return np.stack(noisy), np.stack(clean)


@dataclass
class TrainResult:
    weights: UnetWeights
    history: list
    checkpoint: Path
    optimizer: Adam


def _grad_norm(params: dict) -> float:
    return math.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64)))
                         for p in params.values() if p.grad is not None))


def _fmt(d: dict) -> str:
    def f(v):
        return f"{v:.6g}" if isinstance(v, float) else str(v)
    return " ".join(f"{k}={f(v)}" for k, v in d.items())


def _batches(cubes, cfg: TrainConfig, start: int, stop: int):
    """Batches for global steps [start, stop); a producer thread prefetches when SSRT_THREADS > 1."""
    threads = int(os.environ.get("SSRT_THREADS", "1") or 1)
    if threads <= 1:
        for s in range(start, stop):
            yield sample_patches(cubes, cfg, cfg.seed, s)
        return
    q: queue.Queue = queue.Queue(maxsize=2)
    done = threading.Event()

    def produce():
        for s in range(start, stop):
            if done.is_set():
                return
            q.put(sample_patches(cubes, cfg, cfg.seed, s))

    th = threading.Thread(target=produce, daemon=True)
    th.start()
    try:
        for _ in range(start, stop):
            yield q.get()
    finally:
        done.set()
        # unblock a producer waiting on a full queue
        while th.is_alive():
            try:
                q.get_nowait()
            except queue.Empty:
                th.join(0.05)


def validation_psnr(w: UnetWeights, entries, cfg: TrainConfig) -> float:
    vals = []
    for k, e in enumerate(entries):
        clean = io.read_cube(e.path).astype(np.float32)
        spec = (e.noise or cfg.noise_spec).with_seed(int(R.generator(cfg.seed, R.VALIDATION, k).integers(2 ** 63)))
        vals.append(psnr(clean, denoise(apply_noise(clean, spec), w)))
    return float(np.mean(vals))


def _save(path: Path, w: UnetWeights, opt: Adam, step: int, epoch: int) -> None:
    extra = opt.state_arrays()
    extra["train.step"] = np.array([step])
    extra["train.epoch"] = np.array([epoch])
    io.save_checkpoint(path, io.weights_to_checkpoint(w, extra))


def train(manifest: io.Manifest, cfg: TrainConfig, ucfg: UnetConfig, out_dir, *,
          init_from=None, resume_from=None, max_steps: int | None = None,
          log: Callable[[str], None] = print) -> TrainResult:
    """Run the schedule; checkpoints land in ``out_dir`` as ``epochNN.ssrtw`` and ``last.ssrtw``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_entries = manifest.split("train")
    if not train_entries:
        raise io.DataError("manifest has no train entries")
    cubes = [io.read_cube(e.path).astype(T.default_dtype()) for e in train_entries]
    ph, pw, _ = cfg.patch
    spe = cfg.steps_per_epoch or max(1, sum(c.shape[1] * c.shape[2] for c in cubes) // (ph * pw * cfg.batch))
    total = cfg.epochs * spe if max_steps is None else min(max_steps, cfg.epochs * spe)

    start = 0
    if resume_from is not None:
        w = io.weights_from_checkpoint(io.load_checkpoint(resume_from))
        opt = Adam.from_arrays(w.extra, cfg.beta1, cfg.beta2, cfg.eps)
        start = int(w.extra["train.step"][0])
    elif init_from is not None:
        w = io.weights_from_checkpoint(io.load_checkpoint(init_from))
        opt = Adam(cfg.beta1, cfg.beta2, cfg.eps)
    else:
        w = UnetWeights.init(ucfg, seed=cfg.seed)
        opt = Adam(cfg.beta1, cfg.beta2, cfg.eps)
    if (w.config.channels, w.config.window) != (ucfg.channels, ucfg.window):
        raise ValueError(f"checkpoint is C={w.config.channels}, M={w.config.window}; "
                         f"run config asks for C={ucfg.channels}, M={ucfg.window}")
    params = w.named_parameters()
    val_entries = manifest.split("val")
    logfile = open(out_dir / "train.log", "a")

    def emit(d: dict) -> None:
        line = _fmt(d)
        logfile.write(line + "\n")
        logfile.flush()
        log(line)

    history = []
    last = out_dir / "last.ssrtw"
    completed = start
    try:
        for step, (noisy, clean) in enumerate(_batches(cubes, cfg, start, total), start):
            epoch = step // spe + 1
            lr = cfg.lr(epoch)
            t0 = time.perf_counter()
            w.zero_grad()
            try:
                loss = loss_mse(unet_forward(Tensor(noisy), w, remat=cfg.remat), clean)
                lv = float(loss.data)
            except FloatingPointError:
                # non-finite weights or attention logits
                lv = math.nan
            if not math.isfinite(lv):
                emit({"event": "diverged", "step": step + 1, "epoch": epoch, "loss": lv})
                if all(np.isfinite(p.data).all() for p in params.values()):
                    _save(last, w, opt, step, epoch)
                raise TrainingDiverged(f"loss became {lv} at step {step + 1}; last good checkpoint: {last}")
            loss.backward()
            gn = _grad_norm(params)
            applied = opt.step(params, lr)
            rec = {"step": step + 1, "epoch": epoch, "lr": lr, "loss": lv, "grad_norm": gn,
                   "skipped": opt.skipped, "sec": round(time.perf_counter() - t0, 3)}
            if not applied:
                rec["event"] = "skip_nonfinite_grad"
            history.append(rec)
            emit(rec)
            if (step + 1) % spe == 0:
                done_epoch = (step + 1) // spe
                erec = {"event": "epoch_end", "epoch": done_epoch}
                if val_entries:
                    erec["val_psnr"] = validation_psnr(w, val_entries, cfg)
                emit(erec)
                history.append(erec)
                _save(out_dir / f"epoch{done_epoch:02d}.ssrtw", w, opt, step + 1, done_epoch)
            completed = step + 1
        _save(last, w, opt, completed, completed // spe + 1)
    finally:
        logfile.close()
    return TrainResult(w, history, last, opt)
