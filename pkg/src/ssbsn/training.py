"""Self-supervised training: noisy patches in, the same noisy patches as targets.

The blind spot keeps the network from copying its input, so an L1 loss
against the input itself trains a denoiser.
"""
from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import tensor as T
from .data import ImageRecord, NoisyDataset
from .metrics import psnr, ssim
from .network import SSBSN, decode_tensors, encode_tensor, load_checkpoint, save_checkpoint
from .pd import PDConfig, denoise_asymmetric, dihedral, pd_down
from .tensor import Tensor

PathLike = Union[str, Path]


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for one named consumer of the run seed."""
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def substream_seed(seed: int, name: str) -> int:
    return int(substream(seed, name).integers(2**31))


@dataclass
class TrainConfig:
    patch_size: int = 120
    batch_size: int = 4
    lr: float = 1e-4
    epochs: int = 20
    lr_drop_epoch: int = 16
    lr_drop_factor: float = 0.1
    steps_per_epoch: int = 0  # 0: one patch per image per epoch
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self, stride: Optional[int] = None, grid_lcm: int = 1) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr_drop_factor != 1.0 and not 0 < self.lr_drop_epoch < self.epochs:
            raise ValueError(f"lr_drop_epoch {self.lr_drop_epoch} must lie in (0, epochs={self.epochs})")
        if self.batch_size < 1 or self.patch_size < 1 or self.lr <= 0:
            raise ValueError("batch_size, patch_size and lr must be positive")
        if stride is not None and self.patch_size % (stride * grid_lcm):
            raise ValueError(
                f"patch_size {self.patch_size} must be a multiple of stride x grid "
                f"({stride} x {grid_lcm})")

    def epoch_steps(self, dataset_size: int) -> int:
        return self.steps_per_epoch or max(1, -(-dataset_size // self.batch_size))


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    return cfg.lr * (cfg.lr_drop_factor if epoch >= cfg.lr_drop_epoch else 1.0)


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Sequence[Tensor], beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params],
                   [np.zeros_like(p.data) for p in params], 0, beta1, beta2, eps)

    def to_bytes(self) -> bytes:
        """Step counter then (m, v) per parameter, stored as float64 so resume is exact."""
        head = struct.pack("<Q", self.step)
        return head + b"".join(encode_tensor(a, "<f8") for pair in zip(self.m, self.v) for a in pair)

    def load_bytes(self, buf: bytes) -> None:
        (self.step,) = struct.unpack_from("<Q", buf)
        arrays = decode_tensors(buf, 8, "<f8")
        if len(arrays) != 2 * len(self.m):
            raise ValueError("optimiser state does not match the model")
        for i in range(len(self.m)):
            self.m[i] = arrays[2 * i].astype(self.m[i].dtype)
            self.v[i] = arrays[2 * i + 1].astype(self.v[i].dtype)


def adam_step(params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]],
              state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update, applied in place; a missing gradient counts as zero."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
        m = state.m[i] = (b1 * state.m[i] + (1 - b1) * g).astype(p.data.dtype)
        v = state.v[i] = (b2 * state.v[i] + (1 - b2) * g * g).astype(p.data.dtype)
        p.data = (p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype)


# ---------------------------------------------------------------------------
# data sampling


def sample_patch(image: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    """Uniformly placed ``size`` x ``size`` crop of an (n, c, h, w) image."""
    h, w = image.shape[-2:]
    if h < size or w < size:
        raise ValueError(f"image {h}x{w} is smaller than the patch size {size}")
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    return image[..., top:top + size, left:left + size]


def draw_transform(rng: np.random.Generator) -> int:
    return int(rng.integers(8))


def augment(patch: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random flip and quarter turn, uniform over the 8 dihedral transforms."""
    return np.ascontiguousarray(dihedral(patch, draw_transform(rng)))


def l1_loss(pred: Tensor, target) -> Tensor:
    return T.mean(T.tabs(pred - target))


def make_batch(dataset: NoisyDataset, indices: Sequence[int], size: int,
               rng: np.random.Generator) -> np.ndarray:
    patches = [augment(sample_patch(dataset[i].noisy, size, rng), rng) for i in indices]
    return np.concatenate(patches, axis=0)


# ---------------------------------------------------------------------------
# loop


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainResult:
    model: SSBSN
    losses: list[float] = field(default_factory=list)
    validation: list[tuple[int, float, float]] = field(default_factory=list)
    step: int = 0


def evaluate(model: SSBSN, records: Sequence[ImageRecord], pd_cfg: PDConfig) -> tuple[float, float]:
    """Mean PSNR/SSIM of the test-phase denoiser over records with clean references."""
    scores = []
    for r in records:
        if r.clean is None:
            continue
        out = np.clip(denoise_asymmetric(model, r.noisy, pd_cfg, "test"), 0.0, 1.0)
        scores.append((psnr(out, r.clean), ssim(out, r.clean)))
    if not scores:
        return math.nan, math.nan
    p, s = np.mean(scores, axis=0)
    return float(p), float(s)


def _param_norm(model: SSBSN) -> float:
    return float(math.sqrt(sum(float(np.sum(p.data.astype(np.float64) ** 2))
                               for p in model.parameters())))


def _batch_indices(cfg: TrainConfig, n: int, epoch: int, step_in_epoch: int) -> list[int]:
    # one shuffled pass over the images per epoch, repeated if an epoch needs more
    per_epoch = cfg.epoch_steps(n) * cfg.batch_size
    passes = -(-per_epoch // n)
    rng = substream(cfg.seed, f"order/{epoch}")
    order = np.concatenate([rng.permutation(n) for _ in range(passes)])
    start = step_in_epoch * cfg.batch_size
    return [int(i) for i in order[start:start + cfg.batch_size]]


def train_step(model: SSBSN, batch: np.ndarray, stride: int, state: AdamState, lr: float) -> float:
    sub = Tensor(pd_down(batch.astype(T.default_dtype(), copy=False), stride))
    loss = l1_loss(model(sub), sub)
    params = model.parameters()
    T.backward(loss)
    adam_step(params, [p.grad for p in params], state, lr)
    return float(loss.item())


def train_loop(model: SSBSN, dataset: NoisyDataset, cfg: TrainConfig, pd_cfg: PDConfig,
               val_records: Sequence[ImageRecord] = (), log_path: Optional[PathLike] = None,
               checkpoint_dir: Optional[PathLike] = None, resume: bool = False,
               max_steps: Optional[int] = None) -> TrainResult:
    """Run the optimisation; returns the model with its loss and validation history.

    Every step draws its patches from a generator keyed by (seed, step), so a
    resumed run continues exactly where the interrupted one stopped.
    ``max_steps`` caps the total step count (the schedule still follows epochs).
    """
    if not isinstance(dataset, NoisyDataset):
        raise TypeError("training consumes a NoisyDataset (noisy images only)")
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    cfg.validate(pd_cfg.s_train, model.grid_lcm)
    params = model.parameters()
    state = AdamState.zeros_like(params, cfg.beta1, cfg.beta2, cfg.eps)
    per_epoch = cfg.epoch_steps(len(dataset))
    total = cfg.epochs * per_epoch if max_steps is None else min(max_steps, cfg.epochs * per_epoch)
    result = TrainResult(model)

    ckpt = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt is not None:
        ckpt.mkdir(parents=True, exist_ok=True)
        if resume and (ckpt / "last.ssbsn").exists():
            loaded, meta = load_checkpoint(ckpt / "last.ssbsn")
            for p, q in zip(params, loaded.parameters()):
                p.data = q.data
            state.load_bytes((ckpt / "last.adam").read_bytes())
            result.step = int(meta["step"])
    log = open(log_path, "a") if log_path is not None else None
    try:
        while result.step < total:
            step = result.step
            epoch, within = divmod(step, per_epoch)
            lr = lr_at(epoch, cfg)
            rng = substream(cfg.seed, f"sample/{step}")
            batch = make_batch(dataset, _batch_indices(cfg, len(dataset), epoch, within),
                               cfg.patch_size, rng)
            try:
                loss = train_step(model, batch, pd_cfg.s_train, state, lr)
            except FloatingPointError as err:
                raise TrainingDiverged(
                    f"non-finite values at step {step} (epoch {epoch}, lr {lr:g}, "
                    f"parameter norm {_param_norm(model):.6g}): {err}") from err
            result.losses.append(loss)
            result.step = step + 1
            if log:
                log.write(f"{step},{epoch},{lr:.6g},{loss:.8f}\n")
            if within == per_epoch - 1 or result.step == total:
                if val_records:
                    p, s = evaluate(model, val_records, pd_cfg)
                    result.validation.append((epoch, p, s))
                    if log:
                        log.write(f"{epoch},{p:.6f},{s:.6f}\n")
                if log:
                    log.flush()
                if ckpt is not None:
                    meta = {"step": result.step, "epoch": epoch}
                    save_checkpoint(ckpt / f"epoch{epoch:03d}.ssbsn", model, meta)
                    save_checkpoint(ckpt / "last.ssbsn", model, meta)
                    (ckpt / "last.adam").write_bytes(state.to_bytes())
    finally:
        if log:
            log.close()
    return result
