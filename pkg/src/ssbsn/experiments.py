"""Desk-scale experiments shared by the acceptance suite and scripts/."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .analysis import export_attention_overlay, motif_repeats
from .data import NoiseSpec, NoisyDataset, add_noise, make_synthetic_records, synth_clean
from .layers import SSBlock
from .metrics import psnr
from .network import SSBSN, NetworkConfig
from .pd import PDConfig
from .training import TrainConfig, evaluate, substream_seed, train_loop


@dataclass
class EfficacyConfig:
    channels: int = 32
    m: int = 3
    gamma: int = 2
    baseline_m: int = 0
    images: int = 64
    val_images: int = 8
    size: int = 64
    sigma: float = 25 / 255
    period: int = 24
    blur: float = 1 / 6
    steps: int = 2000
    epochs: int = 20  # steps are split into epochs so the usual late lr drop applies
    lr_drop_epoch: int = 16
    lr_drop_factor: float = 0.1
    patch_size: int = 60
    batch_size: int = 1
    lr: float = 1e-3
    s_train: int = 5
    s_test: int = 2
    seed: int = 0
    final_window: int = 100

    def train_config(self) -> TrainConfig:
        if self.steps % self.epochs:
            raise ValueError(f"steps {self.steps} must split evenly into {self.epochs} epochs")
        return TrainConfig(patch_size=self.patch_size, batch_size=self.batch_size, lr=self.lr,
                           epochs=self.epochs, lr_drop_epoch=self.lr_drop_epoch,
                           lr_drop_factor=self.lr_drop_factor,
                           steps_per_epoch=self.steps // self.epochs, seed=self.seed)

    def network_config(self, m: int) -> NetworkConfig:
        return NetworkConfig(channels=self.channels, m=m, gamma=self.gamma,
                             seed=substream_seed(self.seed, "init"))


@dataclass
class RunSummary:
    m: int
    model: SSBSN
    losses: list[float]
    denoised_psnr: float
    denoised_ssim: float
    seconds: float

    def final_loss(self, window: int) -> float:
        return float(np.mean(self.losses[-window:]))


@dataclass
class EfficacyResult:
    config: EfficacyConfig
    noisy_psnr: float
    runs: dict[int, RunSummary] = field(default_factory=dict)

    @property
    def main(self) -> RunSummary:
        return self.runs[self.config.m]

    @property
    def baseline(self) -> RunSummary:
        return self.runs[self.config.baseline_m]

    @property
    def gain(self) -> float:
        return self.main.denoised_psnr - self.noisy_psnr

    @property
    def loss_ok(self) -> bool:
        w = self.config.final_window
        return self.main.final_loss(w) <= self.baseline.final_loss(w)

    @property
    def passed(self) -> bool:
        return self.gain >= 2.0 and self.loss_ok

    def lines(self) -> list[str]:
        w = self.config.final_window
        out = [f"noisy input PSNR {self.noisy_psnr:.2f} dB"]
        for m, r in sorted(self.runs.items(), reverse=True):
            out.append(f"m={m}: PSNR {r.denoised_psnr:.2f} dB, SSIM {r.denoised_ssim:.4f}, "
                       f"final loss {r.final_loss(w):.5f}, {r.seconds:.0f}s")
        return out


def efficacy_data(cfg: EfficacyConfig):
    noise = NoiseSpec(sigma=cfg.sigma, seed=substream_seed(cfg.seed, "noise"))
    train = make_synthetic_records(cfg.images, cfg.size, noise, seed=100, period=cfg.period,
                                   blur=cfg.blur)
    val = make_synthetic_records(cfg.val_images, cfg.size, noise, seed=9000, period=cfg.period,
                                 blur=cfg.blur)
    return NoisyDataset.from_records(train), val


def efficacy_run(cfg: EfficacyConfig = EfficacyConfig(),
                 progress: Optional[Callable[[str], None]] = None) -> EfficacyResult:
    """Train the SS-Attention model and its attention-free baseline on identical data and seeds."""
    dataset, val = efficacy_data(cfg)
    noisy = float(np.mean([psnr(np.clip(r.noisy, 0, 1), r.clean) for r in val]))
    result = EfficacyResult(cfg, noisy)
    pd_cfg = PDConfig(s_train=cfg.s_train, s_test=cfg.s_test)
    for m in (cfg.m, cfg.baseline_m):
        model = SSBSN(cfg.network_config(m))
        start = time.perf_counter()
        trained = train_loop(model, dataset, cfg.train_config(), pd_cfg)
        seconds = time.perf_counter() - start
        p, s = evaluate(model, val, pd_cfg)
        result.runs[m] = RunSummary(m, model, trained.losses, p, s, seconds)
        if progress:
            progress(result.lines()[-1])
    return result


@dataclass
class AttentionProbe:
    layer: int
    dhat: int
    repeats: int
    top: list


def attention_probe(model: SSBSN, period: int, size: int = 96, pixel=(29, 41), k: int = 4,
                    sigma: float = 25 / 255, seed: int = 0, kind: str = "smooth-tiles",
                    blur: float = 1 / 6, path: int = 0) -> list[AttentionProbe]:
    """Top-k attention of one pixel at every SS-Block of ``path`` on a tiled noisy image."""
    clean = synth_clean(kind, size, seed, period, blur)
    noisy = add_noise(clean, NoiseSpec(sigma=sigma, seed=seed), np.random.default_rng(seed))
    offset = sum(len(p.modules) for p in model.paths[:path])
    blocks = [offset + i for i, b in enumerate(model.paths[path].modules) if isinstance(b, SSBlock)]
    out = []
    for layer in blocks:
        overlay, _ = export_attention_overlay(model, noisy, layer, pixel, k)
        out.append(AttentionProbe(layer, overlay.dhat, motif_repeats(overlay, period),
                                  overlay.selected))
    return out


__all__ = ["EfficacyConfig", "EfficacyResult", "RunSummary", "efficacy_run", "efficacy_data",
           "AttentionProbe", "attention_probe"]
