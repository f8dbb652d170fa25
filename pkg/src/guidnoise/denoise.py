"""Small residual CNN denoiser used to judge synthetic data indirectly.

A denoiser trained on real pairs alone is compared with one whose batches mix
real and synthetic pairs; both are scored by PSNR/SSIM on held-out real pairs.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import checkpoint as ckpt
from .data import PairDataset
from .errors import CheckpointError, DatasetError, InvalidConfigError, NonFiniteLossError
from .metrics import MetricReport, psnr, ssim


@dataclass
class DenoiserConfig:
    depth: int = 6
    channels: int = 32
    lr: float = 1e-3
    iters: int = 2000
    batch: int = 8
    seed: int = 0
    mix_real: int = 1
    mix_synth: int = 1
    augment: bool = True

    def __post_init__(self):
        if min(self.depth, self.channels, self.iters, self.batch) <= 0 or self.lr <= 0:
            raise InvalidConfigError("denoiser settings must be positive")
        if self.depth < 2:
            raise InvalidConfigError("denoiser depth must be >= 2")
        if self.mix_real < 0 or self.mix_synth < 0 or self.mix_real + self.mix_synth == 0:
            raise InvalidConfigError("invalid real:synthetic mix ratio")

    def split_batch(self) -> tuple[int, int]:
        """(real, synthetic) counts per batch when synthetic data is present."""
        n_real = round(self.batch * self.mix_real / (self.mix_real + self.mix_synth))
        return n_real, self.batch - n_real


class ResidualDenoiser(nn.Module):
    """DnCNN-style plain conv stack predicting the noise; output = input - noise."""

    def __init__(self, depth: int = 6, channels: int = 32, in_channels: int = 3):
        super().__init__()
        layers = [nn.Conv2d(in_channels, channels, 3, padding=1), nn.ReLU(inplace=True)]
        for _ in range(depth - 2):
            layers += [nn.Conv2d(channels, channels, 3, padding=1), nn.ReLU(inplace=True)]
        layers.append(nn.Conv2d(channels, in_channels, 3, padding=1))
        self.body = nn.Sequential(*layers)

    def forward(self, noisy: torch.Tensor) -> torch.Tensor:
        return noisy - self.body(noisy)

    def zero_residual(self) -> "ResidualDenoiser":
        last = self.body[-1]
        nn.init.zeros_(last.weight)
        nn.init.zeros_(last.bias)
        return self


def _to_nchw(arr: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(np.asarray(arr, np.float32).transpose(0, 3, 1, 2)))


def _draw(cleans, noisies, n: int, rng: np.random.Generator, augment: bool):
    idx = rng.integers(len(cleans), size=n)
    c, x = cleans[idx], noisies[idx]
    if augment:
        out_c, out_x = [], []
        for ci, xi in zip(c, x):
            k, flip = int(rng.integers(4)), bool(rng.integers(2))
            ci, xi = np.rot90(ci, k), np.rot90(xi, k)
            if flip:
                ci, xi = ci[:, ::-1], xi[:, ::-1]
            out_c.append(ci)
            out_x.append(xi)
        c, x = np.stack(out_c), np.stack(out_x)
    return c, x


def train_denoiser(cfg: DenoiserConfig, real_ds: PairDataset, synth_ds: PairDataset | None = None,
                   log_path=None):
    """Residual-learning MSE training.

    Returns ``(model, info)``; ``info["batch_counts"]`` lists the (real,
    synthetic) composition of every batch.
    """
    if len(real_ds) == 0:
        raise DatasetError("denoiser needs at least one real pair")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    model = ResidualDenoiser(cfg.depth, cfg.channels)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    real_c, real_x = real_ds.arrays()
    use_synth = synth_ds is not None and len(synth_ds) > 0
    if use_synth:
        syn_c, syn_x = synth_ds.arrays()
        n_real, n_syn = cfg.split_batch()
    else:
        n_real, n_syn = cfg.batch, 0

    losses, counts = [], []
    fh = writer = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["iter", "loss"])
    try:
        for it in range(cfg.iters):
            c, x = _draw(real_c, real_x, n_real, rng, cfg.augment)
            if n_syn:
                sc, sx = _draw(syn_c, syn_x, n_syn, rng, cfg.augment)
                c, x = np.concatenate([c, sc]), np.concatenate([x, sx])
            counts.append((n_real, n_syn))
            clean_t, noisy_t = _to_nchw(c), _to_nchw(x)
            loss = torch.mean((model(noisy_t) - clean_t) ** 2)
            if not torch.isfinite(loss):
                raise NonFiniteLossError("non-finite denoiser loss", iteration=it)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(loss.item())
            if writer:
                writer.writerow([it, f"{losses[-1]:.8g}"])
    finally:
        if fh:
            fh.close()
    model.eval()
    return model, {"losses": losses, "batch_counts": counts, "config": asdict(cfg)}


@torch.no_grad()
def denoise(model: ResidualDenoiser, noisy: np.ndarray) -> np.ndarray:
    out = model(_to_nchw(np.asarray(noisy)[None]))
    return out[0].permute(1, 2, 0).numpy()


def eval_denoiser(model: ResidualDenoiser, test_ds: PairDataset) -> MetricReport:
    report = MetricReport(config={"metric": "denoiser"})
    for i in range(len(test_ds)):
        clean, noisy = test_ds.pair(i)
        out = np.clip(denoise(model, noisy), 0.0, 1.0)
        report.add(i, psnr=psnr(out, clean), ssim=ssim(out, clean))
    return report


def save_denoiser(path, model: ResidualDenoiser, cfg: DenoiserConfig) -> None:
    tensors = {f"model/{k}": v for k, v in model.state_dict().items()}
    ckpt.save(path, tensors, {"kind": "denoiser", "config": asdict(cfg)})


def load_denoiser(path) -> tuple[ResidualDenoiser, DenoiserConfig]:
    meta, tensors = ckpt.load(path)
    if meta.get("kind") != "denoiser":
        raise CheckpointError(f"{path}: not a denoiser checkpoint")
    cfg = DenoiserConfig(**meta["config"])
    model = ResidualDenoiser(cfg.depth, cfg.channels)
    model.load_state_dict({k[6:]: torch.from_numpy(v) for k, v in tensors.items()})
    return model.eval(), cfg


def psnr_delta(augmented: MetricReport, baseline: MetricReport) -> float:
    d = augmented.mean("psnr") - baseline.mean("psnr")
    return d if math.isfinite(d) else math.nan
