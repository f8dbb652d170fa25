"""Diffusion loss, differentiable histograms and the noise-aware refine loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import torch
from torch import Tensor

from .errors import InvalidConfigError, ShapeError


@dataclass
class LossWeights:
    lam: float = 0.1  # refine-loss weight in the total loss
    gamma: float = 0.1  # MSE regularizer inside the refine loss
    t_split: int = 2
    bins: int = 256
    lo: float = -1.0
    hi: float = 1.0
    eps_h: float = 1e-10
    domain: str = "residual"  # "residual" (image - clean) or "image"

    def __post_init__(self):
        if self.lam < 0 or self.gamma < 0:
            raise InvalidConfigError("loss weights must be nonnegative")
        if self.t_split < 1:
            raise InvalidConfigError("t_split must be >= 1")
        if self.bins < 2 or not self.lo < self.hi or self.eps_h <= 0:
            raise InvalidConfigError("invalid histogram settings")
        if self.domain not in ("residual", "image"):
            raise InvalidConfigError(f"unknown histogram domain {self.domain!r}")


class HistogramDist(NamedTuple):
    centers: Tensor
    probs: Tensor


def bin_centers(bins: int, lo: float, hi: float, dtype=torch.float32) -> Tensor:
    return torch.linspace(lo, hi, bins, dtype=torch.float64).to(dtype)


def diffusion_loss(v_hat: Tensor, v: Tensor) -> Tensor:
    if v_hat.shape != v.shape:
        raise ShapeError(f"shape mismatch: {tuple(v_hat.shape)} vs {tuple(v.shape)}")
    return torch.mean((v_hat - v) ** 2)


def soft_histogram(values: Tensor, w: LossWeights | None = None) -> HistogramDist:
    """Triangular-kernel histogram: each value splits its unit mass linearly
    between the two nearest bin centers, so the masses are piecewise linear in
    the inputs.
    """
    w = w or LossWeights()
    values = values.reshape(-1)
    if values.numel() == 0:
        raise ValueError("soft_histogram of an empty tensor")
    n = w.bins
    spacing = (w.hi - w.lo) / (n - 1)
    pos = (values.clamp(w.lo, w.hi) - w.lo) / spacing
    left = pos.detach().floor().clamp(0, n - 2)
    frac = pos - left
    idx = left.long()
    probs = torch.zeros(n, dtype=values.dtype, device=values.device)
    probs = probs.index_add(0, idx, 1 - frac).index_add(0, idx + 1, frac)
    probs = probs / values.numel()
    return HistogramDist(bin_centers(n, w.lo, w.hi, values.dtype).to(values.device), probs)


def kl_divergence(p: HistogramDist, q: HistogramDist, eps_h: float = 1e-10) -> Tensor:
    """D_KL(p || q) in nats after adding ``eps_h`` to every bin and renormalizing."""
    if p.centers.shape != q.centers.shape or not torch.allclose(p.centers, q.centers):
        raise ShapeError("histograms have different bin centers")
    pp = p.probs + eps_h
    qq = q.probs + eps_h
    pp = pp / pp.sum()
    qq = qq / qq.sum()
    return torch.sum(pp * (torch.log(pp) - torch.log(qq)))


def refine_loss(x_hat: Tensor, x_real: Tensor, c: Tensor, w: LossWeights | None = None) -> Tensor:
    """Histogram KLD between synthesized and real noise plus a weighted MSE."""
    w = w or LossWeights()
    if x_hat.shape != x_real.shape or x_hat.shape != c.shape:
        raise ShapeError("refine_loss inputs must share one shape")
    if w.domain == "residual":
        a, b = x_hat - c, x_real - c
    else:
        a, b = x_hat, x_real
    kld = kl_divergence(soft_histogram(a, w), soft_histogram(b.detach(), w), w.eps_h)
    return kld + w.gamma * torch.mean((x_hat - x_real) ** 2)


def total_loss(l_diff: Tensor, l_refine: Tensor, w: LossWeights | None = None) -> Tensor:
    w = w or LossWeights()
    return l_diff + w.lam * l_refine
