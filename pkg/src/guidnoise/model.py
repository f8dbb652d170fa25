"""Conditional v-prediction network with guidance-aware affine feature modulation.

One encoder is shared by all four input streams (x_t, clean image, guidance
noisy, guidance clean). The guidance pair is reduced to a single embedding
``h`` that drives per-block affine coefficients in a cascade decoder.
All tensors are NCHW.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .errors import InvalidConfigError, ShapeError


@dataclass
class ModelConfig:
    in_channels: int = 3
    base_channels: int = 32
    num_levels: int = 3
    layers_per_block: int = 2
    time_embed_dim: int = 128
    guidance_embed_dim: int = 256
    patch_size: int = 32
    latent: str = "residual"  # "residual": diffuse (noisy - clean) * residual_scale; "image": noisy
    residual_scale: float = 4.0

    def __post_init__(self):
        if self.latent not in ("image", "residual"):
            raise InvalidConfigError(f"model.latent must be 'image' or 'residual', got {self.latent!r}")
        for name, value in asdict(self).items():
            if name == "latent":
                continue
            if value <= 0:
                raise InvalidConfigError(f"model.{name} must be positive, got {value}")
        if self.layers_per_block < 2:
            raise InvalidConfigError("model.layers_per_block must be >= 2")
        if self.time_embed_dim % 2:
            raise InvalidConfigError("model.time_embed_dim must be even")
        if self.patch_size % 2 ** (self.num_levels - 1):
            raise InvalidConfigError(
                f"patch_size {self.patch_size} not divisible by 2^{self.num_levels - 1}")

    @property
    def channels(self) -> list[int]:
        return [self.base_channels * 2**i for i in range(self.num_levels)]


class EncoderOutput(NamedTuple):
    z: Tensor
    F: list[Tensor]


class AffineParams(NamedTuple):
    alpha: Tensor  # (B, C)
    beta: Tensor  # (B, C)


def _groups(channels: int) -> int:
    return math.gcd(8, channels)


def sinusoidal_table(t: Tensor, dim: int) -> Tensor:
    """Half sine, half cosine; frequencies log-spaced from 1 down to 1e-4."""
    half = dim // 2
    freqs = torch.exp(-math.log(1e4) * torch.arange(half, dtype=torch.float64) / max(half - 1, 1))
    args = t.to(torch.float64).reshape(-1, 1) * freqs.reshape(1, -1)
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class ResBlock(nn.Module):
    """GroupNorm/SiLU/conv residual block with an additive conditioning vector."""

    def __init__(self, in_ch: int, out_ch: int, cond_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.cond = nn.Linear(cond_dim, out_ch)
        self.norm2 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: Tensor, cond: Tensor) -> Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.cond(F.silu(cond))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        ch = cfg.channels
        self.stem = nn.Conv2d(cfg.in_channels, ch[0], 3, padding=1)
        self.down = nn.ModuleList(
            [nn.Conv2d(ch[i - 1], ch[i], 3, stride=2, padding=1) for i in range(1, len(ch))])
        self.blocks = nn.ModuleList([ResBlock(c, c, cfg.time_embed_dim) for c in ch])

    def forward(self, img: Tensor, temb: Tensor) -> EncoderOutput:
        feats = []
        h = self.stem(img)
        for i, block in enumerate(self.blocks):
            if i > 0:
                h = self.down[i - 1](h)
            h = block(h, temb)
            feats.append(h)
        return EncoderOutput(z=feats[-1], F=feats)


class GuidanceModule(nn.Module):
    """Pools the concatenated deepest guidance features into the embedding h."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c = cfg.channels[-1]
        self.conv = nn.Conv2d(2 * c, c, 3, padding=1)
        self.mlp = nn.Sequential(
            nn.Linear(c + cfg.time_embed_dim, cfg.guidance_embed_dim),
            nn.SiLU(),
            nn.Linear(cfg.guidance_embed_dim, cfg.guidance_embed_dim),
        )

    def forward(self, z_r: Tensor, temb: Tensor) -> Tensor:
        pooled = F.silu(self.conv(z_r)).mean(dim=(2, 3))
        return self.mlp(torch.cat([pooled, temb], dim=1))


class AffineMLP(nn.Module):
    """Maps (h, temb) to per-channel (alpha, beta); output layer starts at zero."""

    def __init__(self, cond_dim: int, channels: int):
        super().__init__()
        self.hidden = nn.Linear(cond_dim, cond_dim)
        self.out = nn.Linear(cond_dim, 2 * channels)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, cond: Tensor) -> AffineParams:
        alpha, beta = self.out(F.silu(self.hidden(cond))).chunk(2, dim=1)
        return AffineParams(alpha, beta)


def gafm_modulate(feature: Tensor, p: AffineParams) -> Tensor:
    """Per-channel ``(1 + alpha) * feature + beta``."""
    if feature.shape[1] != p.alpha.shape[-1] or p.alpha.shape != p.beta.shape:
        raise ShapeError(
            f"affine params of width {p.alpha.shape[-1]} cannot modulate "
            f"{feature.shape[1]} channels")
    alpha, beta = p.alpha, p.beta
    if alpha.ndim == 1:
        alpha, beta = alpha[None], beta[None]
    return (1 + alpha)[:, :, None, None] * feature + beta[:, :, None, None]


class DecoderBlock(nn.Module):
    def __init__(self, cfg: ModelConfig, level: int):
        super().__init__()
        c = cfg.channels[level]
        self.level = level
        self.layers = nn.ModuleList(
            [ResBlock(3 * c, c, cfg.time_embed_dim) for _ in range(cfg.layers_per_block - 1)])
        self.transition = ResBlock(c, c, cfg.guidance_embed_dim + cfg.time_embed_dim)
        if level > 0:
            self.head = nn.Conv2d(c, cfg.channels[level - 1], 3, padding=1)
        else:
            self.head = nn.Sequential(
                nn.GroupNorm(_groups(c), c), nn.SiLU(), nn.Conv2d(c, cfg.in_channels, 3, padding=1))

    def forward(self, g: Tensor, f_x: Tensor, f_c: Tensor, temb: Tensor, cond: Tensor,
                affine: AffineParams | None) -> Tensor:
        for layer in self.layers:
            g = layer(torch.cat([g, f_x, f_c], dim=1), temb)
            if affine is not None:
                g = gafm_modulate(g, affine)
        g = self.transition(g, cond)
        if self.level > 0:
            g = F.interpolate(g, scale_factor=2, mode="nearest")
        return self.head(g)


class GuidedNoiseNet(nn.Module):
    """The noise synthesis network; ``forward`` returns the v estimate."""

    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or ModelConfig()
        d = cfg.time_embed_dim
        self.time_mlp = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))
        self.encoder = Encoder(cfg)
        self.guidance = GuidanceModule(cfg)
        cond_dim = cfg.guidance_embed_dim + d
        # block i (0-based) runs at level N-1-i, deepest first
        levels = list(reversed(range(cfg.num_levels)))
        self.affine = nn.ModuleList([AffineMLP(cond_dim, cfg.channels[lv]) for lv in levels])
        self.decoder = nn.ModuleList([DecoderBlock(cfg, lv) for lv in levels])

    # -- components -----------------------------------------------------
    def time_embed(self, t) -> Tensor:
        t = torch.as_tensor(t).reshape(-1)
        table = sinusoidal_table(t, self.cfg.time_embed_dim)
        return self.time_mlp(table.to(self.time_mlp[0].weight.dtype))

    def _check_image(self, img: Tensor) -> None:
        c, p = self.cfg.in_channels, self.cfg.patch_size
        if img.ndim != 4 or tuple(img.shape[1:]) != (c, p, p):
            raise ShapeError(f"expected (B, {c}, {p}, {p}) input, got {tuple(img.shape)}")

    def encode(self, img: Tensor, temb: Tensor) -> EncoderOutput:
        self._check_image(img)
        return self.encoder(img, _expand(temb, img.shape[0]))

    def guidance_embed(self, x_r: Tensor, c_r: Tensor, temb: Tensor) -> Tensor:
        self._check_image(x_r)
        self._check_image(c_r)
        b = x_r.shape[0]
        temb = _expand(temb, b)
        z = self.encoder(torch.cat([x_r, c_r]), temb.repeat(2, 1)).z
        return self.guidance_from_features(z[:b], z[b:], temb)

    def guidance_from_features(self, z_noisy: Tensor, z_clean: Tensor, temb: Tensor) -> Tensor:
        return self.guidance(torch.cat([z_noisy, z_clean], dim=1), temb)

    def affine_params(self, h: Tensor, temb: Tensor, i: int) -> AffineParams:
        """Affine coefficients for decoder block ``i`` (1-based, deepest first)."""
        if not 1 <= i <= self.cfg.num_levels:
            raise IndexError(f"block index {i} outside 1..{self.cfg.num_levels}")
        temb = _expand(temb, h.shape[0])
        return self.affine[i - 1](torch.cat([h, temb], dim=1))

    def decode(self, z: Tensor, F_xt: list[Tensor], F_c: list[Tensor], h: Tensor, temb: Tensor,
               modulate: bool = True) -> Tensor:
        n = self.cfg.num_levels
        if len(F_xt) != n or len(F_c) != n:
            raise ShapeError(f"expected {n} skip levels, got {len(F_xt)} and {len(F_c)}")
        temb = _expand(temb, z.shape[0])
        cond = torch.cat([h, temb], dim=1)
        g = z
        for i, block in enumerate(self.decoder):
            lv = block.level
            if F_xt[lv].shape != F_c[lv].shape or F_xt[lv].shape[2:] != g.shape[2:]:
                raise ShapeError(f"skip features at level {lv} do not match decoder state")
            affine = self.affine[i](cond) if modulate else None
            g = block(g, F_xt[lv], F_c[lv], temb, cond, affine)
        return g

    # -- full predictor -------------------------------------------------
    def forward(self, x_t: Tensor, c: Tensor, x_r: Tensor, c_r: Tensor, t,
                modulate: bool = True) -> Tensor:
        for img in (x_t, c, x_r, c_r):
            self._check_image(img)
        b = x_t.shape[0]
        temb = _expand(self.time_embed(t), b)
        # one batched pass through the shared encoder for all four streams
        enc = self.encoder(torch.cat([x_t, c, x_r, c_r]), temb.repeat(4, 1))
        F_xt = [f[:b] for f in enc.F]
        F_c = [f[b:2 * b] for f in enc.F]
        h = self.guidance_from_features(enc.z[2 * b:3 * b], enc.z[3 * b:], temb)
        return self.decode(F_xt[-1], F_xt, F_c, h, temb, modulate=modulate)

    predict = forward


def _expand(temb: Tensor, batch: int) -> Tensor:
    if temb.shape[0] == batch:
        return temb
    if temb.shape[0] == 1:
        return temb.expand(batch, -1)
    raise ShapeError(f"embedding batch {temb.shape[0]} incompatible with {batch}")


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
