"""Noise-similarity and image-quality metrics: KLD, AKLD, PSNR and SSIM.

All functions take (H, W, C) float arrays in [0, 1] and are deterministic.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.ndimage import correlate1d, uniform_filter

from .errors import ShapeError

PSNR_CAP = 100.0


def _same_shape(*arrays) -> None:
    shapes = {np.shape(a) for a in arrays}
    if len(shapes) != 1:
        raise ShapeError(f"shape mismatch: {sorted(shapes)}")


def hard_histogram(values, bins: int = 256, lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    """Normalized counts over ``bins`` equal-width bins on [lo, hi] (clamped)."""
    v = np.clip(np.asarray(values, np.float64).ravel(), lo, hi)
    counts, _ = np.histogram(v, bins=bins, range=(lo, hi))
    return counts / max(v.size, 1)


def discrete_kl(p: np.ndarray, q: np.ndarray, eps: float = 1e-10) -> float:
    p = np.asarray(p, np.float64) + eps
    q = np.asarray(q, np.float64) + eps
    p, q = p / p.sum(), q / q.sum()
    return float(np.sum(p * (np.log(p) - np.log(q))))


def noise_kld(real_noisy, clean, fake_noisy, bins: int = 256, eps: float = 1e-10,
              lo: float = -1.0, hi: float = 1.0) -> float:
    """KL(fake residual histogram || real residual histogram), residual = image - clean."""
    _same_shape(real_noisy, clean, fake_noisy)
    clean = np.asarray(clean, np.float64)
    real = hard_histogram(np.asarray(real_noisy, np.float64) - clean, bins, lo, hi)
    fake = hard_histogram(np.asarray(fake_noisy, np.float64) - clean, bins, lo, hi)
    return discrete_kl(fake, real, eps)


def local_variance(residual, win: int = 7, floor: float = 1e-6) -> np.ndarray:
    """Per-pixel variance estimate: box mean of the squared residual, per channel."""
    residual = np.asarray(residual, np.float64)
    if win % 2 == 0 or win < 1:
        raise ValueError(f"window must be a positive odd integer, got {win}")
    if win > residual.shape[0] or win > residual.shape[1]:
        raise ValueError(f"window {win} larger than image {residual.shape[:2]}")
    size = (win, win) + (1,) * (residual.ndim - 2)
    return np.maximum(uniform_filter(residual**2, size=size, mode="reflect"), floor)


def gaussian_kl(var_p, var_q) -> np.ndarray:
    """KL(N(0, var_p) || N(0, var_q)), elementwise."""
    ratio = np.asarray(var_p, np.float64) / np.asarray(var_q, np.float64)
    return 0.5 * (ratio - 1.0 - np.log(ratio))


def akld(clean, real_noisy, synthesizer: Callable[[np.ndarray, int], np.ndarray], L: int = 4,
         win: int = 7, floor: float = 1e-6) -> float:
    """Average per-pixel Gaussian KL between synthesized and real local noise
    variances, over ``L`` draws of ``synthesizer(clean, k)``.
    """
    if L < 1:
        raise ValueError("L must be >= 1")
    _same_shape(clean, real_noisy)
    clean = np.asarray(clean, np.float64)
    var_real = local_variance(np.asarray(real_noisy, np.float64) - clean, win, floor)
    total = 0.0
    for k in range(L):
        fake = np.asarray(synthesizer(clean, k), np.float64)
        _same_shape(fake, clean)
        var_fake = local_variance(fake - clean, win, floor)
        total += float(np.mean(gaussian_kl(var_fake, var_real)))
    return total / L


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio for unit dynamic range; ``inf`` when a == b."""
    _same_shape(a, b)
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    k = np.exp(-(x**2) / (2 * sigma**2))
    return k / k.sum()


def ssim(a, b, win: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
         data_range: float = 1.0) -> float:
    """Single-scale SSIM with a Gaussian window, averaged over valid pixels and channels."""
    _same_shape(a, b)
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.shape[0] < win or a.shape[1] < win:
        raise ValueError(f"image {a.shape[:2]} smaller than the {win}x{win} window")
    kern = _gaussian_kernel(win, sigma)
    pad = (win - 1) // 2

    def blur(x):
        x = correlate1d(x, kern, axis=0, mode="reflect")
        x = correlate1d(x, kern, axis=1, mode="reflect")
        return x[pad:x.shape[0] - pad, pad:x.shape[1] - pad]

    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a**2
    var_b = blur(b * b) - mu_b**2
    cov = blur(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

REPORT_FIELDS = ["item_id", "kld", "akld", "psnr", "ssim"]


@dataclass
class MetricReport:
    items: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def add(self, item_id: str, **values) -> None:
        self.items.append({"item_id": str(item_id), **values})

    def mean(self, key: str) -> float:
        vals = [it[key] for it in self.items if it.get(key) is not None]
        if key == "psnr":
            vals = [min(v, PSNR_CAP) for v in vals]
        if not vals:
            return math.nan
        return float(np.mean(vals))

    @property
    def aggregate(self) -> dict:
        keys = [k for k in REPORT_FIELDS[1:] if any(k in it for it in self.items)]
        return {k: self.mean(k) for k in keys}

    def write_csv(self, path) -> Path:
        """One row per item plus a ``__mean__`` row; PSNR is capped at 100 dB."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        agg = self.aggregate
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=REPORT_FIELDS, extrasaction="ignore")
            writer.writeheader()
            for row in [*self.items, {"item_id": "__mean__", **agg}]:
                writer.writerow({k: _fmt(k, row.get(k)) for k in REPORT_FIELDS})
        return path


def _fmt(key: str, value):
    if value is None or key == "item_id":
        return "" if value is None else value
    if key == "psnr":
        value = min(float(value), PSNR_CAP)
    return f"{float(value):.12g}"


def read_report(path) -> dict[str, dict]:
    with open(path, newline="") as fh:
        return {row["item_id"]: row for row in csv.DictReader(fh)}
