"""Inference: noisy-image synthesis from one guidance pair, tiling, and
self-augmentation of small paired datasets.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .data import PairDataset, PairItem, write_png
from .errors import InvalidConfigError, ShapeError
from .model import GuidedNoiseNet
from .schedule import DiffusionSchedule, ddim_step_v, with_eta
from .training import from_latent, image_from_target, to_latent

log = logging.getLogger(__name__)

SYNTH_MANIFEST = "synthesis_manifest.csv"
SYNTH_FIELDS = ["index", "clean_path", "guidance_noisy_path", "guidance_clean_path", "seed",
                "out_path"]


@dataclass
class SynthesisRequest:
    clean: np.ndarray  # (H, W, C) in [0, 1]
    guidance_noisy: np.ndarray
    guidance_clean: np.ndarray
    seed: int = 0
    steps: int | None = None  # None = all T steps
    sigma_mode: str = "deterministic"


def derive_seed(seed: int, *keys: int) -> int:
    """Reproducible child seed; independent of any global RNG state."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *map(int, keys)])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def _timesteps(T: int, steps: int) -> list[int]:
    if not 1 <= steps <= T:
        raise InvalidConfigError(f"steps must lie in 1..{T}, got {steps}")
    ts = np.unique(np.round(np.linspace(0, T, steps + 1)).astype(int))
    return list(ts[::-1])


@torch.no_grad()
def synthesize_batch(model: GuidedNoiseNet, schedule: DiffusionSchedule, cleans, guidance_noisy,
                     guidance_clean, seeds, steps: int | None = None,
                     sigma_mode: str = "deterministic") -> np.ndarray:
    """Synthesize one noisy image per row; every row draws its own noise from
    its seed so results do not depend on batch composition order.
    """
    if model is None:
        raise InvalidConfigError("no model loaded")
    cleans = np.asarray(cleans, np.float32)
    if cleans.shape != np.shape(guidance_noisy) or cleans.shape != np.shape(guidance_clean):
        raise ShapeError("clean and guidance batches must share one shape")
    if sigma_mode == "deterministic":
        sched = with_eta(schedule, 0.0)
    elif sigma_mode == "stochastic":
        sched = schedule if not schedule.deterministic else with_eta(schedule, 1.0)
    else:
        raise InvalidConfigError(f"unknown sigma_mode {sigma_mode!r}")
    steps = steps or sched.T
    if steps < sched.T and not sched.deterministic:
        raise InvalidConfigError("stochastic sampling requires all T steps")

    model.eval()
    c = to_latent(cleans)
    x_r = to_latent(guidance_noisy)
    c_r = to_latent(guidance_clean)
    gens = [torch.Generator().manual_seed(int(s) % (1 << 63)) for s in seeds]
    x = torch.cat([torch.randn((1, *c.shape[1:]), generator=g) for g in gens])
    ts = _timesteps(sched.T, steps)
    for t, t_prev in zip(ts[:-1], ts[1:]):
        noise = None
        if sched.sigma[t - 1] > 0:
            noise = torch.cat([torch.randn((1, *c.shape[1:]), generator=g) for g in gens])
        v = model(x, c, x_r, c_r, int(t))
        x = ddim_step_v(x, v, int(t), int(t_prev), sched, noise)
    return np.clip(from_latent(image_from_target(x, c, model.cfg.latent, model.cfg.residual_scale)), 0.0, 1.0)


def synthesize(model: GuidedNoiseNet, schedule: DiffusionSchedule, req: SynthesisRequest) -> np.ndarray:
    if model is None:
        raise InvalidConfigError("no model loaded")
    p = model.cfg.patch_size
    for name in ("clean", "guidance_noisy", "guidance_clean"):
        arr = getattr(req, name)
        if arr.shape[:2] != (p, p):
            raise ShapeError(f"{name} has shape {arr.shape}, model expects {p}x{p} patches")
    out = synthesize_batch(model, schedule, req.clean[None], req.guidance_noisy[None],
                           req.guidance_clean[None], [req.seed], req.steps, req.sigma_mode)
    return out[0]


def tile_origins(length: int, tile: int, overlap: int) -> list[int]:
    if length <= tile:
        return [0]
    step = tile - overlap
    origins = list(range(0, length - tile + 1, step))
    if origins[-1] != length - tile:
        origins.append(length - tile)
    return origins


def _feather(tile: int, overlap: int, first: bool, last: bool) -> np.ndarray:
    w = np.ones(tile)
    if overlap > 0:
        ramp = (np.arange(overlap) + 1) / (overlap + 1)
        if not first:
            w[:overlap] = ramp
        if not last:
            w[-overlap:] = ramp[::-1]
    return w


def _center_crop(img: np.ndarray, size: int) -> np.ndarray:
    h, w = img.shape[:2]
    if h < size or w < size:
        pad = ((0, max(size - h, 0)), (0, max(size - w, 0)), (0, 0))
        img = np.pad(img, pad, mode="reflect")
        h, w = img.shape[:2]
    y, x = (h - size) // 2, (w - size) // 2
    return img[y:y + size, x:x + size]


def synthesize_tiled(model: GuidedNoiseNet, schedule: DiffusionSchedule, clean: np.ndarray,
                     guidance: tuple[np.ndarray, np.ndarray], seed: int = 0, tile: int | None = None,
                     overlap: int | None = None, sigma_mode: str = "deterministic", batch: int = 16,
                     return_count: bool = False):
    """Synthesize an image of any size from overlapping, feathered tiles.

    ``guidance`` is a (noisy, clean) pair; larger guidance images are center
    cropped to the tile size. A single-tile image uses ``seed`` unchanged, so it
    reproduces ``synthesize`` exactly. ``overlap`` defaults to a quarter tile.
    """
    tile = tile or model.cfg.patch_size
    overlap = tile // 4 if overlap is None else overlap
    if tile != model.cfg.patch_size:
        raise InvalidConfigError(f"tile must equal the model patch size {model.cfg.patch_size}")
    if not 0 <= overlap < tile / 2:
        raise InvalidConfigError(f"overlap must lie in [0, {tile / 2})")
    g_noisy = _center_crop(np.asarray(guidance[0], np.float32), tile)
    g_clean = _center_crop(np.asarray(guidance[1], np.float32), tile)
    clean = np.asarray(clean, np.float32)
    h, w = clean.shape[:2]
    padded = clean
    if h < tile or w < tile:
        padded = np.pad(clean, ((0, max(tile - h, 0)), (0, max(tile - w, 0)), (0, 0)), mode="reflect")
    H, W = padded.shape[:2]
    ys, xs = tile_origins(H, tile, overlap), tile_origins(W, tile, overlap)
    coords = [(r, q, y, x) for r, y in enumerate(ys) for q, x in enumerate(xs)]
    single = len(coords) == 1
    seeds = [seed if single else derive_seed(seed, r, q) for r, q, _, _ in coords]

    # residuals are blended with weights normalized in the L2 sense, which keeps
    # the noise variance of independent tiles intact inside overlaps
    acc = np.zeros(padded.shape, np.float64)
    wsq = np.zeros(padded.shape[:2], np.float64)
    result = None
    for start in range(0, len(coords), batch):
        chunk = coords[start:start + batch]
        cleans = np.stack([padded[y:y + tile, x:x + tile] for _, _, y, x in chunk])
        n = len(chunk)
        outs = synthesize_batch(model, schedule, cleans, np.repeat(g_noisy[None], n, 0),
                                np.repeat(g_clean[None], n, 0), seeds[start:start + n],
                                sigma_mode=sigma_mode)
        if single:
            result = outs[0][:h, :w]
            break
        for (r, q, y, x), out, c in zip(chunk, outs, cleans):
            wy = _feather(tile, overlap, r == 0, r == len(ys) - 1)
            wx = _feather(tile, overlap, q == 0, q == len(xs) - 1)
            wt = np.outer(wy, wx)
            acc[y:y + tile, x:x + tile] += (out.astype(np.float64) - c) * wt[..., None]
            wsq[y:y + tile, x:x + tile] += wt**2
    if result is None:
        blended = padded + acc / np.sqrt(wsq)[..., None]
        result = np.clip(blended, 0.0, 1.0).astype(np.float32)[:h, :w]
    return (result, len(coords)) if return_count else result


def self_augment(model: GuidedNoiseNet, schedule: DiffusionSchedule, dataset: PairDataset,
                 seed: int = 0, out_dir=None, strategy: str = "all_pairs", batch: int = 16,
                 save_raw: bool = False) -> tuple[PairDataset, list[dict]]:
    """Cross every clean image with every guidance pair (N real -> N^2 synthetic).

    ``strategy="self"`` keeps only the diagonal (each clean with its own pair).
    With ``out_dir`` the synthetic pairs are written as ``clean/``, ``noisy/``
    PNG trees plus a manifest; ``save_raw`` adds float32 ``.npy`` sidecars.
    """
    n = len(dataset)
    if strategy == "all_pairs":
        jobs = [(i, j) for i in range(n) for j in range(n)]
    elif strategy == "self":
        jobs = [(i, i) for i in range(n)]
    else:
        raise InvalidConfigError(f"unknown self-augmentation strategy {strategy!r}")
    out = Path(out_dir) if out_dir is not None else None
    cleans, noisies, groups, rows = [], [], [], []
    for start in range(0, len(jobs), batch):
        chunk = jobs[start:start + batch]
        seeds = [derive_seed(seed, i, j) for i, j in chunk]
        c = np.stack([dataset.pair(i)[0] for i, _ in chunk])
        g_clean = np.stack([dataset.pair(j)[0] for _, j in chunk])
        g_noisy = np.stack([dataset.pair(j)[1] for _, j in chunk])
        outs = synthesize_batch(model, schedule, c, g_noisy, g_clean, seeds)
        for (i, j), s, ci, xi in zip(chunk, seeds, c, outs):
            index = len(rows)
            name = f"{i:05d}_{j:05d}.png"
            rows.append({
                "index": index,
                "clean_path": f"clean/{name}",
                "guidance_noisy_path": _source(dataset, j, "noisy"),
                "guidance_clean_path": _source(dataset, j, "clean"),
                "seed": s,
                "out_path": f"noisy/{name}",
            })
            cleans.append(ci)
            noisies.append(xi)
            groups.append(dataset.items[j].group)
            if out is not None:
                write_png(out / "clean" / name, ci)
                write_png(out / "noisy" / name, xi)
                if save_raw:
                    np.save(out / "noisy" / name.replace(".png", ".npy"), xi.astype(np.float32))
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / SYNTH_MANIFEST, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=SYNTH_FIELDS)
            writer.writeheader()
            writer.writerows(rows)
    synth = PairDataset.from_arrays(cleans, noisies, groups, split="synthetic")
    if out is not None:
        for row, item in zip(rows, synth.items):
            item.clean_path = out / row["clean_path"]
            item.noisy_path = out / row["out_path"]
        synth.root = out
    return synth, rows


def _source(dataset: PairDataset, j: int, which: str) -> str:
    item: PairItem = dataset.items[j]
    path = item.noisy_path if which == "noisy" else item.clean_path
    return str(path) if path is not None else f"<memory:{j}>"
