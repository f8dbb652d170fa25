"""Two-phase optimization of the noise synthesis network.

Phase 1 fits the v-prediction diffusion loss on random timesteps. Phase 2
runs the whole deterministic reverse trajectory per example and backpropagates
the refine loss through the last ``t_split`` sampling steps only.

Images enter the diffusion process rescaled from [0, 1] to [-1, 1].
"""

from __future__ import annotations

import base64
import csv
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
from torch import Tensor

from . import checkpoint as ckpt
from .data import PairDataset
from .errors import CheckpointError, DatasetError, InvalidConfigError, NonFiniteLossError
from .losses import LossWeights, diffusion_loss, refine_loss, total_loss
from .model import GuidedNoiseNet, ModelConfig
from .schedule import DiffusionSchedule, build_schedule, ddim_step_v, forward_diffuse, v_target

log = logging.getLogger(__name__)

LOG_FIELDS = ["iter", "phase", "loss_diffusion", "loss_refine", "loss_total", "seconds"]


@dataclass
class TrainConfig:
    lr_phase1: float = 1e-5
    lr_phase2: float = 1e-5
    batch_phase1: int = 4
    batch_phase2: int = 1
    iters_phase1: int = 20_000
    iters_phase2: int = 5_000
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    grad_clip: float = 1.0
    seed: int = 0
    checkpoint_every: int = 0  # 0 = only at phase ends
    log_every: int = 10
    guidance_sampling: str = "group"  # "group" or "uniform"
    augment: bool = True
    T: int = 50
    schedule: str = "cosine"
    eta: float = 0.0
    loss: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossWeights(**self.loss)
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        if min(self.lr_phase1, self.lr_phase2) <= 0:
            raise InvalidConfigError("learning rates must be positive")
        if min(self.batch_phase1, self.batch_phase2) <= 0:
            raise InvalidConfigError("batch sizes must be positive")
        if self.iters_phase1 < 0 or self.iters_phase2 < 0:
            raise InvalidConfigError("iteration counts must be nonnegative")
        if self.guidance_sampling not in ("group", "uniform"):
            raise InvalidConfigError(f"unknown guidance_sampling {self.guidance_sampling!r}")
        if self.loss.t_split > self.T:
            raise InvalidConfigError("t_split cannot exceed T")

    @classmethod
    def paper_scale(cls, **overrides) -> "TrainConfig":
        base = dict(iters_phase1=300_000, iters_phase2=50_000)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

class TrainingExample(NamedTuple):
    c: np.ndarray
    x: np.ndarray
    x_r: np.ndarray
    c_r: np.ndarray
    target_id: int
    guidance_id: int


def guidance_pool(dataset: PairDataset, strategy: str = "group") -> list[list[int]]:
    """For every item, the indices its guidance pair may be drawn from."""
    n = len(dataset)
    if strategy == "uniform":
        everything = list(range(n))
        return [everything] * n
    members: dict[str, list[int]] = {}
    for i, g in enumerate(dataset.groups):
        members.setdefault(g, []).append(i)
    return [members[g] for g in dataset.groups]


def sample_training_example(dataset: PairDataset, rng: np.random.Generator,
                            strategy: str = "group", pool=None) -> TrainingExample:
    """Draw a target pair and a guidance pair independently.

    With ``strategy="group"`` the guidance comes from the target's noise group
    (all items when the dataset carries no labels); the target itself is a
    valid guidance draw.
    """
    if len(dataset) == 0:
        raise DatasetError("cannot sample from an empty dataset")
    pool = pool if pool is not None else guidance_pool(dataset, strategy)
    i = int(rng.integers(len(dataset)))
    candidates = pool[i]
    j = candidates[int(rng.integers(len(candidates)))]
    c, x = dataset.pair(i)
    c_r, x_r = dataset.pair(j)
    return TrainingExample(c, x, x_r, c_r, i, j)


def _dihedral(arrays, k: int, flip: bool):
    out = [np.rot90(a, k, axes=(0, 1)) for a in arrays]
    return [np.flip(a, axis=1) if flip else a for a in out]


def to_latent(imgs) -> Tensor:
    """(B, H, W, C) images in [0, 1] -> (B, C, H, W) tensor in [-1, 1]."""
    arr = np.ascontiguousarray(np.asarray(imgs, dtype=np.float32).transpose(0, 3, 1, 2))
    return torch.from_numpy(arr) * 2 - 1


def from_latent(x: Tensor) -> np.ndarray:
    return ((x.detach().cpu() + 1) / 2).permute(0, 2, 3, 1).numpy()


def diffusion_target(x: Tensor, c: Tensor, mode: str = "residual", scale: float = 1.0) -> Tensor:
    """The quantity the reverse process generates, given latent noisy/clean images."""
    return (x - c) * scale if mode == "residual" else x


def image_from_target(z: Tensor, c: Tensor, mode: str = "residual", scale: float = 1.0) -> Tensor:
    return z / scale + c if mode == "residual" else z


def collate(examples, rng: np.random.Generator | None = None):
    """Stack examples into latent tensors; with ``rng`` apply random dihedral
    transforms (shared within the target pair, independent for the guidance).
    """
    cols = [[], [], [], []]
    for ex in examples:
        target = [ex.c, ex.x]
        guide = [ex.x_r, ex.c_r]
        if rng is not None:
            target = _dihedral(target, int(rng.integers(4)), bool(rng.integers(2)))
            guide = _dihedral(guide, int(rng.integers(4)), bool(rng.integers(2)))
        for col, a in zip(cols, target + guide):
            col.append(a)
    return tuple(to_latent(np.stack(col)) for col in cols)


# ---------------------------------------------------------------------------
# Optimization steps
# ---------------------------------------------------------------------------

def make_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(model.parameters(), lr=cfg.lr_phase1, betas=(cfg.beta1, cfg.beta2),
                             weight_decay=cfg.weight_decay)


def _apply_update(loss: Tensor, model, opt, grad_clip: float) -> None:
    opt.zero_grad(set_to_none=True)
    loss.backward()
    if grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
    opt.step()


def random_diffusion_loss(model: GuidedNoiseNet, batch, schedule: DiffusionSchedule,
                          gen: torch.Generator) -> tuple[Tensor, Tensor]:
    c, x, x_r, c_r = batch
    z0 = diffusion_target(x, c, model.cfg.latent, model.cfg.residual_scale)
    t = torch.randint(1, schedule.T + 1, (x.shape[0],), generator=gen)
    eps = torch.randn(x.shape, generator=gen)
    x_t = forward_diffuse(z0, eps, t, schedule)
    v_hat = model(x_t, c, x_r, c_r, t)
    return diffusion_loss(v_hat, v_target(z0, eps, t, schedule)), t


def phase1_step(batch, model: GuidedNoiseNet, schedule: DiffusionSchedule, opt,
                gen: torch.Generator, grad_clip: float = 1.0, context: dict | None = None) -> float:
    """One diffusion-loss update on a latent batch ``(c, x, x_r, c_r)``."""
    model.train()
    loss, t = random_diffusion_loss(model, batch, schedule, gen)
    if not torch.isfinite(loss):
        raise NonFiniteLossError("non-finite diffusion loss", t=t.tolist(), **(context or {}))
    _apply_update(loss, model, opt, grad_clip)
    return loss.item()


def sample_trajectory(model: GuidedNoiseNet, c: Tensor, x_r: Tensor, c_r: Tensor,
                      schedule: DiffusionSchedule, x_T: Tensor, track_last: int = 0,
                      noises=None) -> tuple[Tensor, int]:
    """Run the reverse process from ``x_T`` to step 0.

    The final ``track_last`` steps are recorded for autograd; earlier steps run
    under ``no_grad``. Returns the final latent and the number of tracked
    network calls. ``noises`` maps step -> noise tensor for stochastic steps.
    """
    x = x_T
    tracked = 0
    for t in range(schedule.T, 0, -1):
        noise = noises.get(t) if noises else None
        if t > track_last:
            with torch.no_grad():
                v = model(x, c, x_r, c_r, t)
                x = ddim_step_v(x, v, t, t - 1, schedule, noise)
        else:
            v = model(x, c, x_r, c_r, t)
            tracked += 1
            x = ddim_step_v(x, v, t, t - 1, schedule, noise)
    return x, tracked


def _stochastic_noises(schedule: DiffusionSchedule, shape, gen: torch.Generator) -> dict:
    return {t: torch.randn(shape, generator=gen)
            for t in range(schedule.T, 0, -1) if schedule.sigma[t - 1] > 0}


def phase2_step(example, model: GuidedNoiseNet, schedule: DiffusionSchedule, opt,
                w: LossWeights, gen: torch.Generator, grad_clip: float = 1.0,
                context: dict | None = None) -> tuple[float, float, int]:
    """One refine update. Returns (diffusion loss, refine loss, tracked calls)."""
    model.train()
    c, x, x_r, c_r = example
    x_T = torch.randn(x.shape, generator=gen)
    noises = _stochastic_noises(schedule, x.shape, gen)
    z0_hat, tracked = sample_trajectory(model, c, x_r, c_r, schedule, x_T, w.t_split, noises)
    x0_hat = image_from_target(z0_hat, c, model.cfg.latent, model.cfg.residual_scale)
    l_ref = refine_loss((x0_hat + 1) / 2, (x + 1) / 2, (c + 1) / 2, w)
    l_diff, t = random_diffusion_loss(model, example, schedule, gen)
    loss = total_loss(l_diff, l_ref, w)
    if not torch.isfinite(loss):
        raise NonFiniteLossError("non-finite refine-phase loss", t=t.tolist(), **(context or {}))
    _apply_update(loss, model, opt, grad_clip)
    return l_diff.item(), l_ref.item(), tracked


# ---------------------------------------------------------------------------
# Trainer with checkpoint/resume
# ---------------------------------------------------------------------------

def _encode_torch_state(gen: torch.Generator) -> str:
    return base64.b64encode(gen.get_state().numpy().tobytes()).decode("ascii")


def _decode_torch_state(s: str) -> torch.Tensor:
    return torch.from_numpy(np.frombuffer(base64.b64decode(s), dtype=np.uint8).copy())


def model_tensors(model: torch.nn.Module) -> dict:
    return {f"model/{k}": v for k, v in model.state_dict().items()}


def load_model(path, device: str = "cpu") -> tuple[GuidedNoiseNet, DiffusionSchedule, dict]:
    """Rebuild a network and its schedule from a checkpoint file."""
    meta, tensors = ckpt.load(path)
    if "train_config" not in meta:
        raise CheckpointError(f"{path}: not a synthesis-model checkpoint")
    cfg = TrainConfig.from_dict(meta["train_config"])
    model = GuidedNoiseNet(cfg.model)
    state = {k[len("model/"):]: torch.from_numpy(v) for k, v in tensors.items()
             if k.startswith("model/")}
    _load_state_strict(model, state, path)
    model.to(device).eval()
    return model, build_schedule(cfg.T, cfg.schedule, cfg.eta), meta


def _load_state_strict(model: torch.nn.Module, state: dict, path) -> None:
    expected = model.state_dict()
    missing = sorted(set(expected) - set(state))
    if missing:
        raise CheckpointError(f"{path}: missing tensors {missing[:3]}")
    for k, v in expected.items():
        if tuple(state[k].shape) != tuple(v.shape):
            raise CheckpointError(f"{path}: tensor {k} has shape {tuple(state[k].shape)}, "
                                  f"expected {tuple(v.shape)}")
    model.load_state_dict(state, strict=True)


class Trainer:
    """Stateful driver for both phases; owns the only writable model copy."""

    def __init__(self, cfg: TrainConfig, dataset: PairDataset, model: GuidedNoiseNet | None = None):
        if len(dataset) == 0:
            raise DatasetError("training dataset is empty")
        self.cfg = cfg
        self.dataset = dataset
        torch.manual_seed(cfg.seed)
        self.model = model or GuidedNoiseNet(cfg.model)
        self.schedule = build_schedule(cfg.T, cfg.schedule, cfg.eta)
        self.opt = make_optimizer(self.model, cfg)
        self.gen = torch.Generator().manual_seed(cfg.seed)
        self.data_rng = np.random.default_rng(cfg.seed)
        self.pool = guidance_pool(dataset, cfg.guidance_sampling)
        self.iteration = 0
        self.last_tracked_calls = 0

    @property
    def total_iters(self) -> int:
        return self.cfg.iters_phase1 + self.cfg.iters_phase2

    def phase_of(self, it: int) -> int:
        return 1 if it < self.cfg.iters_phase1 else 2

    def _examples(self, n: int):
        return [sample_training_example(self.dataset, self.data_rng, self.cfg.guidance_sampling,
                                        self.pool) for _ in range(n)]

    def step(self) -> dict:
        """Run one iteration of whichever phase is current."""
        it = self.iteration
        phase = self.phase_of(it)
        lr = self.cfg.lr_phase1 if phase == 1 else self.cfg.lr_phase2
        for group in self.opt.param_groups:
            group["lr"] = lr
        batch_size = self.cfg.batch_phase1 if phase == 1 else self.cfg.batch_phase2
        examples = self._examples(batch_size)
        batch = collate(examples, self.data_rng if self.cfg.augment else None)
        context = {"iteration": it, "data_ids": [(e.target_id, e.guidance_id) for e in examples]}
        if phase == 1:
            l_diff = phase1_step(batch, self.model, self.schedule, self.opt, self.gen,
                                 self.cfg.grad_clip, context)
            l_ref = 0.0
            self.last_tracked_calls = 0
        else:
            l_diff, l_ref, self.last_tracked_calls = phase2_step(
                batch, self.model, self.schedule, self.opt, self.cfg.loss, self.gen,
                self.cfg.grad_clip, context)
        self.iteration += 1
        return {"iter": it, "phase": phase, "loss_diffusion": l_diff, "loss_refine": l_ref,
                "loss_total": l_diff + self.cfg.loss.lam * l_ref}

    # -- persistence --------------------------------------------------------
    def state(self) -> tuple[dict, dict]:
        tensors = model_tensors(self.model)
        names = {id(p): n for n, p in self.model.named_parameters()}
        steps = {}
        for p, st in self.opt.state.items():
            n = names[id(p)]
            tensors[f"optim/{n}/exp_avg"] = st["exp_avg"]
            tensors[f"optim/{n}/exp_avg_sq"] = st["exp_avg_sq"]
            steps[n] = float(st["step"])
        meta = {
            "kind": "guidnoise-model",
            "train_config": self.cfg.to_dict(),
            "iteration": self.iteration,
            "optimizer_steps": steps,
            "rng": {"torch": _encode_torch_state(self.gen),
                    "numpy": self.data_rng.bit_generator.state},
        }
        return meta, tensors

    def save(self, path) -> Path:
        meta, tensors = self.state()
        ckpt.save(path, tensors, meta)
        return Path(path)

    @classmethod
    def resume(cls, path, dataset: PairDataset, cfg: TrainConfig | None = None) -> "Trainer":
        """Restore model, optimizer and RNG state; ``cfg`` may extend iteration counts."""
        meta, tensors = ckpt.load(path)
        saved = TrainConfig.from_dict(meta["train_config"])
        trainer = cls(cfg or saved, dataset)
        state = {k[len("model/"):]: torch.from_numpy(v) for k, v in tensors.items()
                 if k.startswith("model/")}
        _load_state_strict(trainer.model, state, path)
        params = dict(trainer.model.named_parameters())
        for n, step in meta.get("optimizer_steps", {}).items():
            trainer.opt.state[params[n]] = {
                "step": torch.tensor(step),
                "exp_avg": torch.from_numpy(tensors[f"optim/{n}/exp_avg"]),
                "exp_avg_sq": torch.from_numpy(tensors[f"optim/{n}/exp_avg_sq"]),
            }
        trainer.gen.set_state(_decode_torch_state(meta["rng"]["torch"]))
        trainer.data_rng.bit_generator.state = meta["rng"]["numpy"]
        trainer.iteration = int(meta["iteration"])
        return trainer

    # -- main loop ----------------------------------------------------------
    def run(self, out_dir=None, until: int | None = None, log_path=None) -> list[dict]:
        """Train up to iteration ``until`` (default: the end of phase 2).

        With ``out_dir``, writes ``train_log.csv``, ``phase1.gnck`` at the end of
        phase 1, ``final.gnck`` at the end, and ``ckpt_XXXXXXX.gnck`` every
        ``checkpoint_every`` iterations.
        """
        until = self.total_iters if until is None else min(until, self.total_iters)
        out = Path(out_dir) if out_dir is not None else None
        writer = fh = None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            log_path = log_path or out / "train_log.csv"
        if log_path is not None:
            log_path = Path(log_path)
            fresh = not log_path.exists() or self.iteration == 0
            fh = open(log_path, "w" if fresh else "a", newline="")
            writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
            if fresh:
                writer.writeheader()
        history = []
        start = time.perf_counter()
        try:
            if out is not None and self.iteration == 0 and self.cfg.iters_phase1 == 0:
                self.save(out / "phase1.gnck")
            while self.iteration < until:
                row = self.step()
                history.append(row)
                it = self.iteration
                if writer and (it % self.cfg.log_every == 0 or it == until):
                    writer.writerow({**row, "seconds": round(time.perf_counter() - start, 3)})
                    fh.flush()
                if it % 500 == 0:
                    log.info("iter %d phase %d loss %.5f", it, row["phase"], row["loss_total"])
                if out is not None:
                    if it == self.cfg.iters_phase1:
                        self.save(out / "phase1.gnck")
                    if self.cfg.checkpoint_every and it % self.cfg.checkpoint_every == 0:
                        self.save(out / f"ckpt_{it:07d}.gnck")
                    if it == self.total_iters:
                        self.save(out / "final.gnck")
        finally:
            if fh is not None:
                fh.close()
        return history


def train(cfg: TrainConfig, dataset: PairDataset, out_dir=None) -> Trainer:
    """Run phase 1 then phase 2 from scratch."""
    trainer = Trainer(cfg, dataset)
    trainer.run(out_dir)
    return trainer
