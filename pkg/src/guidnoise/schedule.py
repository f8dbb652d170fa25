"""Diffusion time discretization, forward corruption and the DDIM reverse step.

Step indices run from 0 (data end) to ``T`` (pure noise). ``alpha_bar[t]`` is the
cumulative signal coefficient; all coefficient arithmetic happens in float64 and
is cast to the tensor dtype at the point of use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np
import torch
from torch import Tensor

from .errors import InvalidConfigError, InvalidSigmaError, ShapeError

Step = Union[int, Tensor]

COSINE_OFFSET = 0.008
# Per-step retention floor: alpha_bar[t] >= MIN_RETENTION * alpha_bar[t-1] (beta <= 0.999).
MIN_RETENTION = 1e-3


@dataclass(frozen=True)
class DiffusionSchedule:
    T: int
    alpha_bar: np.ndarray  # (T+1,), index 0 = data end
    sigma: np.ndarray  # (T,), sigma[t-1] is the stochastic scale of step t

    def __post_init__(self):
        ab, sg = self.alpha_bar, self.sigma
        if ab.shape != (self.T + 1,) or sg.shape != (self.T,):
            raise InvalidConfigError("schedule arrays do not match T")
        if not np.all(np.diff(ab) < 0):
            raise InvalidConfigError("alpha_bar must be strictly decreasing")
        if not (np.all(ab > 0) and np.all(ab <= 1)):
            raise InvalidConfigError("alpha_bar must lie in (0, 1]")
        if ab[0] < 1 - 1e-5 or ab[-1] > 1e-3:
            raise InvalidConfigError(
                f"alpha_bar endpoints out of range: {ab[0]:.3g}, {ab[-1]:.3g}")
        if np.any(sg < 0) or np.any(sg > np.sqrt(1 - ab[:-1]) + 1e-12):
            raise InvalidConfigError("sigma outside [0, sqrt(1 - alpha_bar[t-1])]")

    @property
    def deterministic(self) -> bool:
        return bool(np.all(self.sigma == 0))


def cosine_alpha_bar(t: float, T: int, s: float = COSINE_OFFSET) -> float:
    """Unnormalized cosine signal level at (possibly fractional) step ``t``."""
    return math.cos((t / T + s) / (1 + s) * math.pi / 2) ** 2


def build_schedule(T: int = 50, kind: str = "cosine", eta: float = 0.0) -> DiffusionSchedule:
    """Build a schedule of ``T`` steps.

    ``kind`` is ``"cosine"`` (default) or ``"linear"`` (DDPM betas rescaled to T
    steps). ``eta`` scales the DDIM stochasticity; 0 gives the fully
    deterministic sampler.
    """
    if not isinstance(T, (int, np.integer)) or T < 2:
        raise InvalidConfigError(f"T must be an integer >= 2, got {T!r}")
    if not 0.0 <= eta <= 1.0:
        raise InvalidConfigError(f"eta must lie in [0, 1], got {eta}")
    if kind == "cosine":
        ab = np.array([cosine_alpha_bar(t, T) for t in range(T + 1)], dtype=np.float64)
        ab = ab / ab[0]
    elif kind == "linear":
        scale = 1000.0 / T
        betas = np.linspace(scale * 1e-4, scale * 0.02, T, dtype=np.float64)
        ab = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    else:
        raise InvalidConfigError(f"unknown schedule kind {kind!r}")
    for t in range(1, T + 1):
        ab[t] = max(ab[t], MIN_RETENTION * ab[t - 1])

    return with_eta(DiffusionSchedule(T=int(T), alpha_bar=ab, sigma=np.zeros(T)), eta)


def _check_same_shape(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def _coef(values: np.ndarray, t: Step, like: Tensor) -> Tensor:
    """Gather ``values[t]`` and shape it to broadcast against ``like``."""
    if isinstance(t, Tensor) and t.ndim > 0:
        out = torch.as_tensor(values, dtype=torch.float64)[t.long().cpu()]
        return out.to(like.dtype).view(-1, *([1] * (like.ndim - 1))).to(like.device)
    return torch.tensor(float(values[int(t)]), dtype=like.dtype, device=like.device)


def _sqrt_pair(s: DiffusionSchedule, t: Step, like: Tensor) -> tuple[Tensor, Tensor]:
    return (_coef(np.sqrt(s.alpha_bar), t, like),
            _coef(np.sqrt(1.0 - s.alpha_bar), t, like))


def forward_diffuse(x0: Tensor, eps: Tensor, t: Step, s: DiffusionSchedule) -> Tensor:
    _check_same_shape(x0, eps)
    a, b = _sqrt_pair(s, t, x0)
    return a * x0 + b * eps


def v_target(x0: Tensor, eps: Tensor, t: Step, s: DiffusionSchedule) -> Tensor:
    _check_same_shape(x0, eps)
    a, b = _sqrt_pair(s, t, x0)
    return a * eps - b * x0


def eps_from_v(x_t: Tensor, v: Tensor, t: Step, s: DiffusionSchedule) -> Tensor:
    _check_same_shape(x_t, v)
    a, b = _sqrt_pair(s, t, x_t)
    return a * v + b * x_t


def x0_from_v(x_t: Tensor, v: Tensor, t: Step, s: DiffusionSchedule) -> Tensor:
    _check_same_shape(x_t, v)
    a, b = _sqrt_pair(s, t, x_t)
    return a * x_t - b * v


def _direction_scale(s: DiffusionSchedule, t: int, t_prev: int) -> tuple[float, float]:
    sig = float(s.sigma[t - 1])
    rest = 1.0 - float(s.alpha_bar[t_prev]) - sig * sig
    if rest < -1e-12:
        raise InvalidSigmaError(
            f"1 - alpha_bar[{t_prev}] - sigma^2 = {rest:.3g} < 0 at step {t}")
    return math.sqrt(max(rest, 0.0)), sig


def _check_steps(t: int, t_prev: int, s: DiffusionSchedule) -> None:
    if not 0 <= t_prev < t <= s.T:
        raise InvalidConfigError(f"need 0 <= t_prev < t <= T, got t={t}, t_prev={t_prev}")


def ddim_step(x_t: Tensor, eps_hat: Tensor, t: int, t_prev: int, s: DiffusionSchedule,
              noise: Tensor | None = None) -> Tensor:
    """One DDIM update from step ``t`` to ``t_prev`` given a noise estimate.

    ``noise`` is required exactly when the schedule's sigma at ``t`` is nonzero.
    """
    _check_same_shape(x_t, eps_hat)
    _check_steps(t, t_prev, s)
    direction, sig = _direction_scale(s, t, t_prev)
    ab_t, ab_prev = float(s.alpha_bar[t]), float(s.alpha_bar[t_prev])
    x0_hat = (x_t - math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(ab_t)
    out = math.sqrt(ab_prev) * x0_hat + direction * eps_hat
    return _add_noise(out, sig, noise)


def ddim_step_v(x_t: Tensor, v_hat: Tensor, t: int, t_prev: int, s: DiffusionSchedule,
                noise: Tensor | None = None) -> Tensor:
    """DDIM update driven directly by a v estimate.

    Algebraically identical to ``ddim_step(x_t, eps_from_v(...))`` but avoids the
    division by ``sqrt(alpha_bar[t])``, which is ill-conditioned near ``t = T``.
    """
    _check_same_shape(x_t, v_hat)
    _check_steps(t, t_prev, s)
    direction, sig = _direction_scale(s, t, t_prev)
    x0_hat = x0_from_v(x_t, v_hat, t, s)
    eps_hat = eps_from_v(x_t, v_hat, t, s)
    out = math.sqrt(float(s.alpha_bar[t_prev])) * x0_hat + direction * eps_hat
    return _add_noise(out, sig, noise)


def _add_noise(out: Tensor, sig: float, noise: Tensor | None) -> Tensor:
    if sig > 0:
        if noise is None:
            raise InvalidSigmaError("stochastic step requires a noise tensor")
        _check_same_shape(out, noise)
        return out + sig * noise
    if noise is not None:
        raise InvalidSigmaError("noise given for a deterministic step")
    return out


def with_eta(s: DiffusionSchedule, eta: float) -> DiffusionSchedule:
    """Same signal levels, DDIM stochasticity rescaled to ``eta``."""
    if not 0.0 <= eta <= 1.0:
        raise InvalidConfigError(f"eta must lie in [0, 1], got {eta}")
    prev, cur = s.alpha_bar[:-1], s.alpha_bar[1:]
    sigma = eta * np.sqrt((1 - prev) / (1 - cur)) * np.sqrt(1 - cur / prev)
    return DiffusionSchedule(T=s.T, alpha_bar=s.alpha_bar, sigma=sigma)
