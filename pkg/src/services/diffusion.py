"""Variance schedule and forward/reverse diffusion math, independent of any network.

Tensors are batched as (B, C, D, H, W); a timestep is either an int shared by
the batch or a (B,) integer tensor. Timesteps are 1-indexed, t in [1, T].
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np
import torch

from .errors import ConfigError

logger = logging.getLogger(__name__)

ALPHA_MIN = 0.001
ALPHA_MAX = 0.9999

Timestep = Union[int, torch.Tensor]
DenoiserFn = Callable[[torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]


@dataclass(frozen=True)
class ScheduleTable:
    """Per-step coefficients; arrays have length T + 1 and index 0 is the t = 0 anchor."""

    T: int
    alpha: np.ndarray = field(repr=False)
    alpha_bar: np.ndarray = field(repr=False)
    beta: np.ndarray = field(repr=False)
    sigma: np.ndarray = field(repr=False)

    def check_t(self, t: Timestep) -> None:
        if isinstance(t, torch.Tensor):
            lo, hi = int(t.min()), int(t.max())
        else:
            lo = hi = int(t)
        if lo < 1 or hi > self.T:
            raise ConfigError(f"timestep outside [1, {self.T}]: {lo}..{hi}", field="t")

    def coef(self, name: str, t: Timestep, like: torch.Tensor) -> torch.Tensor:
        """Coefficient `name` at t, broadcastable against `like`."""
        self.check_t(t)
        table = torch.as_tensor(getattr(self, name), dtype=like.dtype, device=like.device)
        if isinstance(t, torch.Tensor) and t.ndim > 0:
            values = table[t.long().to(like.device)]
            return values.reshape(-1, *([1] * (like.ndim - 1)))
        return table[int(t)]


def cosine_schedule(T: int, s_offset: float = 0.008) -> ScheduleTable:
    """Cosine variance schedule.

    alpha_bar follows f(t)/f(0) with f(u) = cos^2(((u/T + s)/(1 + s)) * pi/2);
    per-step alphas are clipped to [ALPHA_MIN, ALPHA_MAX] and alpha_bar is their
    running product, so the two stay consistent after clipping. The posterior
    standard deviation sigma_t = sqrt(beta_t (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t))
    vanishes at t = 1.

    Raises:
        ConfigError: T < 1 or s_offset <= 0
    """
    if int(T) != T or T < 1:
        raise ConfigError(f"T must be an integer >= 1, got {T}", field="T")
    if not s_offset > 0:
        raise ConfigError(f"s_offset must be > 0, got {s_offset}", field="s_offset")

    steps = np.arange(T + 1, dtype=np.float64)
    f = np.cos(((steps / T + s_offset) / (1.0 + s_offset)) * math.pi / 2.0) ** 2
    raw_bar = f / f[0]

    alpha = np.ones(T + 1, dtype=np.float64)
    alpha[1:] = np.clip(raw_bar[1:] / raw_bar[:-1], ALPHA_MIN, ALPHA_MAX)
    alpha_bar = np.cumprod(alpha)
    beta = 1.0 - alpha

    sigma = np.zeros(T + 1, dtype=np.float64)
    sigma[1:] = np.sqrt(beta[1:] * (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]))
    sigma[1] = 0.0

    for arr in (alpha, alpha_bar, beta, sigma):
        arr.setflags(write=False)
    return ScheduleTable(T=int(T), alpha=alpha, alpha_bar=alpha_bar, beta=beta, sigma=sigma)


@dataclass(frozen=True)
class DiffusionNorm:
    """Linear map between SUV [0, cutoff] and diffusion space [-1, 1]."""

    suv_cutoff: float = 20.0

    def to_diffusion(self, suv):
        """SUV clamped to the cutoff, then mapped to [-1, 1]. Works on arrays and tensors."""
        return suv.clip(0.0, self.suv_cutoff) / (self.suv_cutoff / 2.0) - 1.0

    def to_suv(self, x):
        """Inverse map, clamped to [0, cutoff]."""
        return ((x + 1.0) * (self.suv_cutoff / 2.0)).clip(0.0, self.suv_cutoff)


# =============================================================================
# FORWARD / REVERSE PROCESS
# =============================================================================


def forward_diffuse(x0: torch.Tensor, t: Timestep, eps: torch.Tensor, sched: ScheduleTable) -> torch.Tensor:
    """x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps."""
    if x0.shape != eps.shape:
        raise ConfigError(f"x0 {tuple(x0.shape)} and eps {tuple(eps.shape)} differ", field="eps")
    ab = sched.coef("alpha_bar", t, x0)
    return torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * eps


def predict_x0(x_t: torch.Tensor, eps_hat: torch.Tensor, t: Timestep, sched: ScheduleTable) -> torch.Tensor:
    """Invert the forward process for x0 and clamp to [-1, 1]."""
    return predict_x0_unclamped(x_t, eps_hat, t, sched).clamp(-1.0, 1.0)


def predict_x0_unclamped(
    x_t: torch.Tensor, eps_hat: torch.Tensor, t: Timestep, sched: ScheduleTable
) -> torch.Tensor:
    ab = sched.coef("alpha_bar", t, x_t)
    return (x_t - torch.sqrt(1.0 - ab) * eps_hat) / torch.sqrt(ab)


def reverse_step(
    x_t: torch.Tensor,
    eps_hat: torch.Tensor,
    t: Timestep,
    z: torch.Tensor | None,
    sched: ScheduleTable,
) -> torch.Tensor:
    """One ancestral step x_t -> x_{t-1}; z is ignored where sigma_t = 0."""
    a = sched.coef("alpha", t, x_t)
    ab = sched.coef("alpha_bar", t, x_t)
    mean = (x_t - ((1.0 - a) / torch.sqrt(1.0 - ab)) * eps_hat) / torch.sqrt(a)
    if z is None:
        return mean
    sigma = sched.coef("sigma", t, x_t)
    return mean + sigma * z


def _per_item_normal(
    shape: Sequence[int], generators: Sequence[torch.Generator], dtype: torch.dtype
) -> torch.Tensor:
    """Standard normal batch; item i is drawn from generators[i] only."""
    return torch.stack([torch.randn(tuple(shape[1:]), generator=g, dtype=dtype) for g in generators])


def _generators(condition: torch.Tensor, rng) -> list[torch.Generator]:
    generators = [rng] if isinstance(rng, torch.Generator) else list(rng)
    if len(generators) != condition.shape[0]:
        raise ConfigError(
            f"{len(generators)} generators for a batch of {condition.shape[0]}", field="rng"
        )
    return generators


@torch.no_grad()
def sample_chain(
    condition_lc: torch.Tensor,
    denoiser_fn: DenoiserFn,
    sched: ScheduleTable,
    rng: torch.Generator | Sequence[torch.Generator],
) -> torch.Tensor:
    """Run the conditional reverse chain from x_T ~ N(0, I) down to x_0.

    Args:
        condition_lc: normalized low-count patches, (B, 1, D, H, W)
        denoiser_fn: (x_t, condition, t) -> eps_hat, t a (B,) long tensor
        sched: schedule table
        rng: one generator per batch item (a bare generator for B = 1); each
            item's noise depends only on its own generator

    Returns:
        x_0 in diffusion space, same shape as the condition
    """
    generators = _generators(condition_lc, rng)
    dtype = condition_lc.dtype
    x = _per_item_normal(condition_lc.shape, generators, dtype)
    batch = condition_lc.shape[0]
    for t in range(sched.T, 0, -1):
        t_batch = torch.full((batch,), t, dtype=torch.long)
        eps_hat = denoiser_fn(x, condition_lc, t_batch)
        z = _per_item_normal(x.shape, generators, dtype) if t > 1 else None
        x = reverse_step(x, eps_hat, t, z, sched)
    return x


@torch.no_grad()
def one_step_estimate(
    condition_lc: torch.Tensor,
    denoiser_fn: DenoiserFn,
    sched: ScheduleTable,
    rng: torch.Generator | Sequence[torch.Generator],
) -> torch.Tensor:
    """Single x0 prediction from pure noise at t = T (fast segmentation mode)."""
    generators = _generators(condition_lc, rng)
    x = _per_item_normal(condition_lc.shape, generators, condition_lc.dtype)
    t_batch = torch.full((condition_lc.shape[0],), sched.T, dtype=torch.long)
    return predict_x0(x, denoiser_fn(x, condition_lc, t_batch), sched.T, sched)


def sample_timesteps(batch: int, T: int, generator: torch.Generator) -> torch.Tensor:
    """Uniform integer timesteps in [1, T], shape (batch,)."""
    return torch.randint(1, T + 1, (batch,), generator=generator)
