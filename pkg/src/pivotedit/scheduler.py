"""Closed-form diffusion math: the noise schedule, forward noising,
deterministic (eta=0) sampling and its algebraic inverse, and the guided
noise-prediction combination.

The cumulative product of (1 - beta) is called ``alpha_bar`` throughout,
even where common shorthand writes it as a plain alpha. Index 0 is the
clean endpoint and is treated as alpha_bar == 1 exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import torch

from .core_io import ValidationError


@dataclass
class NoiseSchedule:
    """Linear-beta schedule with an evenly spaced sampling subsequence.

    ``alpha_bar[i]`` holds the cumulative product for train step i+1
    (1-indexed steps 1..T). ``sampling_indices`` is strictly decreasing,
    e.g. [1000, 950, ..., 50]; the step below the last index is the clean
    endpoint 0.
    """

    num_train_steps: int
    alpha_bar: torch.Tensor
    sampling_indices: list[int] = field(default_factory=list)

    def __post_init__(self):
        ab = torch.as_tensor(self.alpha_bar, dtype=torch.float64)
        if ab.ndim != 1 or ab.numel() != self.num_train_steps:
            raise ValidationError("alpha_bar length must equal num_train_steps")
        if not ((ab > 0) & (ab <= 1)).all():
            raise ValidationError("alpha_bar entries must lie in (0, 1]")
        if ab.numel() > 1 and not (ab[1:] < ab[:-1]).all():
            raise ValidationError("alpha_bar must be strictly decreasing")
        idx = [int(i) for i in self.sampling_indices]
        if idx:
            if any(not 1 <= i <= self.num_train_steps for i in idx):
                raise ValidationError("sampling indices must lie in 1..T")
            if any(a <= b for a, b in zip(idx, idx[1:])):
                raise ValidationError("sampling indices must be strictly decreasing")
        self.alpha_bar = ab
        self.sampling_indices = idx

    @property
    def num_sampling_steps(self) -> int:
        return len(self.sampling_indices)

    def alpha_bar_at(self, t: int) -> float:
        """Cumulative product at train step t; t == 0 is the clean endpoint."""
        if t == 0:
            return 1.0
        if not 1 <= t <= self.num_train_steps:
            raise ValidationError(f"step index {t} outside 0..{self.num_train_steps}")
        return float(self.alpha_bar[t - 1])

    def sampling_pairs(self) -> list[tuple[int, int]]:
        """(from, to) index pairs walked during denoising, ending at 0."""
        chain = list(self.sampling_indices) + [0]
        return list(zip(chain[:-1], chain[1:]))

    def inversion_pairs(self) -> list[tuple[int, int]]:
        """(from, to) index pairs walked during inversion, starting at 0."""
        chain = [0] + list(reversed(self.sampling_indices))
        return list(zip(chain[:-1], chain[1:]))


def make_schedule(
    num_train_steps: int,
    beta_start: float,
    beta_end: float,
    num_sampling_steps: int,
) -> NoiseSchedule:
    """Build a linear-beta schedule with N evenly spaced sampling indices."""
    T, N = int(num_train_steps), int(num_sampling_steps)
    if T < 1:
        raise ValidationError("num_train_steps must be positive")
    if not (0 < beta_start <= beta_end < 1):
        raise ValidationError("betas must satisfy 0 < beta_start <= beta_end < 1")
    if not 1 <= N <= T:
        raise ValidationError("need 1 <= num_sampling_steps <= num_train_steps")
    betas = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    alpha_bar = torch.cumprod(1.0 - betas, dim=0)
    indices = [int(round(T * k / N)) for k in range(N, 0, -1)]
    return NoiseSchedule(T, alpha_bar, indices)


def add_noise(
    z0: torch.Tensor, t: int, eps: torch.Tensor, sched: NoiseSchedule
) -> torch.Tensor:
    """Forward noising: sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps."""
    if eps.shape != z0.shape:
        raise ValidationError("noise shape must match the latent")
    ab = sched.alpha_bar_at(t)
    return ab**0.5 * z0 + (1.0 - ab) ** 0.5 * eps


def _step_alphas(
    z: torch.Tensor, eps_hat: torch.Tensor, ab_from: float, ab_to: float
) -> torch.Tensor:
    """Deterministic transition between two noise levels with a fixed
    noise prediction; shared by the sampler and its inverse."""
    x0 = (z - (1.0 - ab_from) ** 0.5 * eps_hat) / ab_from**0.5
    return ab_to**0.5 * x0 + (1.0 - ab_to) ** 0.5 * eps_hat


def ddim_step(
    z_t: torch.Tensor,
    eps_hat: torch.Tensor,
    t: int,
    t_prev: int,
    sched: NoiseSchedule,
) -> torch.Tensor:
    """One denoising transition from step t down to t_prev (t_prev may be
    the clean endpoint 0)."""
    if not t_prev < t:
        raise ValidationError(f"ddim_step needs t_prev < t, got {t_prev} >= {t}")
    if eps_hat.shape != z_t.shape:
        raise ValidationError("noise prediction shape must match the latent")
    return _step_alphas(z_t, eps_hat, sched.alpha_bar_at(t), sched.alpha_bar_at(t_prev))


def ddim_invert_step(
    z_t: torch.Tensor,
    eps_hat: torch.Tensor,
    t: int,
    t_next: int,
    sched: NoiseSchedule,
) -> torch.Tensor:
    """One inversion transition from step t up to t_next. Exact algebra;
    the noise-prediction approximation is the caller's concern."""
    if not t_next > t:
        raise ValidationError(f"ddim_invert_step needs t_next > t, got {t_next} <= {t}")
    if eps_hat.shape != z_t.shape:
        raise ValidationError("noise prediction shape must match the latent")
    return _step_alphas(z_t, eps_hat, sched.alpha_bar_at(t), sched.alpha_bar_at(t_next))


@dataclass
class GuidanceInputs:
    """Everything the guided noise combination consumes for one step."""

    eps_cond: torch.Tensor
    eps_uncond: torch.Tensor
    omega: float
    stdg: Optional[torch.Tensor] = None

    def __post_init__(self):
        if self.eps_uncond.shape != self.eps_cond.shape:
            raise ValidationError("conditional/unconditional shapes differ")
        if self.stdg is not None and self.stdg.shape != self.eps_cond.shape:
            raise ValidationError("guidance term shape differs from predictions")
        if self.omega < 0:
            raise ValidationError("guidance weight must be nonnegative")


def guided_epsilon(g: GuidanceInputs) -> torch.Tensor:
    """eps_c + omega * (eps_c - eps_u) + G, with G == 0 when absent."""
    out = g.eps_cond + g.omega * (g.eps_cond - g.eps_uncond)
    if g.stdg is not None:
        out = out + g.stdg
    return out
