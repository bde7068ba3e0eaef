"""Noise schedule, forward noising, and DDPM/DDIM reverse steps.

Latents are images themselves (identity encoder), scaled from ``[0, 1]`` to
``[-1, 1]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch

from .errors import DimensionError, ParameterError


@dataclass(frozen=True)
class NoiseSchedule:
    beta: torch.Tensor
    alpha: torch.Tensor
    alpha_bar: torch.Tensor

    @property
    def T(self) -> int:
        return self.beta.numel()

    def check_index(self, t: int) -> None:
        if not 0 <= t < self.T:
            raise IndexError(f"timestep {t} outside [0, {self.T})")


def linear_schedule(T: int = 200, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 2:
        raise ParameterError(f"schedule needs T >= 2, got {T}")
    beta = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    alpha = 1.0 - beta
    return NoiseSchedule(beta=beta, alpha=alpha, alpha_bar=torch.cumprod(alpha, 0))


def _per_sample(values: torch.Tensor, t, like: torch.Tensor) -> torch.Tensor:
    """Gather schedule values at ``t`` (int or per-sample index tensor), broadcastable to ``like``."""
    if isinstance(t, torch.Tensor) and t.dim() > 0:
        v = values[t.long()].to(like.dtype)
        return v.reshape(-1, *([1] * (like.dim() - 1)))
    return values[int(t)].to(like.dtype)


def add_noise(z0: torch.Tensor, t, eps: torch.Tensor, s: NoiseSchedule) -> torch.Tensor:
    if z0.shape != eps.shape:
        raise DimensionError("add_noise: z0 and eps shapes differ")
    if isinstance(t, torch.Tensor) and t.dim() > 0:
        if t.min() < 0 or t.max() >= s.T:
            raise IndexError("add_noise: timestep out of range")
    else:
        s.check_index(int(t))
    ab = _per_sample(s.alpha_bar, t, z0)
    return torch.sqrt(ab) * z0 + torch.sqrt(1 - ab) * eps


def ddpm_step(z_t: torch.Tensor, eps_hat: torch.Tensor, t: int, s: NoiseSchedule,
              noise: torch.Tensor | None = None) -> torch.Tensor:
    """Ancestral step ``t -> t-1``; ``noise`` is ignored at ``t = 0``."""
    s.check_index(t)
    beta = s.beta[t].item()
    mean = (z_t - beta / (1 - s.alpha_bar[t].item()) ** 0.5 * eps_hat) / s.alpha[t].item() ** 0.5
    if t > 0 and noise is not None:
        mean = mean + beta**0.5 * noise
    return mean


def ddim_step(z_t: torch.Tensor, eps_hat: torch.Tensor, t: int, t_prev: int, s: NoiseSchedule) -> torch.Tensor:
    """Deterministic (eta = 0) step ``t -> t_prev``; ``t_prev = -1`` lands on the clean estimate."""
    s.check_index(t)
    if t_prev >= t:
        raise ParameterError(f"ddim_step: t_prev ({t_prev}) must precede t ({t})")
    ab = s.alpha_bar[t].item()
    ab_prev = 1.0 if t_prev < 0 else s.alpha_bar[t_prev].item()
    z0_hat = (z_t - (1 - ab) ** 0.5 * eps_hat) / ab**0.5
    return ab_prev**0.5 * z0_hat + (1 - ab_prev) ** 0.5 * eps_hat


def ddim_timesteps(T: int, steps: int) -> list[int]:
    if steps < 1:
        raise ParameterError("need at least one sampling step")
    steps = min(steps, T)
    ts = torch.linspace(T - 1, 0, steps, dtype=torch.float64).round().long().tolist()
    return sorted(set(ts), reverse=True)


def initial_noise(seeds: Sequence[int], shape: Sequence[int], dtype=torch.float32) -> torch.Tensor:
    """One independently seeded Gaussian draw per sample, so a sample never depends on its batch."""
    draws = [torch.randn(*shape, generator=torch.Generator().manual_seed(int(sd)), dtype=torch.float64)
             for sd in seeds]
    return torch.stack(draws).to(dtype)


def terminal_prior(noise: torch.Tensor, data_mean, data_var, s: NoiseSchedule) -> torch.Tensor:
    """Map standard noise onto the Gaussian whose moments match ``q(z_T)``.

    With this schedule ``alpha_bar[T-1]`` stays well above zero, so ``z_T`` still holds
    a scaled copy of the data; starting from ``N(0, I)`` would put the sampler off the
    distribution it was trained on. Zero mean and unit variance give back ``N(0, I)``.
    """
    ab = s.alpha_bar[-1].item()
    mean = ab**0.5 * data_mean
    std = (ab * data_var + (1 - ab)) ** 0.5
    return (mean + std * noise).to(noise.dtype)


@torch.no_grad()
def sample(model, fused_input, tokens, s: NoiseSchedule, steps: int, seed,
           method: str = "ddim", image_shape=(3, 16, 16)) -> torch.Tensor:
    """Generate images in ``[0, 1]`` from seeded noise.

    ``model.predict_eps(z_t, t, tokens, fused_input)`` supplies the noise estimate. A
    model exposing ``prior_moments()`` starts from :func:`terminal_prior`;
    ``fused_input=None`` samples without any control branch. ``seed`` is an int or
    one seed per batch element.
    """
    batch = tokens.shape[0]
    seeds = [seed + i for i in range(batch)] if isinstance(seed, int) else list(seed)
    dtype = model.dtype
    z = initial_noise(seeds, image_shape, dtype)
    moments = getattr(model, "prior_moments", None)
    if moments is not None:
        z = terminal_prior(z, *moments(), s)
    if method == "ddim":
        ts = ddim_timesteps(s.T, steps)
        for i, t in enumerate(ts):
            t_prev = ts[i + 1] if i + 1 < len(ts) else -1
            eps_hat = model.predict_eps(z, torch.full((batch,), t, dtype=torch.long), tokens, fused_input)
            z = ddim_step(z, eps_hat, t, t_prev, s)
    elif method == "ddpm":
        gen = torch.Generator().manual_seed(int(seeds[0]) ^ 0x5EED)
        for t in range(s.T - 1, -1, -1):
            eps_hat = model.predict_eps(z, torch.full((batch,), t, dtype=torch.long), tokens, fused_input)
            noise = torch.randn(z.shape, generator=gen, dtype=torch.float64).to(dtype)
            z = ddpm_step(z, eps_hat, t, s, noise)
    else:
        raise ParameterError(f"unknown sampler {method!r}")
    return ((z + 1) / 2).clamp(0, 1)
