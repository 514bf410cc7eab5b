"""Noise schedule, forward noising, and the ancestral reverse sampler.

Timesteps run 1..T; schedule arrays are stored 0-based (index ``t - 1``).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, ContractError, InvalidShapeError

SIGMA_MODES = ("cumulative", "per_step")


@dataclass(frozen=True)
class NoiseSchedule:
    steps: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma_guidance: np.ndarray
    sigma_mode: str = "cumulative"

    def _check(self, t: int):
        if not 1 <= t <= self.steps:
            raise ContractError(f"timestep {t} outside 1..{self.steps}")

    def ab(self, t: int) -> float:
        self._check(t)
        return float(self.alpha_bar[t - 1])

    def sigma(self, t: int) -> float:
        self._check(t)
        return float(self.sigma_guidance[t - 1])


def build_schedule(steps: int, beta_start: float, beta_end: float,
                   sigma_mode: str = "cumulative") -> NoiseSchedule:
    """Linear beta schedule.

    ``sigma_mode`` picks which alpha enters the guidance noise scale
    sqrt((1 - a) / a): the cumulative product (default) or the per-step value.
    """
    if int(steps) != steps or steps < 1:
        raise ConfigError(f"steps must be a positive integer, got {steps}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if sigma_mode not in SIGMA_MODES:
        raise ConfigError(f"sigma_mode must be one of {SIGMA_MODES}, got {sigma_mode!r}")
    beta = np.linspace(beta_start, beta_end, int(steps), dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    a = alpha_bar if sigma_mode == "cumulative" else alpha
    sigma = np.sqrt((1.0 - a) / a)
    return NoiseSchedule(int(steps), beta, alpha, alpha_bar, sigma, sigma_mode)


@dataclass
class LatentVideo:
    """Latent frames ``(L, C, H, W)``, or a batch ``(B, L, C, H, W)``, tagged with a timestep."""

    values: np.ndarray
    t: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim not in (4, 5) or min(self.values.shape) < 1:
            raise InvalidShapeError(f"latent video needs (L,C,H,W) or (B,L,C,H,W), got {self.values.shape}")
        if not np.isfinite(self.values).all():
            raise ContractError("latent video contains non-finite values")

    @property
    def batched(self) -> bool:
        return self.values.ndim == 5

    @property
    def shape(self):
        return self.values.shape


def forward_diffuse(z0: LatentVideo, t: int, eps: np.ndarray, schedule: NoiseSchedule) -> LatentVideo:
    eps = np.asarray(eps)
    if eps.shape != z0.shape:
        raise InvalidShapeError(f"noise shape {eps.shape} does not match latent shape {z0.shape}")
    ab = schedule.ab(t)
    return LatentVideo(np.sqrt(ab) * z0.values + np.sqrt(1.0 - ab) * eps, t)


def ddpm_step(z_t: LatentVideo, eps_hat: np.ndarray, t: int, schedule: NoiseSchedule,
              fresh_noise: Optional[np.ndarray] = None) -> LatentVideo:
    """One ancestral step t -> t-1; no noise is added on the final step."""
    schedule._check(t)
    eps_hat = np.asarray(eps_hat)
    if eps_hat.shape != z_t.shape:
        raise InvalidShapeError(f"eps_hat shape {eps_hat.shape} does not match latent shape {z_t.shape}")
    beta, alpha, ab = schedule.beta[t - 1], schedule.alpha[t - 1], schedule.alpha_bar[t - 1]
    mean = (z_t.values - (beta / np.sqrt(1.0 - ab)) * eps_hat) / np.sqrt(alpha)
    if t > 1:
        if fresh_noise is None or np.shape(fresh_noise) != z_t.shape:
            raise ContractError(f"step {t} needs fresh noise of shape {z_t.shape}")
        mean = mean + np.sqrt(beta) * np.asarray(fresh_noise)
    return LatentVideo(mean, t - 1)


Denoiser = Callable[[np.ndarray, int, object], np.ndarray]
GuidanceHook = Callable[[np.ndarray, int], np.ndarray]


def sample(denoiser: Denoiser, conditioning, schedule: NoiseSchedule,
           seed: int | Sequence[int], shape: Sequence[int],
           guidance: Optional[GuidanceHook] = None) -> LatentVideo:
    """Ancestral sampling from pure noise.

    ``shape`` is one video's ``(L, C, H, W)``. A list of seeds samples a batch,
    one generator per item, so each item is independent of its batch mates.
    ``guidance(z, t)`` may rewrite the batch latent before each denoiser call;
    it never consumes randomness.
    """
    batched = not np.isscalar(seed)
    seeds = list(seed) if batched else [seed]
    rngs = [np.random.default_rng(s) for s in seeds]
    shape = tuple(shape)
    z = np.stack([r.standard_normal(shape) for r in rngs])
    for t in range(schedule.steps, 0, -1):
        if guidance is not None:
            z = guidance(z, t)
        eps = np.asarray(denoiser(z, t, conditioning))
        if eps.shape != z.shape:
            raise ContractError(f"denoiser returned shape {eps.shape}, expected {z.shape}")
        noise = np.stack([r.standard_normal(shape) for r in rngs]) if t > 1 else None
        z = ddpm_step(LatentVideo(z, t), eps, t, schedule, noise).values
    return LatentVideo(z if batched else z[0], 0)
