"""Ancestral DDPM sampling with classifier-free guidance."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .denoiser import Condition, DenoiserNetwork
from .errors import ArgumentError
from .schedule import NoiseSchedule, to_pixel_range


@dataclass(frozen=True)
class SamplerConfig:
    cfg_scale: float = 3.0
    seed: int = 0
    # Only fixed sigma_t^2 = beta_t is supported.
    variance_mode: str = "fixed_beta"

    def __post_init__(self):
        if not np.isfinite(self.cfg_scale) or self.cfg_scale < 0:
            raise ArgumentError(f"cfg_scale must be finite and >= 0, got {self.cfg_scale}")
        if self.variance_mode != "fixed_beta":
            raise ArgumentError(f"unsupported variance mode {self.variance_mode!r}")


def guided_noise(net: DenoiserNetwork, x_t, t: int, cond: Condition, scale: float):
    """``(1 - s) * eps_null + s * eps_cond``; exact at ``s = 0`` and ``s = 1``."""
    eps_null = net.predict(x_t, t, Condition.null())
    if cond.kind.value == "null":
        return eps_null
    eps_cond = net.predict(x_t, t, cond)
    return (1.0 - scale) * eps_null + scale * eps_cond


def ddpm_sample(net: DenoiserNetwork, schedule: NoiseSchedule, cond: Condition,
                cfg: SamplerConfig, n: int = 1) -> np.ndarray:
    """Draw ``n`` images of shape ``(n, H, W, C)`` with pixel values in [0, 1]."""
    if schedule.T != net.arch.T:
        raise ArgumentError(f"schedule T={schedule.T} != network T={net.arch.T}")
    cond.row(net.K)
    rng = np.random.default_rng(cfg.seed)
    shape = (n,) + net.arch.image_shape
    x = rng.standard_normal(shape)
    for t in range(schedule.T, 0, -1):
        i = t - 1
        eps_hat = guided_noise(net, x.astype(net.dtype), t, cond, cfg.cfg_scale)
        coef = schedule.beta[i] / schedule.sqrt_one_minus_alpha_bar[i]
        mean = (x - coef * eps_hat) / np.sqrt(schedule.alpha[i])
        if t > 1:
            x = mean + np.sqrt(schedule.beta[i]) * rng.standard_normal(shape)
        else:
            x = mean
    return to_pixel_range(x)
