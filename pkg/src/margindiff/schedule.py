"""Linear variance schedule and the closed-form forward (noising) process.

Timesteps are 1-based throughout the package: ``t`` ranges over ``1..T`` and
array position ``t - 1`` holds the coefficients for step ``t``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, ConfigError

DEFAULT_T = 1000
DESK_T = 200
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sqrt_alpha_bar: np.ndarray
    sqrt_one_minus_alpha_bar: np.ndarray
    beta_start: float
    beta_end: float

    def params(self) -> dict:
        """Parameters sufficient to rebuild the schedule (checkpoint header)."""
        return {"kind": "linear", "T": self.T,
                "beta_start": self.beta_start, "beta_end": self.beta_end}

    @classmethod
    def from_params(cls, params: dict) -> "NoiseSchedule":
        if params.get("kind", "linear") != "linear":
            raise ConfigError(f"unsupported schedule kind {params.get('kind')!r}")
        return build_linear_schedule(int(params["T"]), float(params["beta_start"]),
                                     float(params["beta_end"]))

    def check_timestep(self, t) -> int:
        t_int = int(t)
        if t_int != t or not 1 <= t_int <= self.T:
            raise ArgumentError(f"timestep {t!r} outside 1..{self.T}")
        return t_int


def build_linear_schedule(T: int = DEFAULT_T, beta_start: float = DEFAULT_BETA_START,
                          beta_end: float = DEFAULT_BETA_END) -> NoiseSchedule:
    """Build a schedule with ``beta`` linearly spaced from ``beta_start`` to ``beta_end``.

    All tables are float64.
    """
    if isinstance(T, bool) or int(T) != T or T < 1:
        raise ConfigError(f"T must be a positive integer, got {T!r}")
    T = int(T)
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    if np.any(alpha_bar <= 0.0):
        raise ConfigError("alpha_bar underflowed to zero; shorten the schedule")
    for arr in (beta, alpha, alpha_bar):
        arr.setflags(write=False)
    sab = np.sqrt(alpha_bar)
    somab = np.sqrt(1.0 - alpha_bar)
    sab.setflags(write=False)
    somab.setflags(write=False)
    return NoiseSchedule(T, beta, alpha, alpha_bar, sab, somab,
                         float(beta_start), float(beta_end))


def to_model_range(images):
    """Map pixel values from [0, 1] storage to the [-1, 1] diffusion range."""
    return np.asarray(images) * 2.0 - 1.0


def to_pixel_range(x):
    """Inverse of :func:`to_model_range` with clamping to [0, 1]."""
    return (np.clip(x, -1.0, 1.0) + 1.0) / 2.0


def forward_sample(x0, t, eps, schedule: NoiseSchedule):
    """Noise ``x0`` (already in [-1, 1]) to timestep ``t``.

    Computes ``sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps``. ``t`` may be an
    int or, for batched input, an integer array with one entry per leading
    row of ``x0``.
    """
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise ArgumentError(f"x0 shape {x0.shape} != eps shape {eps.shape}")
    t_arr = np.asarray(t)
    if t_arr.ndim == 0:
        t_idx = schedule.check_timestep(t) - 1
        a = schedule.sqrt_alpha_bar[t_idx]
        b = schedule.sqrt_one_minus_alpha_bar[t_idx]
    else:
        if t_arr.shape != x0.shape[:1]:
            raise ArgumentError("batched t must have one entry per sample")
        if t_arr.min() < 1 or t_arr.max() > schedule.T:
            raise ArgumentError(f"timesteps outside 1..{schedule.T}")
        bshape = (-1,) + (1,) * (x0.ndim - 1)
        a = schedule.sqrt_alpha_bar[t_arr - 1].reshape(bshape)
        b = schedule.sqrt_one_minus_alpha_bar[t_arr - 1].reshape(bshape)
    dtype = np.result_type(x0.dtype, eps.dtype)
    return (a * x0 + b * eps).astype(dtype, copy=False)
