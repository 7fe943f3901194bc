"""Noise-prediction errors and the four training objectives.

A noise-prediction error ``d`` is the per-element *mean* of squared
differences between predicted and injected noise, which keeps the loss
weights independent of image resolution.

Objectives, per sample:

* base:   ``d_p``
* codit:  ``d_p - lambda1 * d_n``
* fmdit:  ``max(d_p - d_n + m, 0)``
* amdit:  ``max(d_p - d_n + alpha * d_nn, 0)``

where ``d_p``, ``d_n`` and ``d_nn`` are the errors under the positive,
a random negative, and a non-negative condition.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from enum import Enum

import numpy as np

from .errors import ArgumentError, ConfigError

DEFAULT_LAMBDA1 = 0.005
DEFAULT_MARGIN = 0.0005
DEFAULT_ALPHA = 0.01


class Objective(str, Enum):
    BASE = "base"
    CODIT = "codit"
    FMDIT = "fmdit"
    AMDIT = "amdit"


class NNVariant(str, Enum):
    POSITIVE = "positive"
    NONCLASS = "nonclass"
    NULL = "null"


@dataclass(frozen=True)
class LossConfig:
    objective: Objective = Objective.BASE
    lambda1: float = DEFAULT_LAMBDA1
    margin_fixed: float = DEFAULT_MARGIN
    alpha: float = DEFAULT_ALPHA
    nn_variant: NNVariant = NNVariant.POSITIVE
    add_base_weight: float = 0.0
    # Treat alpha * d_nn as a constant margin when backpropagating.
    stop_grad_nn: bool = False

    def __post_init__(self):
        object.__setattr__(self, "objective", Objective(self.objective))
        object.__setattr__(self, "nn_variant", NNVariant(self.nn_variant))
        for name in ("lambda1", "margin_fixed", "alpha", "add_base_weight"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise ConfigError(f"{name} must be a finite non-negative number, got {value!r}")

    @property
    def needs_negative(self) -> bool:
        return self.objective != Objective.BASE

    @property
    def needs_extra_nn_pass(self) -> bool:
        return self.objective == Objective.AMDIT and self.nn_variant != NNVariant.POSITIVE

    def to_dict(self) -> dict:
        d = asdict(self)
        d["objective"] = self.objective.value
        d["nn_variant"] = self.nn_variant.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        return cls(**d)


def per_sample_errors(eps_hat, eps) -> np.ndarray:
    """Batched :func:`noise_error`: one error per leading row."""
    eps_hat = np.asarray(eps_hat)
    eps = np.asarray(eps)
    if eps_hat.shape != eps.shape:
        raise ArgumentError(f"shape mismatch {eps_hat.shape} vs {eps.shape}")
    diff = (eps_hat - eps).reshape(eps.shape[0], -1)
    return np.mean(np.square(diff, dtype=np.float64), axis=1)


def noise_error(eps_hat, eps) -> float:
    eps_hat = np.asarray(eps_hat)
    eps = np.asarray(eps)
    if eps_hat.shape != eps.shape:
        raise ArgumentError(f"shape mismatch {eps_hat.shape} vs {eps.shape}")
    return float(np.mean(np.square(eps_hat - eps, dtype=np.float64)))


def noise_error_grad(eps_hat, eps):
    """Gradient of the per-sample error w.r.t. ``eps_hat`` (batched)."""
    n = int(np.prod(eps.shape[1:]))
    return (2.0 / n) * (eps_hat - eps)


def loss_base(d_p):
    return d_p


def loss_codit(d_p, d_n, lambda1):
    return d_p - lambda1 * d_n


def loss_fmdit(d_p, d_n, m):
    return np.maximum(d_p - d_n + m, 0.0)


def loss_amdit(d_p, d_n, d_nn, alpha):
    return np.maximum(d_p - d_n + alpha * d_nn, 0.0)


def objective_terms(cfg: LossConfig, d_p, d_n=None, d_nn=None):
    """Per-sample loss and its partial derivatives.

    Returns ``(loss, dL/dd_p, dL/dd_n, dL/dd_nn)``, each shaped like ``d_p``.
    For ``nn_variant=positive`` pass ``d_nn=None``; the adaptive-margin
    gradient is then folded into ``dL/dd_p``. At the hinge kink the
    subgradient 0 is used.
    """
    d_p = np.asarray(d_p, dtype=np.float64)
    zeros = np.zeros_like(d_p)
    obj = cfg.objective
    if obj != Objective.BASE and d_n is None:
        raise ArgumentError(f"{obj.value} needs negative-condition errors")
    if obj == Objective.BASE:
        loss, gp, gn, gnn = loss_base(d_p), np.ones_like(d_p), zeros, zeros
    elif obj == Objective.CODIT:
        loss = loss_codit(d_p, d_n, cfg.lambda1)
        gp, gn, gnn = np.ones_like(d_p), np.full_like(d_p, -cfg.lambda1), zeros
    elif obj == Objective.FMDIT:
        loss = loss_fmdit(d_p, d_n, cfg.margin_fixed)
        active = (d_p - d_n + cfg.margin_fixed > 0).astype(np.float64)
        gp, gn, gnn = active, -active, zeros
    else:
        positive = cfg.nn_variant == NNVariant.POSITIVE
        if positive:
            d_nn = d_p
        elif d_nn is None:
            raise ArgumentError("amdit with a non-positive c_nn needs d_nn")
        loss = loss_amdit(d_p, d_n, d_nn, cfg.alpha)
        active = (d_p - d_n + cfg.alpha * np.asarray(d_nn) > 0).astype(np.float64)
        g_margin = zeros if cfg.stop_grad_nn else cfg.alpha * active
        gn = -active
        if positive:
            gp, gnn = active + g_margin, zeros
        else:
            gp, gnn = active, g_margin
    if cfg.add_base_weight and obj != Objective.BASE:
        loss = loss + cfg.add_base_weight * d_p
        gp = gp + cfg.add_base_weight
    return loss, gp, gn, gnn
