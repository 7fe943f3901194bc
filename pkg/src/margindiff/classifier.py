"""Noise-prediction-error classification.

An image is assigned the class whose conditional noise-prediction error,
averaged over a set of timesteps, is smallest (uniform class prior). With
shared noise, a single noise draw per timestep is reused for every class so
per-class errors differ only through the condition.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .denoiser import DenoiserNetwork
from .errors import ArgumentError
from .objectives import Objective, per_sample_errors
from .schedule import NoiseSchedule, forward_sample, to_model_range

BASE_LANDMARK = 0.4
MARGIN_LANDMARK = 0.1


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def one_step_landmark(T: int, objective=Objective.BASE) -> int:
    """Default single evaluation timestep: 40% of T for base/codit, 10% for margin objectives."""
    frac = MARGIN_LANDMARK if Objective(objective) in (Objective.FMDIT, Objective.AMDIT) else BASE_LANDMARK
    return min(max(_round_half_up(frac * T), 1), T)


def select_timesteps(n: int, T: int, objective=Objective.BASE, landmark: int | None = None) -> list:
    """``n`` uniformly spaced timesteps in ``1..T``, or the 1-step landmark when ``n == 1``."""
    if not 1 <= n <= T:
        raise ArgumentError(f"need 1 <= n <= T, got n={n}, T={T}")
    if n == 1:
        t = landmark if landmark is not None else one_step_landmark(T, objective)
        if not 1 <= t <= T:
            raise ArgumentError(f"landmark {t} outside 1..{T}")
        return [int(t)]
    if n == T:
        return list(range(1, T + 1))
    steps = (min(max(_round_half_up(k * T / (n + 1)), 1), T) for k in range(1, n + 1))
    return sorted(set(steps))


@dataclass(frozen=True)
class EvalPlan:
    timesteps: tuple
    noise_seed: int = 0
    share_noise: bool = True
    # Noise draws averaged per timestep.
    repeats: int = 1

    def __post_init__(self):
        ts = tuple(int(t) for t in self.timesteps)
        object.__setattr__(self, "timesteps", ts)
        if not ts:
            raise ArgumentError("evaluation plan needs at least one timestep")
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ArgumentError("plan timesteps must be strictly increasing")
        if ts[0] < 1:
            raise ArgumentError("plan timesteps must be >= 1")
        if self.repeats < 1:
            raise ArgumentError("repeats must be >= 1")

    @classmethod
    def uniform(cls, n: int, T: int, objective=Objective.BASE, **kwargs) -> "EvalPlan":
        return cls(tuple(select_timesteps(n, T, objective, kwargs.pop("landmark", None))), **kwargs)

    def check(self, T: int):
        if self.timesteps[-1] > T:
            raise ArgumentError(f"plan timestep {self.timesteps[-1]} exceeds T={T}")

    def noise(self, t: int, shape, repeat: int = 0, sample_key: int = 0,
              cls: int | None = None) -> np.ndarray:
        """Evaluation noise for one sample at timestep ``t``.

        Keyed on ``(noise_seed, t, repeat, sample_key)``; without sharing the
        class row is appended to the key.
        """
        key = [self.noise_seed, t, repeat, sample_key]
        if not self.share_noise:
            key.append(cls)
        return np.random.default_rng(key).standard_normal(shape)


@dataclass
class ClassificationResult:
    per_class_error: np.ndarray
    predicted: int
    per_timestep_error: np.ndarray
    timesteps: tuple
    noise_draws: int = 0


def error_table(net: DenoiserNetwork, images, schedule: NoiseSchedule, plan: EvalPlan,
                rows=None, sample_keys=None, stats: dict | None = None) -> np.ndarray:
    """Errors of shape ``(N, len(rows), len(plan.timesteps))``.

    ``images`` is ``(N, H, W, C)`` in [0, 1]; ``rows`` are condition-embedding
    rows (default: every class). ``sample_keys`` (default ``0..N-1``) select
    each sample's noise stream. When ``stats`` is given, the number of noise
    tensors drawn per sample is stored under ``"noise_draws"``.
    """
    plan.check(schedule.T)
    images = np.asarray(images)
    if images.shape[1:] != net.arch.image_shape:
        raise ArgumentError(f"images {images.shape[1:]} do not match network {net.arch.image_shape}")
    rows = list(range(net.K)) if rows is None else [int(r) for r in rows]
    n = images.shape[0]
    keys = np.arange(n) if sample_keys is None else np.asarray(sample_keys)
    if keys.shape != (n,):
        raise ArgumentError("need one sample key per image")
    x0 = to_model_range(images.astype(np.float64))
    shape = net.arch.image_shape
    table = np.zeros((n, len(rows), len(plan.timesteps)))
    draws = 0

    def draw(t, r, cls=None):
        return np.stack([plan.noise(t, shape, r, int(k), cls) for k in keys])

    for j, t in enumerate(plan.timesteps):
        for r in range(plan.repeats):
            if plan.share_noise:
                eps = draw(t, r)
                draws += 1
                x_t = forward_sample(x0, t, eps, schedule).astype(net.dtype)
                eps = eps.astype(net.dtype)
            for i, row in enumerate(rows):
                if not plan.share_noise:
                    eps = draw(t, r, row)
                    draws += 1
                    x_t = forward_sample(x0, t, eps, schedule).astype(net.dtype)
                    eps = eps.astype(net.dtype)
                eps_hat = net.predict(x_t, t, np.full(n, row))
                table[:, i, j] += per_sample_errors(eps_hat, eps)
    table /= plan.repeats
    if stats is not None:
        stats["noise_draws"] = draws
    return table


def _result(per_timestep: np.ndarray, plan: EvalPlan, draws: int) -> ClassificationResult:
    per_class = per_timestep.mean(axis=1)
    # np.argmin returns the first minimum: lowest-index tie-break.
    return ClassificationResult(per_class, int(np.argmin(per_class)), per_timestep,
                                plan.timesteps, draws)


def classify(net: DenoiserNetwork, x0, schedule: NoiseSchedule, plan: EvalPlan,
             sample_key: int = 0) -> ClassificationResult:
    """Classify one ``(H, W, C)`` image in [0, 1].

    ``sample_key`` selects the noise stream; :func:`evaluate` uses the sample's
    position in the dataset.
    """
    x0 = np.asarray(x0)
    if x0.shape != net.arch.image_shape:
        raise ArgumentError(f"image shape {x0.shape} does not match {net.arch.image_shape}")
    stats = {}
    table = error_table(net, x0[None], schedule, plan, sample_keys=[sample_key], stats=stats)
    return _result(table[0], plan, stats["noise_draws"])


def classify_batch(net, images, schedule, plan, batch_size: int = 512, sample_keys=None) -> list:
    """Classify ``(N, H, W, C)`` images; noise keys default to ``0..N-1``."""
    images = np.asarray(images)
    keys = np.arange(len(images)) if sample_keys is None else np.asarray(sample_keys)
    results = []
    for start in range(0, len(images), batch_size):
        stats = {}
        chunk = slice(start, start + batch_size)
        table = error_table(net, images[chunk], schedule, plan, sample_keys=keys[chunk], stats=stats)
        results.extend(_result(row, plan, stats["noise_draws"]) for row in table)
    return results


@dataclass
class EvalReport:
    accuracy: float
    mean_class_accuracy: float
    confusion: np.ndarray
    predictions: np.ndarray
    labels: np.ndarray
    per_class_error: np.ndarray
    timesteps: tuple = field(default_factory=tuple)

    def summary(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "mean_class_accuracy": self.mean_class_accuracy,
            "n": int(len(self.labels)),
            "timesteps": list(self.timesteps),
            "confusion": self.confusion.tolist(),
        }


def metrics_from_predictions(labels, predictions, K: int):
    """Return ``(accuracy, mean_class_accuracy, confusion)``.

    Mean class accuracy averages recall over the classes present in ``labels``.
    """
    labels = np.asarray(labels, dtype=np.intp)
    predictions = np.asarray(predictions, dtype=np.intp)
    if labels.size == 0:
        raise ArgumentError("cannot evaluate an empty dataset")
    confusion = np.zeros((K, K), dtype=np.int64)
    np.add.at(confusion, (labels, predictions), 1)
    counts = confusion.sum(axis=1)
    present = counts > 0
    recalls = np.diag(confusion)[present] / counts[present]
    return float(np.mean(labels == predictions)), float(np.mean(recalls)), confusion


def evaluate(net: DenoiserNetwork, dataset, schedule: NoiseSchedule, plan: EvalPlan,
             batch_size: int = 512) -> EvalReport:
    images, labels = (dataset.images, dataset.labels) if hasattr(dataset, "images") else dataset
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ArgumentError("cannot evaluate an empty dataset")
    if labels.min() < 0 or labels.max() >= net.K:
        raise ArgumentError(f"labels must lie in 0..{net.K - 1}")
    results = classify_batch(net, images, schedule, plan, batch_size)
    preds = np.array([r.predicted for r in results], dtype=np.int64)
    errors = np.stack([r.per_class_error for r in results])
    acc, mca, confusion = metrics_from_predictions(labels, preds, net.K)
    return EvalReport(acc, mca, confusion, preds, labels.astype(np.int64), errors, plan.timesteps)
