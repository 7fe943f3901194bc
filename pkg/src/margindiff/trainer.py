"""Mini-batch training with AdamW and global-norm gradient clipping."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .denoiser import DenoiserNetwork, GradientSet, save_checkpoint
from .errors import ConfigError, TrainingError
from .objectives import LossConfig, NNVariant, Objective, noise_error_grad, objective_terms, per_sample_errors
from .schedule import NoiseSchedule, forward_sample, to_model_range

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "loss", "d_p", "d_n", "d_nn", "grad_norm")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    batch_size: int = 64
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip_norm: float = 1.0
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    # Probability that a sample is trained unconditionally (null or class-free
    # condition, plain denoising loss) instead of under the objective.
    uncond_prob: float = 0.1
    hflip: bool = False

    def __post_init__(self):
        if isinstance(self.loss, dict):
            object.__setattr__(self, "loss", LossConfig.from_dict(self.loss))
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if not self.grad_clip_norm > 0:
            raise ConfigError("grad_clip_norm must be > 0")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1 and self.adam_eps > 0):
            raise ConfigError("invalid Adam hyperparameters")
        if not 0 <= self.uncond_prob < 1:
            raise ConfigError("uncond_prob must lie in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"] = self.loss.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (json.JSONDecodeError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad training config {path}: {exc}") from None


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def for_params(cls, params: dict) -> "OptimizerState":
        return cls({n: np.zeros_like(p) for n, p in params.items()},
                   {n: np.zeros_like(p) for n, p in params.items()})

    @classmethod
    def for_network(cls, net: DenoiserNetwork) -> "OptimizerState":
        return cls.for_params(net.params)


def sample_negative(label: int, K: int, rng) -> int:
    """Uniform draw from the ``K - 1`` classes other than ``label``."""
    if K < 2:
        raise ConfigError("negative sampling needs at least two classes")
    r = int(rng.integers(K - 1))
    return r + (r >= label)


def sample_negatives(labels, K: int, rng) -> np.ndarray:
    if K < 2:
        raise ConfigError("negative sampling needs at least two classes")
    labels = np.asarray(labels)
    r = rng.integers(K - 1, size=labels.shape)
    return r + (r >= labels)


def clip_gradients(grads: GradientSet, max_norm: float) -> float:
    """Scale ``grads`` in place to global L2 norm <= ``max_norm``; return the pre-clip norm."""
    norm = grads.global_norm()
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.grads.values():
            g *= scale
    return norm


def adamw_update(params: dict, grads, state: OptimizerState, cfg: TrainConfig):
    """One in-place AdamW step over ``params`` (name -> array).

    Weight decay is decoupled and applied before the Adam update, so with zero
    gradients a step scales every parameter by exactly ``1 - lr * wd``.
    """
    grads = getattr(grads, "grads", grads)
    state.step += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    lr = cfg.learning_rate
    decay = 1.0 - lr * cfg.weight_decay
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        if cfg.weight_decay:
            p *= decay
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)


def _nanmean(values, mask):
    return float(np.mean(values[mask])) if np.any(mask) else math.nan


def batch_loss_and_grads(net: DenoiserNetwork, x_t, t, eps, rows_p, negatives, loss_cfg: LossConfig,
                         dropped=None):
    """Batch-mean objective and its exact parameter gradients.

    ``rows_p`` are the positive condition rows, ``negatives`` the negative
    class rows (ignored for the base objective). Samples flagged in
    ``dropped`` contribute the plain denoising loss on their ``rows_p``.
    Returns ``(stats, grads)`` where ``stats`` has the loss and mean errors
    over the non-dropped samples.
    """
    n = x_t.shape[0]
    K = net.K
    dropped = np.zeros(n, dtype=bool) if dropped is None else np.asarray(dropped, dtype=bool)
    eps = np.asarray(eps).astype(net.dtype)
    eps_p, tape_p = net.forward(x_t, t, rows_p)
    d_p = per_sample_errors(eps_p, eps)
    d_n = d_nn = None
    passes = [(eps_p, tape_p)]
    if loss_cfg.needs_negative:
        eps_n, tape_n = net.forward(x_t, t, negatives)
        d_n = per_sample_errors(eps_n, eps)
        passes.append((eps_n, tape_n))
    if loss_cfg.needs_extra_nn_pass:
        nn_row = K if loss_cfg.nn_variant == NNVariant.NONCLASS else K + 1
        eps_nn, tape_nn = net.forward(x_t, t, np.full(n, nn_row))
        d_nn = per_sample_errors(eps_nn, eps)
        passes.append((eps_nn, tape_nn))

    loss_i, gp, gn, gnn = objective_terms(loss_cfg, d_p, d_n, d_nn)
    loss_i = np.where(dropped, d_p, loss_i)
    gp = np.where(dropped, 1.0, gp)
    gn = np.where(dropped, 0.0, gn)
    gnn = np.where(dropped, 0.0, gnn)
    loss = float(np.mean(loss_i))

    cond = ~dropped
    stats = {
        "loss": loss,
        "d_p": _nanmean(d_p, cond),
        "d_n": _nanmean(d_n, cond) if d_n is not None else math.nan,
        "d_nn": (_nanmean(d_nn, cond) if d_nn is not None
                 else _nanmean(d_p, cond) if loss_cfg.objective == Objective.AMDIT else math.nan),
    }
    if not math.isfinite(loss):
        raise TrainingError("non-finite loss",
                            {"eps_hat_absmax": float(np.max(np.abs(eps_p))), **stats})

    grads = net.zero_grads()
    for (eps_hat, tape), coef in zip(passes, (gp, gn, gnn)):
        if not np.any(coef):
            continue
        upstream = (coef / n)[:, None, None, None] * noise_error_grad(eps_hat, eps)
        net.backward(tape, upstream, grads)
    return stats, grads


def train_step(net: DenoiserNetwork, batch, schedule: NoiseSchedule, cfg: TrainConfig,
               opt: OptimizerState, rng) -> dict:
    """Run one optimization step on ``batch = (images, labels)``.

    Images are ``(N, H, W, C)`` in [0, 1]. Returns the batch loss, the mean
    errors over the conditioned samples, and the pre-clip gradient norm.
    """
    images, labels = batch
    labels = np.asarray(labels, dtype=np.intp)
    n = labels.shape[0]
    if n == 0:
        raise ConfigError("empty batch")
    K = net.K
    loss_cfg = cfg.loss
    if loss_cfg.needs_negative and K < 2:
        raise ConfigError(f"{loss_cfg.objective.value} needs K >= 2")

    x0 = to_model_range(np.asarray(images, dtype=np.float64))
    if cfg.hflip:
        flip = rng.random(n) < 0.5
        x0 = np.where(flip[:, None, None, None], x0[:, :, ::-1, :], x0)
    t = rng.integers(1, schedule.T + 1, size=n)
    eps = rng.standard_normal(x0.shape)
    dropped = rng.random(n) < cfg.uncond_prob
    uncond_rows = np.where(rng.random(n) < 0.5, K, K + 1)
    negatives = sample_negatives(labels, K, rng) if loss_cfg.needs_negative else None

    x_t = forward_sample(x0, t, eps, schedule).astype(net.dtype)
    rows_p = np.where(dropped, uncond_rows, labels)
    try:
        stats, grads = batch_loss_and_grads(net, x_t, t, eps, rows_p, negatives, loss_cfg, dropped)
    except TrainingError as exc:
        exc.diagnostics.update({"step": opt.step, "x0_mean": float(np.mean(x0)),
                                "x0_std": float(np.std(x0)), "t_min": int(t.min()), "t_max": int(t.max())})
        raise
    stats["grad_norm"] = clip_gradients(grads, cfg.grad_clip_norm)
    adamw_update(net.params, grads, opt, cfg)
    net.mark_updated()
    return stats


def _batches(n: int, batch_size: int, seed: int):
    """Endless stream of index batches from seeded per-epoch permutations."""
    epoch = 0
    while True:
        perm = np.random.default_rng([seed, 0, epoch]).permutation(n)
        if n >= batch_size:
            for start in range(0, n - batch_size + 1, batch_size):
                yield perm[start:start + batch_size]
        else:
            yield perm
        epoch += 1


def write_log_csv(path, log) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
        for row in log:
            writer.writerow([row["step"]] + [
                "" if math.isnan(row[c]) else repr(float(row[c])) for c in LOG_COLUMNS[1:]])
    return path


def train(net: DenoiserNetwork, dataset, schedule: NoiseSchedule, cfg: TrainConfig, *,
          out_dir=None, checkpoint_every: int = 0, log_every: int = 0):
    """Train ``net`` in place for ``cfg.steps`` steps.

    ``dataset`` is a :class:`~margindiff.dataset.GlyphDataset` or an
    ``(images, labels)`` pair. When ``out_dir`` is given, writes
    ``train_log.csv``, ``config.json``, periodic ``step_XXXXXX.dcp`` files
    and ``final.dcp``. Returns ``(net, log)``.
    """
    images, labels = (dataset.images, dataset.labels) if hasattr(dataset, "images") else dataset
    images = np.asarray(images)
    labels = np.asarray(labels)
    if images.shape[1:] != net.arch.image_shape:
        raise ConfigError(f"dataset images {images.shape[1:]} do not match network {net.arch.image_shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= net.K):
        raise ConfigError(f"dataset labels exceed network K={net.K}")
    ds_k = getattr(dataset, "K", None)
    if ds_k is not None and ds_k != net.K:
        raise ConfigError(f"dataset has K={ds_k} classes, network has K={net.K}")
    if schedule.T != net.arch.T:
        raise ConfigError(f"schedule T={schedule.T} != network T={net.arch.T}")

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    opt = OptimizerState.for_network(net)
    log = []
    if cfg.steps > 0:
        batches = _batches(len(labels), cfg.batch_size, cfg.seed)
        for step in range(cfg.steps):
            idx = next(batches)
            rng = np.random.default_rng([cfg.seed, 1, step])
            stats = train_step(net, (images[idx], labels[idx]), schedule, cfg, opt, rng)
            stats["step"] = step
            log.append(stats)
            if log_every and step % log_every == 0:
                logger.info("step %d loss %.5f d_p %.5f d_n %.5f grad %.3f", step,
                            stats["loss"], stats["d_p"], stats["d_n"], stats["grad_norm"])
            if out is not None and checkpoint_every and (step + 1) % checkpoint_every == 0:
                save_checkpoint(out / f"step_{step + 1:06d}.dcp", net, schedule,
                                loss=cfg.loss.to_dict(), seed=cfg.seed, step=step + 1)
    if out is not None:
        write_log_csv(out / "train_log.csv", log)
        save_checkpoint(out / "final.dcp", net, schedule,
                        loss=cfg.loss.to_dict(), seed=cfg.seed, step=cfg.steps)
    return net, log
