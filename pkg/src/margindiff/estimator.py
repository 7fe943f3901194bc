"""scikit-learn wrappers around the trainer, classifier and corruption operators."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted

from .classifier import EvalPlan, error_table
from .dataset import CorruptionSpec, GlyphDataset, corrupt
from .denoiser import Architecture, init_network
from .objectives import LossConfig
from .schedule import DEFAULT_BETA_END, DEFAULT_BETA_START, build_linear_schedule
from .trainer import TrainConfig, train


def _as_images(X, n_channels=None):
    X = check_array(X, allow_nd=True, dtype=(np.float64, np.float32), ensure_min_samples=1)
    if X.ndim == 2:
        raise ValueError("expected images shaped (n, H, W) or (n, H, W, C), got a 2-D array")
    if X.ndim == 3:
        X = X[..., None]
    if X.ndim != 4:
        raise ValueError(f"expected images shaped (n, H, W) or (n, H, W, C), got {X.ndim}-D")
    if X.min() < 0 or X.max() > 1:
        raise ValueError("pixel values must lie in [0, 1]")
    if n_channels is not None and X.shape[3] != n_channels:
        raise ValueError(f"expected {n_channels} channels, got {X.shape[3]}")
    return X


class DiffusionClassifier(ClassifierMixin, BaseEstimator):
    """Train a conditional denoiser and classify by minimum noise-prediction error.

    ``X`` holds images in [0, 1] shaped ``(n, H, W)`` or ``(n, H, W, C)``;
    labels may be any hashable values. ``decision_function`` returns negated
    per-class errors so that larger means more likely.
    """

    def __init__(self, objective="base", lambda1=0.005, margin=0.0005, alpha=0.01, nn_variant="positive",
                 add_base_weight=0.0, steps=2000, batch_size=32, learning_rate=1e-3, weight_decay=0.01,
                 uncond_prob=0.1, hidden_width=512, time_dim=32, cond_dim=16, T=200,
                 beta_start=DEFAULT_BETA_START, beta_end=DEFAULT_BETA_END, n_timesteps=10,
                 landmark=None, noise_seed=0, random_state=0):
        self.objective = objective
        self.lambda1 = lambda1
        self.margin = margin
        self.alpha = alpha
        self.nn_variant = nn_variant
        self.add_base_weight = add_base_weight
        self.steps = steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.uncond_prob = uncond_prob
        self.hidden_width = hidden_width
        self.time_dim = time_dim
        self.cond_dim = cond_dim
        self.T = T
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.n_timesteps = n_timesteps
        self.landmark = landmark
        self.noise_seed = noise_seed
        self.random_state = random_state

    def _train_config(self):
        loss = LossConfig(self.objective, lambda1=self.lambda1, margin_fixed=self.margin, alpha=self.alpha,
                          nn_variant=self.nn_variant, add_base_weight=self.add_base_weight)
        return TrainConfig(steps=self.steps, batch_size=self.batch_size, learning_rate=self.learning_rate,
                           weight_decay=self.weight_decay, seed=self.random_state, loss=loss,
                           uncond_prob=self.uncond_prob)

    def fit(self, X, y):
        X = _as_images(X)
        y = np.asarray(y)
        if y.shape != (X.shape[0],):
            raise ValueError(f"y has shape {y.shape}, expected ({X.shape[0]},)")
        check_classification_targets(y)
        cfg = self._train_config()
        self.classes_, encoded = np.unique(y, return_inverse=True)
        K = len(self.classes_)
        if K < 2 and cfg.loss.needs_negative:
            raise ValueError(f"objective {self.objective!r} needs at least 2 classes")
        arch = Architecture(H=X.shape[1], W=X.shape[2], C=X.shape[3], K=K, hidden_width=self.hidden_width,
                            time_dim=self.time_dim, cond_dim=self.cond_dim, T=self.T)
        self.schedule_ = build_linear_schedule(self.T, self.beta_start, self.beta_end)
        ds = GlyphDataset(X.astype(np.float32), encoded, [str(c) for c in self.classes_])
        self.network_, self.training_log_ = train(init_network(arch, self.random_state), ds, self.schedule_, cfg)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    @property
    def plan_(self) -> EvalPlan:
        check_is_fitted(self, "network_")
        return EvalPlan.uniform(self.n_timesteps, self.T, self.objective, noise_seed=self.noise_seed,
                                landmark=self.landmark)

    def class_errors(self, X) -> np.ndarray:
        """Plan-mean noise-prediction error per class, shape ``(n, K)``."""
        check_is_fitted(self, "network_")
        X = _as_images(X, self.network_.arch.C)
        if X.shape[1:] != self.network_.arch.image_shape:
            raise ValueError(f"images {X.shape[1:]} do not match fitted shape {self.network_.arch.image_shape}")
        return error_table(self.network_, X, self.schedule_, self.plan_).mean(axis=2)

    def decision_function(self, X) -> np.ndarray:
        return -self.class_errors(X)

    def predict(self, X) -> np.ndarray:
        errors = self.class_errors(X)
        return self.classes_[np.argmin(errors, axis=1)]


class ImageCorruptor(TransformerMixin, BaseEstimator):
    """Stateless transformer applying one corruption to ``(n, H, W[, C])`` images."""

    def __init__(self, kind="gaussian_noise", sigma=10.0, kernel_size=5, seed=0):
        self.kind = kind
        self.sigma = sigma
        self.kernel_size = kernel_size
        self.seed = seed

    def fit(self, X, y=None):
        X = _as_images(X)
        self.spec_ = CorruptionSpec(self.kind, self.sigma, self.kernel_size, self.seed)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def transform(self, X):
        check_is_fitted(self, "spec_")
        raw = np.asarray(X)
        out = corrupt(_as_images(X), self.spec_)
        return out.reshape(raw.shape)
