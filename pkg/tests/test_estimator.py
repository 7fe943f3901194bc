import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.pipeline import make_pipeline

from margindiff.dataset import CorruptionSpec, corrupt, gen_synthetic
from margindiff.estimator import DiffusionClassifier, ImageCorruptor

FAST = dict(steps=30, batch_size=8, hidden_width=16, time_dim=8, cond_dim=4, T=30, n_timesteps=3)


@pytest.fixture(scope="module")
def data():
    ds = gen_synthetic(K=3, per_class=6, H=8, W=8, seed=0)
    return ds.images[:, :, :, 0], np.array(["frown", "neutral", "smile"])[ds.labels]


@pytest.fixture(scope="module")
def fitted(data):
    X, y = data
    return DiffusionClassifier(**FAST).fit(X, y)


def test_params_round_trip():
    est = DiffusionClassifier(objective="amdit", alpha=0.02)
    params = est.get_params()
    assert params["objective"] == "amdit" and params["alpha"] == 0.02
    other = clone(est).set_params(steps=7)
    assert other.steps == 7 and est.steps == 2000


def test_predict_returns_original_labels(fitted, data):
    X, y = data
    pred = fitted.predict(X)
    assert set(pred) <= set(y) and pred.shape == (len(y),)
    assert list(fitted.classes_) == ["frown", "neutral", "smile"]
    scores = fitted.decision_function(X)
    assert scores.shape == (len(y), 3)
    np.testing.assert_array_equal(pred, fitted.classes_[np.argmax(scores, axis=1)])
    assert 0.0 <= fitted.score(X, y) <= 1.0
    assert len(fitted.training_log_) == 30


def test_fit_is_deterministic(fitted, data):
    X, y = data
    again = DiffusionClassifier(**FAST).fit(X, y)
    assert again.network_.param_vector().tobytes() == fitted.network_.param_vector().tobytes()


def test_channel_axis_optional(fitted, data):
    X, _ = data
    np.testing.assert_array_equal(fitted.predict(X), fitted.predict(X[..., None]))


def test_input_validation(fitted, data):
    X, y = data
    with pytest.raises(NotFittedError):
        DiffusionClassifier().predict(X)
    with pytest.raises(ValueError):
        fitted.predict(X.reshape(len(X), -1))
    with pytest.raises(ValueError):
        fitted.predict(X[:, :4, :4])
    with pytest.raises(ValueError):
        DiffusionClassifier(**FAST).fit(X * 2, y)
    with pytest.raises(ValueError):
        DiffusionClassifier(**FAST).fit(X, y[:-1])
    with pytest.raises(ValueError):
        DiffusionClassifier(**{**FAST, "objective": "fmdit"}).fit(X, np.zeros(len(X)))


def test_corruptor_matches_function(data):
    X, _ = data
    out = ImageCorruptor(kind="gaussian_noise", sigma=30, seed=2).fit_transform(X)
    expected = corrupt(X[..., None], CorruptionSpec.noise(30, seed=2))[..., 0]
    np.testing.assert_array_equal(out, expected)
    with pytest.raises(ValueError):
        ImageCorruptor(kind="gaussian_blur", sigma=1.0, kernel_size=4).fit(X)


def test_pipeline_composition(data):
    X, y = data
    pipe = make_pipeline(ImageCorruptor(kind="gaussian_blur", sigma=0.5, kernel_size=3),
                         DiffusionClassifier(**FAST))
    pipe.fit(X, y)
    assert pipe.predict(X).shape == (len(y),)
