
import numpy as np
import pytest

from gradcheck import max_relative_error, numeric_gradient
from margindiff.denoiser import (Architecture, Condition, ConditionKind, backward, init_network,
                                 load_checkpoint, parse_checkpoint, predict_noise, save_checkpoint,
                                 checkpoint_bytes, timestep_embedding)
from margindiff.errors import ArgumentError, ConfigError, FormatError, UsageError
from margindiff.objectives import LossConfig
from margindiff.schedule import build_linear_schedule, forward_sample
from margindiff.trainer import batch_loss_and_grads

from conftest import TINY_ARCH

ALL_CONDITIONS = [Condition.of_class(0), Condition.of_class(2), Condition.nonclass(), Condition.null()]


def test_param_count_matches_layout():
    arch = Architecture(H=4, W=4, C=1, K=3, hidden_width=8, time_dim=8, cond_dim=4)
    net = init_network(arch, 0)
    assert net.param_count == (3 + 2) * 4 + (16 + 8 + 4) * 8 + 8 + 8 * 8 + 8 + 8 * 16 + 16 == 468


def test_init_is_deterministic_with_zero_biases():
    a = init_network(TINY_ARCH, 11)
    b = init_network(TINY_ARCH, 11)
    np.testing.assert_array_equal(a.param_vector(), b.param_vector())
    assert not np.array_equal(a.param_vector(), init_network(TINY_ARCH, 12).param_vector())
    for name in ("b1", "b2", "b3"):
        assert np.all(a.params[name] == 0)
    for name in ("W1", "W2", "W3"):
        bound = 1 / np.sqrt(a.params[name].shape[0])
        assert np.abs(a.params[name]).max() <= bound


def test_zero_dimension_rejected():
    with pytest.raises(ConfigError):
        Architecture(H=0, W=4, C=1, K=3)


def test_condition_rows_and_validation():
    assert [c.row(3) for c in ALL_CONDITIONS] == [0, 2, 3, 4]
    with pytest.raises(ArgumentError):
        Condition(ConditionKind.CLASS)
    with pytest.raises(ArgumentError):
        Condition(ConditionKind.NULL, 1)
    with pytest.raises(ArgumentError):
        Condition.of_class(3).row(3)
    assert Condition.parse("null") == Condition.null()
    assert Condition.parse("nonclass") == Condition.nonclass()
    assert Condition.parse("2") == Condition.of_class(2)


def test_timestep_embedding_shape_and_range():
    e = timestep_embedding([1, 10, 200], 32, 200)
    assert e.shape == (3, 32)
    assert np.all(np.abs(e) <= 1)
    np.testing.assert_allclose(e[:, :16] ** 2 + e[:, 16:] ** 2, 1.0)
    assert timestep_embedding([5], 7, 10).shape == (1, 7)


@pytest.mark.parametrize("cond", ALL_CONDITIONS, ids=str)
def test_predict_shape_and_purity(tiny_net64, cond):
    x = np.random.default_rng(0).standard_normal(TINY_ARCH.image_shape)
    out1, _ = predict_noise(tiny_net64, x, 7, cond)
    out2, _ = predict_noise(tiny_net64, x, 7, cond)
    assert out1.shape == x.shape
    np.testing.assert_array_equal(out1, out2)


def test_class_conditions_change_output(tiny_net64):
    x = np.random.default_rng(0).standard_normal(TINY_ARCH.image_shape)
    a = tiny_net64.predict(x, 7, Condition.of_class(0))
    b = tiny_net64.predict(x, 7, Condition.of_class(1))
    assert not np.allclose(a, b)


def test_batched_matches_single(tiny_net64):
    rng = np.random.default_rng(1)
    x = rng.standard_normal((5,) + TINY_ARCH.image_shape)
    ts = np.array([1, 2, 10, 30, 50])
    rows = np.array([0, 1, 2, 3, 4])
    batch = tiny_net64.predict(x, ts, rows)
    for i in range(5):
        single = tiny_net64.predict(x[i], int(ts[i]), rows[i:i + 1])
        np.testing.assert_allclose(batch[i], single, rtol=1e-12, atol=1e-12)


def test_predict_rejects_bad_input(tiny_net64):
    with pytest.raises(ArgumentError):
        tiny_net64.predict(np.zeros((3, 3, 1)), 1, Condition.null())
    with pytest.raises(ArgumentError):
        tiny_net64.predict(np.zeros(TINY_ARCH.image_shape), 0, Condition.null())
    with pytest.raises(ArgumentError):
        tiny_net64.predict(np.zeros(TINY_ARCH.image_shape), TINY_ARCH.T + 1, Condition.null())


def test_zero_upstream_gives_zero_gradients(tiny_net64):
    x = np.random.default_rng(0).standard_normal((2,) + TINY_ARCH.image_shape)
    out, tape = predict_noise(tiny_net64, x, 3, Condition.of_class(1))
    grads = backward(tiny_net64, tape, np.zeros_like(out))
    assert np.all(grads.vector() == 0)
    assert grads.count == 1
    grads.zero()
    assert grads.count == 0


def test_unused_embedding_rows_have_zero_gradient(tiny_net64):
    x = np.random.default_rng(0).standard_normal((2,) + TINY_ARCH.image_shape)
    out, tape = predict_noise(tiny_net64, x, 3, Condition.of_class(1))
    grads = backward(tiny_net64, tape, np.ones_like(out))
    g = grads["cond_embed"]
    assert np.any(g[1] != 0)
    assert np.all(g[[0, 2, 3, 4]] == 0)


def test_stale_tape_rejected(tiny_net64):
    x = np.zeros(TINY_ARCH.image_shape)
    out, tape = predict_noise(tiny_net64, x, 3, Condition.null())
    tiny_net64.set_param_vector(tiny_net64.param_vector() * 0.5)
    with pytest.raises(UsageError):
        backward(tiny_net64, tape, np.ones_like(out))
    with pytest.raises(UsageError):
        backward(tiny_net64.copy(), tape, np.ones_like(out))


def test_raw_network_gradient_matches_finite_differences(tiny_net64, tiny_schedule):
    # Base objective with every sample conditioned differently exercises every row.
    rng = np.random.default_rng(5)
    x0 = rng.uniform(-1, 1, (5,) + TINY_ARCH.image_shape)
    eps = rng.standard_normal(x0.shape)
    t = np.array([1, 5, 17, 33, 50])
    x_t = forward_sample(x0, t, eps, tiny_schedule)
    rows = np.array([0, 1, 2, 3, 4])
    cfg = LossConfig("base")
    _, grads = batch_loss_and_grads(tiny_net64, x_t, t, eps, rows, None, cfg)
    numeric = numeric_gradient(tiny_net64, x_t, t, eps, rows, None, cfg)
    assert max_relative_error(grads.vector(), numeric) < 1e-6


def test_checkpoint_round_trip(tmp_path):
    net = init_network(TINY_ARCH, 4)
    sched = build_linear_schedule(TINY_ARCH.T, 1e-4, 0.02)
    path = save_checkpoint(tmp_path / "a.dcp", net, sched, loss=LossConfig("amdit").to_dict(), seed=4, step=9)
    ck = load_checkpoint(path)
    np.testing.assert_array_equal(ck.net.param_vector(), net.param_vector())
    assert ck.header["step"] == 9 and ck.header["K"] == 3 and ck.header["seed"] == 4
    assert ck.schedule.params() == sched.params()
    x = np.random.default_rng(0).standard_normal(TINY_ARCH.image_shape).astype(np.float32)
    np.testing.assert_array_equal(ck.net.predict(x, 5, Condition.of_class(2)),
                                  net.predict(x, 5, Condition.of_class(2)))
    again = save_checkpoint(tmp_path / "b.dcp", ck.net, ck.schedule, loss=ck.header["loss"],
                            seed=ck.header["seed"], step=ck.header["step"])
    assert again.read_bytes() == path.read_bytes()


def test_checkpoint_layout():
    net = init_network(TINY_ARCH, 4)
    sched = build_linear_schedule(TINY_ARCH.T, 1e-4, 0.02)
    data = checkpoint_bytes(net, sched)
    assert data[:4] == b"DCP1"
    hlen = int.from_bytes(data[4:8], "little")
    assert len(data) == 8 + hlen + 4 * net.param_count
    blob = np.frombuffer(data[8 + hlen:], dtype="<f4")
    np.testing.assert_array_equal(blob, net.param_vector())


@pytest.mark.parametrize("mutate, fragment", [
    (lambda d: b"XXXX" + d[4:], "bad magic"),
    (lambda d: d[:6], "truncated"),
    (lambda d: d[:-3], "expected"),
    (lambda d: d + b"\0", "expected"),
    (lambda d: d[:8] + b"[" + d[9:], "header"),
])
def test_corrupt_checkpoint_rejected(mutate, fragment):
    net = init_network(TINY_ARCH, 4)
    sched = build_linear_schedule(TINY_ARCH.T, 1e-4, 0.02)
    with pytest.raises(FormatError, match=fragment) as info:
        parse_checkpoint(mutate(checkpoint_bytes(net, sched)))
    assert info.value.offset is not None
