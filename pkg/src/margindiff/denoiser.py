"""Conditional noise predictor with exact manual backpropagation.

The network is a two-hidden-layer SiLU MLP over the concatenation of the
flattened noisy image, a sinusoidal timestep embedding and a learned
condition embedding.

Condition embedding rows: ``0..K-1`` are the class conditions, row ``K`` is
the class-free prompt and row ``K + 1`` is the null prompt.

Canonical parameter order (used for vectorization and serialization):
``cond_embed, W1, W2, W3, b1, b2, b3``. Weight matrices are stored as
``(fan_in, fan_out)`` and flattened row-major.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import ArgumentError, ConfigError, FormatError, UsageError
from .schedule import NoiseSchedule

PARAM_ORDER = ("cond_embed", "W1", "W2", "W3", "b1", "b2", "b3")
CHECKPOINT_MAGIC = b"DCP1"


class ConditionKind(str, Enum):
    CLASS = "class"
    NONCLASS = "nonclass"
    NULL = "null"


@dataclass(frozen=True)
class Condition:
    kind: ConditionKind
    class_index: int | None = None

    def __post_init__(self):
        if self.kind == ConditionKind.CLASS:
            if self.class_index is None or int(self.class_index) < 0:
                raise ArgumentError("CLASS condition needs a non-negative class_index")
        elif self.class_index is not None:
            raise ArgumentError(f"{self.kind.value} condition takes no class_index")

    @classmethod
    def of_class(cls, k: int) -> "Condition":
        return cls(ConditionKind.CLASS, int(k))

    @classmethod
    def nonclass(cls) -> "Condition":
        return cls(ConditionKind.NONCLASS)

    @classmethod
    def null(cls) -> "Condition":
        return cls(ConditionKind.NULL)

    @classmethod
    def parse(cls, text: str) -> "Condition":
        """Parse ``"null"``, ``"nonclass"`` or a class index such as ``"3"``."""
        text = text.strip().lower()
        if text in ("null", "none", "uncond"):
            return cls.null()
        if text in ("nonclass", "nc"):
            return cls.nonclass()
        try:
            return cls.of_class(int(text))
        except ValueError:
            raise ArgumentError(f"cannot parse condition {text!r}") from None

    def row(self, K: int) -> int:
        if self.kind == ConditionKind.CLASS:
            if self.class_index >= K:
                raise ArgumentError(f"class index {self.class_index} >= K={K}")
            return self.class_index
        return K if self.kind == ConditionKind.NONCLASS else K + 1

    def __str__(self):
        if self.kind == ConditionKind.CLASS:
            return f"class:{self.class_index}"
        return self.kind.value


@dataclass(frozen=True)
class Architecture:
    H: int
    W: int
    C: int
    K: int
    hidden_width: int = 128
    time_dim: int = 32
    cond_dim: int = 16
    T: int = 200

    def __post_init__(self):
        for name, value in asdict(self).items():
            if isinstance(value, bool) or int(value) != value or value < 1:
                raise ConfigError(f"architecture field {name} must be a positive int, got {value!r}")

    @property
    def image_shape(self) -> tuple:
        return (self.H, self.W, self.C)

    @property
    def image_size(self) -> int:
        return self.H * self.W * self.C

    @property
    def input_dim(self) -> int:
        return self.image_size + self.time_dim + self.cond_dim

    def param_shapes(self) -> dict:
        h = self.hidden_width
        return {
            "cond_embed": (self.K + 2, self.cond_dim),
            "W1": (self.input_dim, h),
            "W2": (h, h),
            "W3": (h, self.image_size),
            "b1": (h,),
            "b2": (h,),
            "b3": (self.image_size,),
        }


def timestep_embedding(t, dim: int, T: int) -> np.ndarray:
    """Sinusoidal embedding of integer timesteps, shape ``(len(t), dim)``.

    Angular frequencies are geometric from 1 down to ``1/T``; the first half of
    the columns are sines, the second half cosines. An odd ``dim`` gets a final
    ``t / T`` column.
    """
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    if half == 0:
        return (t / T)[:, None]
    if half == 1:
        freqs = np.ones(1)
    else:
        freqs = np.exp(-np.log(T) * np.arange(half) / (half - 1))
    angles = t[:, None] * freqs[None, :]
    parts = [np.sin(angles), np.cos(angles)]
    if dim % 2:
        parts.append((t / T)[:, None])
    return np.concatenate(parts, axis=1)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class Tape:
    """Activations retained by a forward pass for :func:`backward`."""

    net_id: int
    version: int
    rows: np.ndarray
    h0: np.ndarray
    z1: np.ndarray
    a1: np.ndarray
    z2: np.ndarray
    a2: np.ndarray


@dataclass
class GradientSet:
    grads: dict
    count: int = 0

    def __getitem__(self, name):
        return self.grads[name]

    def zero(self):
        for g in self.grads.values():
            g.fill(0.0)
        self.count = 0

    def vector(self) -> np.ndarray:
        return np.concatenate([self.grads[n].ravel() for n in PARAM_ORDER])

    def global_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64)))
                                 for g in self.grads.values())))


class DenoiserNetwork:
    """The trainable noise predictor ``eps_theta(x_t, t, c)``."""

    def __init__(self, arch: Architecture, params: dict, dtype=np.float32):
        self.arch = arch
        self.dtype = np.dtype(dtype)
        shapes = arch.param_shapes()
        self.params = {}
        for name in PARAM_ORDER:
            p = np.asarray(params[name], dtype=self.dtype)
            if p.shape != shapes[name]:
                raise ConfigError(f"parameter {name} has shape {p.shape}, expected {shapes[name]}")
            self.params[name] = np.ascontiguousarray(p)
        self._version = 0

    @property
    def K(self) -> int:
        return self.arch.K

    @property
    def version(self) -> int:
        return self._version

    def mark_updated(self):
        """Record an in-place parameter change; invalidates outstanding tapes."""
        self._version += 1

    @property
    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def param_vector(self) -> np.ndarray:
        return np.concatenate([self.params[n].ravel() for n in PARAM_ORDER])

    def set_param_vector(self, vec):
        vec = np.asarray(vec)
        if vec.shape != (self.param_count,):
            raise ArgumentError(f"expected vector of length {self.param_count}")
        offset = 0
        for name in PARAM_ORDER:
            p = self.params[name]
            p[...] = vec[offset:offset + p.size].reshape(p.shape)
            offset += p.size
        self.mark_updated()

    def zero_grads(self) -> GradientSet:
        return GradientSet({n: np.zeros_like(p) for n, p in self.params.items()})

    def copy(self) -> "DenoiserNetwork":
        return DenoiserNetwork(self.arch, {n: p.copy() for n, p in self.params.items()}, self.dtype)

    def astype(self, dtype) -> "DenoiserNetwork":
        return DenoiserNetwork(self.arch, self.params, dtype)

    # -- forward / backward -------------------------------------------------

    def _rows(self, cond, n):
        if isinstance(cond, Condition):
            return np.full(n, cond.row(self.K), dtype=np.intp)
        rows = np.asarray(cond, dtype=np.intp).reshape(-1)
        if rows.shape != (n,):
            raise ArgumentError("need one condition row per sample")
        if rows.min() < 0 or rows.max() >= self.K + 2:
            raise ArgumentError(f"condition rows must lie in 0..{self.K + 1}")
        return rows

    def forward(self, x_t, t, cond):
        """Batched forward pass.

        ``x_t`` is ``(N, H, W, C)`` (or a single ``(H, W, C)`` image), ``t`` an
        int or length-N int array, ``cond`` a :class:`Condition` or length-N
        array of embedding rows. Returns ``(eps_hat, tape)``.
        """
        x_t = np.asarray(x_t)
        single = x_t.shape == self.arch.image_shape
        if single:
            x_t = x_t[None]
        if x_t.shape[1:] != self.arch.image_shape:
            raise ArgumentError(
                f"x_t shape {x_t.shape} does not match image shape {self.arch.image_shape}")
        n = x_t.shape[0]
        t_arr = np.broadcast_to(np.asarray(t), (n,))
        if np.any(t_arr < 1) or np.any(t_arr > self.arch.T) or np.any(t_arr != np.round(t_arr)):
            raise ArgumentError(f"timesteps must be integers in 1..{self.arch.T}")
        rows = self._rows(cond, n)
        p = self.params
        temb = timestep_embedding(t_arr, self.arch.time_dim, self.arch.T).astype(self.dtype)
        h0 = np.concatenate(
            [x_t.reshape(n, -1).astype(self.dtype, copy=False), temb, p["cond_embed"][rows]], axis=1)
        z1 = h0 @ p["W1"] + p["b1"]
        a1 = z1 * _sigmoid(z1)
        z2 = a1 @ p["W2"] + p["b2"]
        a2 = z2 * _sigmoid(z2)
        out = a2 @ p["W3"] + p["b3"]
        tape = Tape(id(self), self._version, rows, h0, z1, a1, z2, a2)
        out = out.reshape((n,) + self.arch.image_shape)
        return (out[0] if single else out), tape

    def predict(self, x_t, t, cond):
        return self.forward(x_t, t, cond)[0]

    def backward(self, tape: Tape, grad_out, grads: GradientSet | None = None) -> GradientSet:
        """Accumulate parameter gradients given ``dL/d eps_hat``."""
        if tape.net_id != id(self) or tape.version != self._version:
            raise UsageError("stale tape: parameters changed since the forward pass")
        if grads is None:
            grads = self.zero_grads()
        p = self.params
        n = tape.h0.shape[0]
        g = np.asarray(grad_out, dtype=self.dtype).reshape(n, -1)
        grads.grads["W3"] += tape.a2.T @ g
        grads.grads["b3"] += g.sum(axis=0)
        g = g @ p["W3"].T
        s2 = _sigmoid(tape.z2)
        g = g * (s2 * (1.0 + tape.z2 * (1.0 - s2)))
        grads.grads["W2"] += tape.a1.T @ g
        grads.grads["b2"] += g.sum(axis=0)
        g = g @ p["W2"].T
        s1 = _sigmoid(tape.z1)
        g = g * (s1 * (1.0 + tape.z1 * (1.0 - s1)))
        grads.grads["W1"] += tape.h0.T @ g
        grads.grads["b1"] += g.sum(axis=0)
        g_cond = g @ p["W1"][-self.arch.cond_dim:].T
        np.add.at(grads.grads["cond_embed"], tape.rows, g_cond)
        grads.count += 1
        return grads


def init_network(arch: Architecture, seed: int, dtype=np.float32) -> DenoiserNetwork:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.

    Embedding rows are drawn from Uniform(-1, 1) (a lookup has fan-in 1).
    Sampling happens in float64 so float32 and float64 builds share values.
    """
    rng = np.random.default_rng(seed)
    shapes = arch.param_shapes()
    params = {"cond_embed": rng.uniform(-1.0, 1.0, shapes["cond_embed"])}
    for name in ("W1", "W2", "W3"):
        fan_in = shapes[name][0]
        bound = 1.0 / np.sqrt(fan_in)
        params[name] = rng.uniform(-bound, bound, shapes[name])
    for name in ("b1", "b2", "b3"):
        params[name] = np.zeros(shapes[name])
    return DenoiserNetwork(arch, params, dtype)


def predict_noise(net: DenoiserNetwork, x_t, t, cond):
    """Return ``(eps_hat, tape)``; see :meth:`DenoiserNetwork.forward`."""
    return net.forward(x_t, t, cond)


def backward(net: DenoiserNetwork, tape: Tape, grad_eps_hat, grads: GradientSet | None = None):
    return net.backward(tape, grad_eps_hat, grads)


# -- checkpoints --------------------------------------------------------------

@dataclass
class Checkpoint:
    net: DenoiserNetwork
    schedule: NoiseSchedule
    header: dict = field(default_factory=dict)


def checkpoint_bytes(net: DenoiserNetwork, schedule: NoiseSchedule, *, loss=None,
                     seed=None, step: int = 0, extra: dict | None = None) -> bytes:
    if schedule.T != net.arch.T:
        raise ConfigError(f"schedule T={schedule.T} does not match network T={net.arch.T}")
    header = {
        "format": 1,
        "arch": asdict(net.arch),
        "schedule": schedule.params(),
        "K": net.K,
        "loss": loss,
        "seed": seed,
        "step": int(step),
    }
    if extra:
        header["extra"] = extra
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob = net.param_vector().astype("<f4").tobytes()
    return CHECKPOINT_MAGIC + struct.pack("<I", len(hbytes)) + hbytes + blob


def save_checkpoint(path, net, schedule, **kwargs) -> Path:
    """Write a ``.dcp`` checkpoint. Parameters are stored as float32."""
    path = Path(path)
    path.write_bytes(checkpoint_bytes(net, schedule, **kwargs))
    return path


def parse_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < 8:
        raise FormatError(f"checkpoint truncated: expected at least 8 bytes, got {len(data)}", len(data))
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {CHECKPOINT_MAGIC!r}", 0)
    (hlen,) = struct.unpack_from("<I", data, 4)
    if len(data) < 8 + hlen:
        raise FormatError(
            f"checkpoint header truncated: expected {8 + hlen} bytes, got {len(data)}", len(data))
    try:
        header = json.loads(data[8:8 + hlen].decode("utf-8"))
        arch = Architecture(**header["arch"])
        schedule = NoiseSchedule.from_params(header["schedule"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"invalid checkpoint header: {exc}", 8) from None
    shapes = arch.param_shapes()
    count = sum(int(np.prod(s)) for s in shapes.values())
    expected = 8 + hlen + 4 * count
    if len(data) != expected:
        raise FormatError(
            f"parameter blob length mismatch: expected {expected} bytes total, got {len(data)}",
            min(len(data), expected))
    vec = np.frombuffer(data, dtype="<f4", offset=8 + hlen, count=count)
    params, offset = {}, 0
    for name in PARAM_ORDER:
        size = int(np.prod(shapes[name]))
        params[name] = vec[offset:offset + size].reshape(shapes[name])
        offset += size
    net = DenoiserNetwork(arch, params, np.float32)
    return Checkpoint(net, schedule, header)


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())
