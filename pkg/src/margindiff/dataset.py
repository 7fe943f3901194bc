"""Synthetic face-like glyph dataset, corruption operators and ``.dds`` I/O.

Each class is a cartoon face whose attributes are read off the bits of the
class index: mouth curvature (bit 0), brow slant (bit 1), eye size (bit 2)
and mouth width (bit 3). That gives up to 16 distinct templates.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ArgumentError, ConfigError, FormatError

DDS_MAGIC = b"DDS1"
DDS_VERSION = 1
MAX_CLASSES = 16

# Stroke half-width in unit-square coordinates.
_PEN = 0.045


@dataclass(eq=False)
class GlyphDataset:
    images: np.ndarray
    labels: np.ndarray
    class_names: list
    split: str = "train"
    class_counts: np.ndarray = field(init=False)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ArgumentError("images must be N x H x W x C")
        if self.labels.shape != (self.images.shape[0],):
            raise ArgumentError("need one label per image")
        K = len(self.class_names)
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= K):
            raise ArgumentError(f"labels must lie in 0..{K - 1}")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ArgumentError("pixel values must lie in [0, 1]")
        self.class_counts = np.bincount(self.labels, minlength=K)

    @property
    def K(self) -> int:
        return len(self.class_names)

    @property
    def image_shape(self) -> tuple:
        return self.images.shape[1:]

    def __len__(self):
        return self.labels.shape[0]

    def subset(self, idx) -> "GlyphDataset":
        return GlyphDataset(self.images[idx], self.labels[idx], list(self.class_names), self.split)

    def with_images(self, images) -> "GlyphDataset":
        return GlyphDataset(images, self.labels, list(self.class_names), self.split)


def class_name(k: int) -> str:
    return "-".join((
        "smile" if k & 1 else "frown",
        "raised" if k & 2 else "furrowed",
        "wide" if k & 4 else "narrow",
        "broad" if k & 8 else "small",
    ))


def _template_params(k: int) -> dict:
    return {
        "curve": 0.14 if k & 1 else -0.14,   # mouth sag at the corners
        "slant": 0.07 if k & 2 else -0.07,   # inner brow end offset
        "eye_r": 0.10 if k & 4 else 0.045,
        "mouth_w": 0.26 if k & 8 else 0.17,
    }


def _strokes(p: dict, dx: float, dy: float):
    """Polyline points, shape (M, 2) as (x, y), plus filled-disc eye specs."""
    pts = []
    xs = np.linspace(-p["mouth_w"], p["mouth_w"], 24)
    # Corners rise for a smile, drop for a frown.
    ys = 0.72 - p["curve"] * (xs / p["mouth_w"]) ** 2
    pts.append(np.stack([0.5 + xs, ys], axis=1))
    for side in (-1, 1):
        outer = 0.5 + side * 0.30
        inner = 0.5 + side * 0.10
        bx = np.linspace(outer, inner, 12)
        by = np.linspace(0.22, 0.22 + p["slant"], 12)
        pts.append(np.stack([bx, by], axis=1))
    pts = np.concatenate(pts) + np.array([dx, dy])
    eyes = [(0.5 - 0.19 + dx, 0.40 + dy, p["eye_r"]), (0.5 + 0.19 + dx, 0.40 + dy, p["eye_r"])]
    return pts, eyes


def _render(p: dict, dx: float, dy: float, H: int, W: int) -> np.ndarray:
    yy, xx = np.meshgrid((np.arange(H) + 0.5) / H, (np.arange(W) + 0.5) / W, indexing="ij")
    grid = np.stack([xx.ravel(), yy.ravel()], axis=1)
    pts, eyes = _strokes(p, dx, dy)
    d2 = np.min(np.sum((grid[:, None, :] - pts[None, :, :]) ** 2, axis=2), axis=1)
    img = np.exp(-d2 / (2 * _PEN ** 2))
    for ex, ey, r in eyes:
        dist = np.sqrt((grid[:, 0] - ex) ** 2 + (grid[:, 1] - ey) ** 2)
        img = np.maximum(img, np.clip((r + 0.5 / min(H, W) - dist) * min(H, W), 0.0, 1.0))
    return np.clip(img, 0.0, 1.0).reshape(H, W)


def render_template(k: int, H: int, W: int) -> np.ndarray:
    """Unperturbed template of class ``k`` as an ``(H, W)`` array in [0, 1]."""
    return _render(_template_params(k), 0.0, 0.0, H, W)


def gen_synthetic(K: int = 8, per_class: int = 200, H: int = 16, W: int = 16,
                  jitter: float = 0.2, seed: int = 0, C: int = 1, split: str = "train") -> GlyphDataset:
    """Generate ``K * per_class`` glyphs, sorted by class.

    ``jitter`` in [0, 1] scales template perturbations (translation, mouth
    curvature, brow slant, eye radius) and additive pixel noise; at 0 every
    sample equals its template.
    """
    if not 2 <= K <= MAX_CLASSES:
        raise ConfigError(f"K must lie in 2..{MAX_CLASSES}, got {K}")
    if H < 8 or W < 8:
        raise ConfigError("H and W must be >= 8")
    if per_class < 1 or C < 1:
        raise ConfigError("per_class and C must be >= 1")
    if not 0.0 <= jitter <= 1.0:
        raise ConfigError("jitter must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    images = np.empty((K * per_class, H, W, C), dtype=np.float32)
    labels = np.repeat(np.arange(K), per_class)
    for i, k in enumerate(labels):
        base = _template_params(int(k))
        u = rng.uniform(-1.0, 1.0, size=6) * jitter
        p = {
            "curve": base["curve"] * (1 + 0.5 * u[0]),
            "slant": base["slant"] * (1 + 0.5 * u[1]),
            "eye_r": base["eye_r"] * (1 + 0.3 * u[2]),
            "mouth_w": base["mouth_w"] * (1 + 0.2 * u[3]),
        }
        img = _render(p, 0.08 * u[4], 0.08 * u[5], H, W)
        noise = rng.standard_normal((H, W)) * (0.05 * jitter)
        img = np.clip(img + noise, 0.0, 1.0)
        images[i] = img[:, :, None]
    return GlyphDataset(images, labels, [class_name(k) for k in range(K)], split)


def nearest_template_predict(images, K: int) -> np.ndarray:
    """Classify ``images`` by L2 distance to the unperturbed class templates."""
    images = np.asarray(images, dtype=np.float64)
    H, W = images.shape[1:3]
    flat = images.mean(axis=3).reshape(len(images), -1)
    templates = np.stack([render_template(k, H, W).ravel() for k in range(K)])
    d = ((flat[:, None, :] - templates[None]) ** 2).sum(axis=2)
    return np.argmin(d, axis=1)


# -- corruptions --------------------------------------------------------------

class CorruptionKind(str, Enum):
    GAUSSIAN_NOISE = "gaussian_noise"
    GAUSSIAN_BLUR = "gaussian_blur"


@dataclass(frozen=True)
class CorruptionSpec:
    """``sigma`` is on the 0-255 scale for noise and in pixels for blur."""

    kind: CorruptionKind
    sigma: float
    kernel_size: int = 5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", CorruptionKind(self.kind))
        if self.kind == CorruptionKind.GAUSSIAN_BLUR:
            if not self.sigma > 0:
                raise ArgumentError("blur sigma must be > 0")
            if self.kernel_size < 3 or self.kernel_size % 2 == 0:
                raise ArgumentError(f"blur kernel_size must be odd and >= 3, got {self.kernel_size}")
        elif not self.sigma >= 0:
            raise ArgumentError("noise sigma must be >= 0")

    @property
    def label(self) -> str:
        if self.kind == CorruptionKind.GAUSSIAN_NOISE:
            return f"noise_sigma{self.sigma:g}"
        return f"blur_k{self.kernel_size}_sigma{self.sigma:g}"

    @classmethod
    def noise(cls, sigma, seed=0):
        return cls(CorruptionKind.GAUSSIAN_NOISE, sigma, seed=seed)

    @classmethod
    def blur(cls, sigma, kernel_size=5):
        return cls(CorruptionKind.GAUSSIAN_BLUR, sigma, kernel_size=kernel_size)


NOISE_SIGMAS = (10, 20, 30, 40, 50)
# Full-resolution blur grid; on 16x16 glyphs a 15-tap kernel erases most of the signal,
# so the desk grid below is the default.
BLUR_SIGMAS_FULL = (2, 5, 10, 15)
BLUR_KERNEL_FULL = 15
BLUR_SIGMAS_DESK = (0.5, 1, 2)
BLUR_KERNEL_DESK = 5


def gaussian_kernel(kernel_size: int, sigma: float) -> np.ndarray:
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ArgumentError(f"kernel_size must be odd, got {kernel_size}")
    r = kernel_size // 2
    ax = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def corrupt(images, spec: CorruptionSpec) -> np.ndarray:
    """Apply ``spec`` to ``(N, H, W, C)`` images in [0, 1]; output stays in [0, 1]."""
    images = np.asarray(images)
    if images.ndim != 4:
        raise ArgumentError("images must be N x H x W x C")
    dtype = images.dtype if np.issubdtype(images.dtype, np.floating) else np.float32
    if spec.kind == CorruptionKind.GAUSSIAN_NOISE:
        if spec.sigma == 0:
            return np.clip(images, 0.0, 1.0).astype(dtype)
        rng = np.random.default_rng(spec.seed)
        noisy = images + rng.standard_normal(images.shape) * (spec.sigma / 255.0)
        return np.clip(noisy, 0.0, 1.0).astype(dtype)
    kernel = gaussian_kernel(spec.kernel_size, spec.sigma)[None, :, :, None]
    # "mirror" matches numpy.pad(mode="reflect"): the edge pixel is not repeated.
    out = ndimage.convolve(images.astype(np.float64), kernel, mode="mirror")
    return np.clip(out, 0.0, 1.0).astype(dtype)


# -- .dds files ---------------------------------------------------------------

def dataset_bytes(ds: GlyphDataset) -> bytes:
    N, H, W, C = ds.images.shape
    K = ds.K
    if K > 0xFFFF:
        raise ArgumentError("too many classes for u16 labels")
    parts = [DDS_MAGIC, struct.pack("<6I", DDS_VERSION, N, H, W, C, K),
             ds.images.astype("<f4").tobytes(), ds.labels.astype("<u2").tobytes()]
    for name in ds.class_names:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
    return b"".join(parts)


def save_dataset(ds: GlyphDataset, path) -> Path:
    path = Path(path)
    path.write_bytes(dataset_bytes(ds))
    return path


def _need(data: bytes, offset: int, size: int, what: str):
    if len(data) < offset + size:
        raise FormatError(
            f"truncated {what}: expected {offset + size} bytes, file has {len(data)}", offset)


def parse_dataset(data: bytes, split: str = "unknown") -> GlyphDataset:
    _need(data, 0, 28, "header")
    if data[:4] != DDS_MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {DDS_MAGIC!r}", 0)
    version, N, H, W, C, K = struct.unpack_from("<6I", data, 4)
    if version != DDS_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    offset = 28
    npix = N * H * W * C
    _need(data, offset, 4 * npix, "pixel block")
    images = np.frombuffer(data, dtype="<f4", count=npix, offset=offset).reshape(N, H, W, C)
    offset += 4 * npix
    _need(data, offset, 2 * N, "label block")
    labels = np.frombuffer(data, dtype="<u2", count=N, offset=offset).astype(np.int64)
    offset += 2 * N
    names = []
    for _ in range(K):
        _need(data, offset, 4, "class-name length")
        (length,) = struct.unpack_from("<I", data, offset)
        offset += 4
        _need(data, offset, length, "class name")
        try:
            names.append(data[offset:offset + length].decode("utf-8"))
        except UnicodeDecodeError:
            raise FormatError("class name is not valid UTF-8", offset) from None
        offset += length
    if offset != len(data):
        raise FormatError(f"trailing bytes: expected {offset} bytes, file has {len(data)}", offset)
    if labels.size and labels.max() >= K:
        raise FormatError(f"label {labels.max()} out of range for K={K}", 28 + 4 * npix)
    try:
        return GlyphDataset(images.copy(), labels, names, split)
    except ArgumentError as exc:
        raise FormatError(str(exc), 28) from None


def load_dataset(path, split: str | None = None) -> GlyphDataset:
    path = Path(path)
    return parse_dataset(path.read_bytes(), split if split is not None else path.stem)
