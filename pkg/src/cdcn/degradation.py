"""Blur kernels, the s-fold degradation and structure/detail label synthesis.

Images are float64 numpy arrays of shape (H, W, C) with C in {1, 3}; kernels are
square float64 arrays. The LR observation is produced as

    lr = (hr * k_g * k_b) sampled at every s-th pixel from the upper left

and the training labels split the HR image into ``structure = hr * k_g`` and
``detail = hr - structure``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

log = logging.getLogger(__name__)

SUPPORTED_SCALES = (2, 3, 4)

# Gaussian8 evaluation ranges and training width ranges, keyed by scale.
GAUSSIAN8_RANGES = {2: (0.80, 1.60), 3: (1.35, 2.40), 4: (1.80, 3.20)}
TRAINING_WIDTH_RANGES = {2: (0.2, 2.0), 3: (0.2, 3.0), 4: (0.2, 4.0)}

ANISO_LAMBDA_RANGE = (0.6, 5.0)
ANISO_MAX_NOISE = 0.25


@dataclass(frozen=True)
class IsoKernelSpec:
    width: float
    size: int = 21

    def __post_init__(self):
        if not self.width > 0:
            raise ValueError(f"kernel width must be positive, got {self.width}")
        _check_size(self.size)

    def describe(self) -> str:
        return f"iso:width={self.width!r}"


@dataclass(frozen=True)
class AnisoKernelSpec:
    lambda1: float
    lambda2: float
    theta: float
    noise_level: float = 0.0
    seed: int = 0
    size: int = 11

    def __post_init__(self):
        lo, hi = ANISO_LAMBDA_RANGE
        for name in ("lambda1", "lambda2"):
            v = getattr(self, name)
            if not lo <= v <= hi:
                raise ValueError(f"{name}={v} outside [{lo}, {hi}]")
        if not -math.pi <= self.theta <= math.pi:
            raise ValueError(f"theta={self.theta} outside [-pi, pi]")
        if not 0.0 <= self.noise_level <= ANISO_MAX_NOISE:
            raise ValueError(f"noise_level={self.noise_level} outside [0, {ANISO_MAX_NOISE}]")
        _check_size(self.size)

    def describe(self) -> str:
        return (f"aniso:l1={self.lambda1!r},l2={self.lambda2!r},theta={self.theta!r},"
                f"noise={self.noise_level!r},seed={self.seed}")

    @classmethod
    def random(cls, rng: np.random.Generator, noise_level=ANISO_MAX_NOISE, size=11):
        """Draw lambdas ~ U(0.6, 5) and theta ~ U(-pi, pi); the seed for the
        multiplicative noise is drawn from ``rng`` as well."""
        l1, l2 = rng.uniform(*ANISO_LAMBDA_RANGE, size=2)
        theta = rng.uniform(-math.pi, math.pi)
        seed = int(rng.integers(0, 2**31 - 1))
        return cls(float(l1), float(l2), float(theta), noise_level, seed, size)


KernelSpec = Union[IsoKernelSpec, AnisoKernelSpec]


@dataclass(frozen=True)
class DegradationConfig:
    scale: int
    blur: KernelSpec | None = None
    bicubic_a: float = -0.5

    def __post_init__(self):
        if self.scale < 1:
            raise ValueError(f"scale must be >= 1, got {self.scale}")


@dataclass
class ComponentTriple:
    structure: np.ndarray
    detail: np.ndarray
    lr: np.ndarray
    meta: dict = field(default_factory=dict)


def _check_size(size):
    if size < 3 or size % 2 == 0:
        raise ValueError(f"kernel size must be an odd integer >= 3, got {size}")


def _grid(size):
    r = (size - 1) / 2.0
    ax = np.arange(size, dtype=np.float64) - r
    # rows = y, columns = x
    return np.meshgrid(ax, ax, indexing="ij")


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------

def make_isotropic_gaussian(spec: IsoKernelSpec) -> np.ndarray:
    yy, xx = _grid(spec.size)
    k = np.exp(-(xx ** 2 + yy ** 2) / (2.0 * spec.width ** 2))
    return k / k.sum()


def make_anisotropic_gaussian(spec: AnisoKernelSpec) -> np.ndarray:
    """Rotated Gaussian with per-axis std ``lambda1`` (x) and ``lambda2`` (y),
    perturbed entry-wise by i.i.d. factors from U(1 - noise, 1 + noise)."""
    c, s = math.cos(spec.theta), math.sin(spec.theta)
    rot = np.array([[c, -s], [s, c]])
    cov = rot @ np.diag([spec.lambda1 ** 2, spec.lambda2 ** 2]) @ rot.T
    prec = np.linalg.inv(cov)
    yy, xx = _grid(spec.size)
    q = prec[0, 0] * xx ** 2 + 2.0 * prec[0, 1] * xx * yy + prec[1, 1] * yy ** 2
    k = np.exp(-0.5 * q)
    k /= k.sum()
    if spec.noise_level > 0:
        rng = np.random.default_rng(spec.seed)
        k = k * rng.uniform(1.0 - spec.noise_level, 1.0 + spec.noise_level, size=k.shape)
        np.clip(k, 0.0, None, out=k)
        k /= k.sum()
    return k


def make_kernel(spec: KernelSpec) -> np.ndarray:
    if isinstance(spec, IsoKernelSpec):
        return make_isotropic_gaussian(spec)
    if isinstance(spec, AnisoKernelSpec):
        return make_anisotropic_gaussian(spec)
    raise TypeError(f"unknown kernel spec {spec!r}")


def cubic(x, a=-0.5):
    """Keys cubic-convolution function."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x ** 2, x ** 3
    near = (a + 2.0) * x3 - (a + 3.0) * x2 + 1.0
    far = a * x3 - 5.0 * a * x2 + 8.0 * a * x - 4.0 * a
    return np.where(x <= 1.0, near, np.where(x < 2.0, far, 0.0))


def bicubic_taps(scale: int, a: float = -0.5) -> np.ndarray:
    """1-D anti-aliasing taps of length ``2 * max|d| + 1``.

    Output sample ``i`` of a standard bicubic resize by ``1/scale`` sits at HR
    coordinate ``scale * i + (scale - 1) / 2``. Tap ``d`` (offset from the
    kept upper-left pixel) therefore weighs ``cubic((d - (scale - 1)/2) / scale)``.
    """
    if scale < 1:
        raise ValueError(f"scale must be >= 1, got {scale}")
    phase = (scale - 1) / 2.0
    reach = int(math.ceil(phase + 2 * scale))
    d = np.arange(-reach, reach + 1)
    w = cubic((d - phase) / scale, a)
    nz = np.nonzero(w)[0]
    half = int(np.max(np.abs(d[nz])))
    w = w[(d >= -half) & (d <= half)]
    return w / w.sum()


def make_bicubic_kernel(scale: int, a: float = -0.5) -> np.ndarray:
    """Separable bicubic kernel; has negative lobes, so only the sum-to-one
    invariant applies."""
    t = bicubic_taps(scale, a)
    k = np.outer(t, t)
    return k / k.sum()


# ---------------------------------------------------------------------------
# operators
# ---------------------------------------------------------------------------

def _as_image(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ValueError(f"expected an HxWxC image with C in (1, 3), got shape {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError("empty image")
    return img


def blur(img, k) -> np.ndarray:
    """Per-channel 2-D correlation with reflect (half-sample symmetric) padding."""
    img = _as_image(img)
    k = np.asarray(k, dtype=np.float64)
    if k.shape[0] > img.shape[0] or k.shape[1] > img.shape[1]:
        raise ValueError(f"kernel {k.shape} larger than image {img.shape[:2]}")
    u, sv, vt = np.linalg.svd(k)
    if sv[0] > 0 and sv[1:].sum() <= 1e-13 * sv[0]:
        col = u[:, 0] * np.sqrt(sv[0])
        row = vt[0] * np.sqrt(sv[0])
        tmp = ndimage.correlate1d(img, col, axis=0, mode="reflect")
        return ndimage.correlate1d(tmp, row, axis=1, mode="reflect")
    return ndimage.correlate(img, k[:, :, None], mode="reflect")


def sfold_downsample(img, s: int) -> np.ndarray:
    img = _as_image(img)
    h, w = img.shape[:2]
    if s < 1 or h % s or w % s:
        raise ValueError(f"image {h}x{w} not divisible by scale {s}")
    return img[::s, ::s].copy()


def modcrop(img, s: int) -> np.ndarray:
    """Center-crop so both dimensions are multiples of ``s``."""
    img = _as_image(img)
    h, w = img.shape[:2]
    nh, nw = h - h % s, w - w % s
    if nh == 0 or nw == 0:
        raise ValueError(f"image {h}x{w} smaller than scale {s}")
    top, left = (h - nh) // 2, (w - nw) // 2
    return img[top:top + nh, left:left + nw]


def degrade(hr, k_g, cfg: DegradationConfig) -> np.ndarray:
    k_b = make_bicubic_kernel(cfg.scale, cfg.bicubic_a)
    return sfold_downsample(blur(blur(hr, k_g), k_b), cfg.scale)


def decompose_labels(hr, k_g, cfg: DegradationConfig) -> ComponentTriple:
    hr = _as_image(hr)
    structure = blur(hr, k_g)
    detail = hr - structure
    k_b = make_bicubic_kernel(cfg.scale, cfg.bicubic_a)
    lr = sfold_downsample(blur(structure, k_b), cfg.scale)
    return ComponentTriple(structure, detail, lr)


def gaussian8_widths(scale: int) -> list[float]:
    if scale not in GAUSSIAN8_RANGES:
        raise ValueError(f"Gaussian8 is defined for scales {SUPPORTED_SCALES}, got {scale}")
    lo, hi = GAUSSIAN8_RANGES[scale]
    return [float(round(v, 10)) for v in np.linspace(lo, hi, 8)]


def training_width_range(scale: int) -> tuple[float, float]:
    if scale not in TRAINING_WIDTH_RANGES:
        raise ValueError(f"no training width range for scale {scale}")
    return TRAINING_WIDTH_RANGES[scale]


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def write_kernel(path, k, description="") -> None:
    k = np.asarray(k, dtype=np.float64)
    if k.ndim != 2 or k.shape[0] != k.shape[1]:
        raise ValueError(f"kernel must be square, got {k.shape}")
    lines = [f"{k.shape[0]} {description}".rstrip()]
    lines += [" ".join(repr(float(v)) for v in row) for row in k]
    Path(path).write_text("\n".join(lines) + "\n")


def read_kernel(path) -> tuple[np.ndarray, str]:
    lines = Path(path).read_text().splitlines()
    head = lines[0].split(maxsplit=1)
    size = int(head[0])
    desc = head[1] if len(head) > 1 else ""
    rows = [[float(v) for v in ln.split()] for ln in lines[1:1 + size]]
    k = np.array(rows, dtype=np.float64)
    if k.shape != (size, size):
        raise ValueError(f"{path}: expected {size}x{size} entries, got {k.shape}")
    return k, desc


def load_image(path) -> np.ndarray:
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def to_uint8(img) -> np.ndarray:
    img = _as_image(img)
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def quantize(img) -> np.ndarray:
    """Round-trip through the 8-bit grid, as happens when saving to PNG."""
    return to_uint8(img).astype(np.float64) / 255.0


def save_image(path, img) -> None:
    u8 = to_uint8(img)
    if u8.shape[2] == 1:
        u8 = u8[:, :, 0]
    PILImage.fromarray(u8).save(path)


def detail_to_display(detail) -> np.ndarray:
    """Signed detail residual mapped into [0, 1] by a +0.5 shift."""
    return np.clip(np.asarray(detail) + 0.5, 0.0, 1.0)


# ---------------------------------------------------------------------------
# MATLAB-compatible bicubic resize (used for the bicubic baseline)
# ---------------------------------------------------------------------------

def _resize_weights(in_len, out_len, scale, a):
    kernel_width = 4.0
    antialias = scale < 1
    if antialias:
        kernel_width /= scale
    x = np.arange(1, out_len + 1, dtype=np.float64)
    u = x / scale + 0.5 * (1 - 1 / scale)
    left = np.floor(u - kernel_width / 2)
    p = int(math.ceil(kernel_width)) + 2
    idx = left[:, None] + np.arange(p)[None, :]
    dist = u[:, None] - idx
    if antialias:
        w = scale * cubic(dist * scale, a)
    else:
        w = cubic(dist, a)
    w = w / w.sum(axis=1, keepdims=True)
    # symmetric (half-sample) boundary handling, 0-based
    idx = idx - 1
    period = 2 * in_len
    idx = np.mod(idx, period)
    idx = np.where(idx >= in_len, period - 1 - idx, idx).astype(np.int64)
    keep = np.any(w != 0, axis=0)
    return w[:, keep], idx[:, keep]


def imresize(img, scale: float, a: float = -0.5) -> np.ndarray:
    """Bicubic resize matching MATLAB's ``imresize(img, scale, 'bicubic')``."""
    img = _as_image(img)
    out = img
    for axis in (0, 1):
        n = out.shape[axis]
        m = int(math.ceil(n * scale))
        w, idx = _resize_weights(n, m, scale, a)
        moved = np.moveaxis(out, axis, 0)
        res = np.einsum("mp,mp...->m...", w, moved[idx])
        out = np.moveaxis(res, 0, axis)
    return out
