"""Y-channel PSNR/SSIM and the benchmark protocols."""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np
import torch
from scipy import ndimage

from .degradation import (
    AnisoKernelSpec,
    DegradationConfig,
    IsoKernelSpec,
    decompose_labels,
    degrade,
    gaussian8_widths,
    imresize,
    load_image,
    make_kernel,
    modcrop,
    quantize,
)
from .training import IMAGE_SUFFIXES, from_tensor, to_tensor

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


def rgb_to_y(img) -> np.ndarray:
    """BT.601 studio-swing luma on the [0, 1] scale, shape HxWx1."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 image, got shape {img.shape}")
    y = (65.481 * img[..., 0] + 128.553 * img[..., 1] + 24.966 * img[..., 2] + 16.0) / 255.0
    return y[..., None]


def _luma(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.shape[2] == 1:
        return img[..., 0]
    return rgb_to_y(img)[..., 0]


def _shave(img, border):
    if border == 0:
        return img
    return img[border:-border, border:-border]


def psnr_y(a, b, border: int = 0) -> float:
    """PSNR in dB on Y, peak 1, capped at ``PSNR_CAP``. Single-channel inputs
    are taken to be Y already."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if border < 0 or 2 * border >= min(a.shape[:2]):
        raise ValueError(f"border {border} too large for {a.shape[:2]}")
    ya, yb = _luma(_shave(a, border)), _luma(_shave(b, border))
    mse = float(np.mean((ya - yb) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-ax ** 2 / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim_y(a, b, border: int = 0) -> float:
    """Mean single-scale SSIM over the valid window positions on Y."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    x, y = _luma(_shave(a, border)), _luma(_shave(b, border))
    if min(x.shape) < SSIM_WINDOW:
        raise ValueError(f"image {x.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    w = gaussian_window()
    r = SSIM_WINDOW // 2

    def filt(z):
        return ndimage.correlate(z, w, mode="constant")[r:-r, r:-r]

    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx ** 2
    syy = filt(y * y) - my ** 2
    sxy = filt(x * y) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx ** 2 + my ** 2 + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------------------
# predictors
# ---------------------------------------------------------------------------

class Prediction(NamedTuple):
    sr: np.ndarray
    structure_hat: Optional[np.ndarray] = None
    detail_hat: Optional[np.ndarray] = None


Predictor = Callable[[np.ndarray], Prediction]


class BicubicBaseline:
    def __init__(self, scale: int):
        self.scale = scale

    def __call__(self, lr) -> Prediction:
        return Prediction(imresize(lr, self.scale))


class ModelPredictor:
    def __init__(self, model):
        self.model = model.eval()
        self.scale = model.cfg.scale

    @torch.no_grad()
    def __call__(self, lr) -> Prediction:
        dtype = next(self.model.parameters()).dtype
        out = self.model(to_tensor(lr).to(dtype))
        return Prediction(*(None if t is None else from_tensor(t) for t in out))


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    rows: list = field(default_factory=list)  # (image_id, kernel_id, psnr, ssim)
    meta: dict = field(default_factory=dict)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([r[2] for r in self.rows]))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([r[3] for r in self.rows]))

    def per_kernel(self) -> dict[str, tuple[float, float]]:
        out = {}
        for kid in dict.fromkeys(r[1] for r in self.rows):
            sel = [r for r in self.rows if r[1] == kid]
            out[kid] = (float(np.mean([r[2] for r in sel])), float(np.mean([r[3] for r in sel])))
        return out

    def aggregate_line(self) -> str:
        return f"aggregate,mean,{self.mean_psnr!r},{self.mean_ssim!r}"

    def write(self, path) -> None:
        lines = ["# " + json.dumps(self.meta, sort_keys=True)]
        lines += [f"{i},{k},{p!r},{s!r}" for i, k, p, s in self.rows]
        lines.append("# " + self.aggregate_line())
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def read(cls, path) -> tuple["MetricReport", tuple[float, float]]:
        """Returns the report and the (psnr, ssim) stored in its footer."""
        lines = Path(path).read_text().splitlines()
        meta = json.loads(lines[0][2:])
        rows = []
        for ln in lines[1:-1]:
            i, k, p, s = ln.split(",")
            rows.append((i, k, float(p), float(s)))
        foot = lines[-1][2:].split(",")
        return cls(rows, meta), (float(foot[2]), float(foot[3]))


# ---------------------------------------------------------------------------
# protocols
# ---------------------------------------------------------------------------

def load_dataset(dataset_dir) -> list[tuple[str, np.ndarray]]:
    paths = sorted(p for p in Path(dataset_dir).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not paths:
        raise FileNotFoundError(f"no images in {dataset_dir}")
    return [(p.stem, load_image(p)) for p in paths]


def _score(predictor, hr, k, scale, border):
    lr = quantize(degrade(hr, k, DegradationConfig(scale)))
    sr = quantize(predictor(lr).sr)
    return psnr_y(sr, hr, border), ssim_y(sr, hr, border)


def evaluate_kernels(predictor: Predictor, images, scale: int, kernels_for, border=None,
                     workers: int = 1, meta=None) -> MetricReport:
    """Scores every (image, kernel) pair; ``kernels_for(index, image_id)`` yields
    ``(kernel_id, spec)`` tuples. Rows come back ordered by image then kernel."""
    border = scale if border is None else border
    jobs = []
    for idx, (name, img) in enumerate(images):
        hr = modcrop(img, scale)
        for kid, spec in kernels_for(idx, name):
            jobs.append((name, kid, hr, make_kernel(spec)))

    def run(job):
        name, kid, hr, k = job
        return (name, kid) + _score(predictor, hr, k, scale, border)

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            rows = list(ex.map(run, jobs))
    else:
        rows = [run(j) for j in jobs]
    meta = dict(meta or {})
    meta.update(scale=scale, border=border, images=len(images))
    return MetricReport(rows, meta)


def evaluate_gaussian8(predictor: Predictor, dataset_dir, scale: int, border=None,
                       workers: int = 1, kernel_size: int = 21) -> MetricReport:
    images = load_dataset(dataset_dir)
    widths = gaussian8_widths(scale)
    specs = [(f"g{i}_w{w:.2f}", IsoKernelSpec(w, kernel_size)) for i, w in enumerate(widths)]
    return evaluate_kernels(predictor, images, scale, lambda i, n: specs, border, workers,
                            {"protocol": "gaussian8", "widths": widths, "kernel_size": kernel_size})


def anisotropic_specs(seeds: Sequence[int], noise_level: float = 0.25) -> list[AnisoKernelSpec]:
    return [AnisoKernelSpec.random(np.random.default_rng(s), noise_level) for s in seeds]


def evaluate_anisotropic(predictor: Predictor, dataset_dir, scale: int, kernel_seeds: Sequence[int],
                         border=None, workers: int = 1, noise_level: float = 0.25,
                         specs: Sequence | None = None) -> MetricReport:
    """One seeded anisotropic kernel per image (seeds cycle if fewer than images).
    ``specs`` overrides the seeded draw with explicit kernel specs."""
    images = load_dataset(dataset_dir)
    if specs is None:
        if not kernel_seeds:
            raise ValueError("need at least one kernel seed")
        specs = anisotropic_specs(kernel_seeds, noise_level)
    chosen = [specs[i % len(specs)] for i in range(len(images))]
    kernels = []
    for spec in chosen:
        if isinstance(spec, AnisoKernelSpec):
            kernels.append({"lambda1": spec.lambda1, "lambda2": spec.lambda2, "theta": spec.theta,
                            "noise_level": spec.noise_level, "seed": spec.seed, "size": spec.size})
        else:
            kernels.append({"width": spec.width, "size": spec.size})
    return evaluate_kernels(predictor, images, scale,
                            lambda i, n: [(f"k{i}", chosen[i])], border, workers,
                            {"protocol": "anisotropic", "seeds": list(kernel_seeds or []),
                             "kernels": kernels})


def component_psnr(predictor: Predictor, dataset_dir, scale: int, widths: Sequence[float],
                   border=None, kernel_size: int = 21) -> list[float]:
    """Mean detail PSNR per kernel width. Both the predicted and the true
    detail are shifted by +0.5 before scoring."""
    images = [(n, modcrop(img, scale)) for n, img in load_dataset(dataset_dir)]
    border = scale if border is None else border
    curve = []
    for w in widths:
        k = make_kernel(IsoKernelSpec(w, kernel_size))
        vals = []
        for _, hr in images:
            triple = decompose_labels(hr, k, DegradationConfig(scale))
            pred = predictor(quantize(triple.lr))
            if pred.detail_hat is None:
                raise ValueError("predictor has no detail output")
            vals.append(psnr_y(pred.detail_hat + 0.5, triple.detail + 0.5, border))
        curve.append(float(np.mean(vals)))
    return curve
