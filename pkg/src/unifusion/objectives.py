"""Training objectives: structural similarity, texture and intensity terms,
the per-task loss they combine into, and the unified single-loss baseline.

All losses take fused/source images as (H, W) or (H, W, 1) tensors with
values in [0, 1] and return a differentiable scalar.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autograd import (DomainError, ShapeError, Tensor, maximum, unfold2d,
                       windows2d)

TASKS = ("ivf", "mef", "mff")

_SOBEL_X = np.array([[-1.0, 0.0, 1.0],
                     [-2.0, 0.0, 2.0],
                     [-1.0, 0.0, 1.0]])
_SOBEL_Y = _SOBEL_X.T


@dataclass(frozen=True)
class SsimConfig:
    window: int = 11
    sigma: float = 1.5
    c1: float = 0.01 ** 2
    c2: float = 0.03 ** 2

    def __post_init__(self):
        if self.window % 2 != 1 or self.window < 1:
            raise DomainError(f"SsimConfig: window must be odd, got {self.window}")


@dataclass(frozen=True)
class TaskObjectiveSpec:
    task: str
    lam1: float
    lam2: float
    lam3: float
    aggregator: str

    def __post_init__(self):
        if min(self.lam1, self.lam2, self.lam3) < 0:
            raise DomainError("TaskObjectiveSpec: coefficients must be >= 0")
        if self.aggregator not in ("max", "mean"):
            raise DomainError(
                f"TaskObjectiveSpec: aggregator {self.aggregator!r} not in ('max', 'mean')")


def task_objective(task: str) -> TaskObjectiveSpec:
    """The stock per-task objective: coefficients (10, 20, 20), intensity
    target max(i1, i2) except for exposure stacks where it is the mean."""
    if task not in TASKS:
        raise DomainError(f"task_objective: unknown task {task!r}")
    agg = "mean" if task == "mef" else "max"
    return TaskObjectiveSpec(task=task, lam1=10.0, lam2=20.0, lam3=20.0, aggregator=agg)


def _plane(img: Tensor, op: str) -> tuple[Tensor, int, int]:
    if img.ndim == 3 and img.shape[2] == 1:
        h, w = img.shape[0], img.shape[1]
        return img.reshape(h, w), h, w
    if img.ndim == 2:
        return img, img.shape[0], img.shape[1]
    raise ShapeError(f"{op}: expected an (H, W) or (H, W, 1) image, got {img.shape}")


def _check_pair(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: images {a.shape} and {b.shape} differ")


def gaussian_window(side: int, sigma: float) -> np.ndarray:
    """Normalized 2-d Gaussian tap weights, flattened to (side*side, 1)."""
    r = side // 2
    g = np.exp(-(np.arange(-r, r + 1) ** 2) / (2.0 * sigma * sigma))
    k = np.outer(g, g)
    return (k / k.sum()).reshape(-1, 1)


def ssim_loss(f: Tensor, a: Tensor, cfg: SsimConfig = SsimConfig()) -> Tensor:
    """1 minus the mean SSIM index over all fully-contained Gaussian windows."""
    _check_pair(f, a, "ssim_loss")
    x, h, w = _plane(f, "ssim_loss")
    y, _, _ = _plane(a, "ssim_loss")
    k = cfg.window
    if h < k or w < k:
        raise ShapeError(f"ssim_loss: image {h}x{w} smaller than the {k}x{k} window")
    n_out = (h - k + 1) * (w - k + 1)
    win = Tensor(gaussian_window(k, cfg.sigma))
    xs = windows2d(x.reshape(h * w, 1), h, w, k).reshape(n_out, k * k)
    ys = windows2d(y.reshape(h * w, 1), h, w, k).reshape(n_out, k * k)
    mx = xs @ win
    my = ys @ win
    vx = (xs * xs) @ win - mx * mx
    vy = (ys * ys) @ win - my * my
    cov = (xs * ys) @ win - mx * my
    num = (mx * my * 2.0 + cfg.c1) * (cov * 2.0 + cfg.c2)
    den = (mx * mx + my * my + cfg.c1) * (vx + vy + cfg.c2)
    return 1.0 - (num / den).mean()


def _sobel_response(x: Tensor, h: int, w: int, kernel: np.ndarray) -> Tensor:
    taps = Tensor(kernel.reshape(-1, 1))
    patches = unfold2d(x.reshape(h * w, 1), h, w, 3).reshape(h * w, 9)
    return (patches @ taps).reshape(h, w)


def sobel_gradient_mag(img: Tensor) -> Tensor:
    """|Gx * I| + |Gy * I| with 3x3 Sobel taps and reflected borders."""
    x, h, w = _plane(img, "sobel_gradient_mag")
    gx = _sobel_response(x, h, w, _SOBEL_X)
    gy = _sobel_response(x, h, w, _SOBEL_Y)
    return gx.abs() + gy.abs()


def text_loss(f: Tensor, i1: Tensor, i2: Tensor) -> Tensor:
    """Mean absolute gap between the fused gradient magnitude and the
    pixelwise max of the source gradient magnitudes."""
    _check_pair(f, i1, "text_loss")
    _check_pair(f, i2, "text_loss")
    target = maximum(sobel_gradient_mag(i1), sobel_gradient_mag(i2))
    return (sobel_gradient_mag(f) - target).abs().mean()


def intensity_loss(f: Tensor, i1: Tensor, i2: Tensor, aggregator: str) -> Tensor:
    """Mean absolute deviation of the fused image from the aggregated target."""
    _check_pair(f, i1, "intensity_loss")
    _check_pair(f, i2, "intensity_loss")
    if aggregator == "max":
        target = maximum(i1, i2)
    elif aggregator == "mean":
        target = (i1 + i2) * 0.5
    else:
        raise DomainError(f"intensity_loss: aggregator {aggregator!r} not in ('max', 'mean')")
    return (f - target).abs().mean()


def task_loss(f: Tensor, i1: Tensor, i2: Tensor, spec: TaskObjectiveSpec,
              ssim_cfg: SsimConfig = SsimConfig()) -> Tensor:
    """Per-task training loss: lam1 * ssim + lam2 * texture + lam3 * intensity,
    clamped below at 1e-8 so downstream log-loss terms stay defined."""
    l_ssim = ssim_loss(f, i1, ssim_cfg) * 0.5 + ssim_loss(f, i2, ssim_cfg) * 0.5
    l_text = text_loss(f, i1, i2)
    l_int = intensity_loss(f, i1, i2, spec.aggregator)
    total = l_ssim * spec.lam1 + l_text * spec.lam2 + l_int * spec.lam3
    return total.clamp_min(1e-8)


def unified_loss(f: Tensor, i1: Tensor, i2: Tensor, w1: float, w2: float,
                 ssim_cfg: SsimConfig = SsimConfig()) -> Tensor:
    """Single-objective baseline: source-weighted SSIM plus 20x source-weighted
    per-pixel MSE."""
    if w1 < 0 or w2 < 0 or abs(w1 + w2 - 1.0) > 1e-9:
        raise DomainError(f"unified_loss: weights ({w1}, {w2}) must be >= 0 and sum to 1")
    l_ssim = ssim_loss(f, i1, ssim_cfg) * w1 + ssim_loss(f, i2, ssim_cfg) * w2
    d1 = f - i1
    d2 = f - i2
    l_mse = (d1 * d1).mean() * w1 + (d2 * d2).mean() * w2
    return l_ssim + l_mse * 20.0


def info_weights(i1: Tensor, i2: Tensor, temperature: float = 0.1) -> tuple[float, float]:
    """Source weights for the unified baseline: a softmax over mean gradient
    energy, so the busier image gets the larger weight."""
    _check_pair(i1, i2, "info_weights")
    g1 = float(sobel_gradient_mag(i1).data.mean())
    g2 = float(sobel_gradient_mag(i2).data.mean())
    w1 = 1.0 / (1.0 + math.exp((g2 - g1) / temperature))
    return w1, 1.0 - w1
