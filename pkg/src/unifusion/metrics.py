"""Reference-free fusion quality metrics: mutual information, structural
similarity, intensity spread, edge intensity, and the Xydeas-Petrovic edge
transfer score. All operate on (H, W) numpy arrays with values in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate

from .autograd import DomainError, ShapeError, Tensor
from .objectives import SsimConfig, sobel_gradient_mag, ssim_loss

_SOBEL_X = np.array([[-1.0, 0.0, 1.0],
                     [-2.0, 0.0, 2.0],
                     [-1.0, 0.0, 1.0]])


@dataclass(frozen=True)
class MetricConfig:
    bins: int = 256
    ssim: SsimConfig = field(default_factory=SsimConfig)

    def __post_init__(self):
        if self.bins < 2:
            raise DomainError(f"MetricConfig: need at least 2 bins, got {self.bins}")


def _check(img: np.ndarray, what: str) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{what}: expected an (H, W) array, got {arr.shape}")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise DomainError(f"{what}: values must lie in [0, 1]")
    return arr


def _pair(f, a, what: str) -> tuple[np.ndarray, np.ndarray]:
    x = _check(f, what)
    y = _check(a, what)
    if x.shape != y.shape:
        raise ShapeError(f"{what}: images {x.shape} and {y.shape} differ")
    return x, y


def _bin_index(img: np.ndarray, bins: int) -> np.ndarray:
    return np.clip(np.floor(img * (bins - 1) + 0.5), 0, bins - 1).astype(np.intp)


def mutual_information(f, a, bins: int = 256) -> float:
    """MI in bits between the quantized intensity distributions."""
    x, y = _pair(f, a, "mutual_information")
    qx = _bin_index(x, bins)
    qy = _bin_index(y, bins)
    joint = np.bincount(qx.ravel() * bins + qy.ravel(),
                        minlength=bins * bins).reshape(bins, bins) / x.size
    px = joint.sum(axis=1)
    py = joint.sum(axis=0)
    ii, jj = np.nonzero(joint)
    p = joint[ii, jj]
    terms = p * (np.log2(p) - np.log2(px[ii]) - np.log2(py[jj]))
    return float(terms.sum())


def ssim_metric(f, a, cfg: SsimConfig = SsimConfig()) -> float:
    """Mean SSIM index over the Gaussian-windowed map."""
    x, y = _pair(f, a, "ssim_metric")
    return 1.0 - ssim_loss(Tensor(x), Tensor(y), cfg).item()


def std_dev(f) -> float:
    """Population standard deviation of the intensities."""
    return float(np.std(_check(f, "std_dev")))


def edge_intensity(f) -> float:
    """Mean Sobel gradient magnitude."""
    return float(sobel_gradient_mag(Tensor(_check(f, "edge_intensity"))).data.mean())


def _sobel_xy(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    gx = correlate(img, _SOBEL_X, mode="mirror")
    gy = correlate(img, _SOBEL_X.T, mode="mirror")
    return gx, gy


def _edge_preservation(g_src, a_src, g_f, a_f) -> np.ndarray:
    """Per-pixel Q between one source and the fused image: sigmoid models of
    relative edge strength and relative orientation."""
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(g_src > g_f,
                         np.divide(g_f, g_src, out=np.zeros_like(g_f),
                                   where=g_src > 0),
                         np.divide(g_src, g_f, out=np.zeros_like(g_f),
                                   where=g_f > 0))
    d = np.abs(a_src - a_f)
    d = np.minimum(d, 2.0 * np.pi - d)
    d = np.minimum(d, np.pi - d)
    align = 1.0 - d / (np.pi / 2.0)
    qg = 0.9994 / (1.0 + np.exp(-15.0 * (ratio - 0.5)))
    qa = 0.9879 / (1.0 + np.exp(-22.0 * (align - 0.8)))
    return qg * qa


def qabf(f, i1, i2) -> float:
    """Edge transfer from both sources into the fused image, weighted by
    source edge strength. Pixels where the fused image has no edge
    contribute zero; an edge-free source pair scores zero outright."""
    x, a = _pair(f, i1, "qabf")
    _, b = _pair(f, i2, "qabf")
    gxf, gyf = _sobel_xy(x)
    gf = np.hypot(gxf, gyf)
    af = np.arctan2(gyf, gxf)
    weights_sum = 0.0
    contrib = 0.0
    for src in (a, b):
        gxs, gys = _sobel_xy(src)
        gs = np.hypot(gxs, gys)
        al = np.arctan2(gys, gxs)
        q = np.where(gf > 0, _edge_preservation(gs, al, gf, af), 0.0)
        contrib += float((q * gs).sum())
        weights_sum += float(gs.sum())
    if weights_sum == 0.0:
        return 0.0
    return contrib / weights_sum


def evaluate_pair(f, i1, i2, oracle=None, cfg: MetricConfig = MetricConfig()) -> dict:
    """The metric row the evaluation harness reports for one fused pair."""
    row = {
        "mi": mutual_information(f, i1, cfg.bins) + mutual_information(f, i2, cfg.bins),
        "ssim": 0.5 * (ssim_metric(f, i1, cfg.ssim) + ssim_metric(f, i2, cfg.ssim)),
        "sd": std_dev(f),
        "ei": edge_intensity(f),
        "qabf": qabf(f, i1, i2),
    }
    if oracle is not None:
        row["oracle_ssim"] = ssim_metric(f, oracle, cfg.ssim)
    return row
