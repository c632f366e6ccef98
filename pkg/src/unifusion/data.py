"""Synthetic fusion tasks with analytic ground truth, binary PGM/PPM image
I/O, BT.601 color handling, and dataset directory ingestion.

Three training recipes mimic the classic fusion settings at desk scale:
thermal-style salient blobs against a textured scene, over/under exposure
pairs from a shared latent image, and complementary focus splits. A fourth
recipe (a low/high frequency band split) is reserved for generalization
checks and never used in training.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .autograd import DomainError, ShapeError

TASK_KINDS = ("ivf", "mef", "mff", "unseen")
TRAIN_TASKS = ("ivf", "mef", "mff")


class FormatError(ValueError):
    """Malformed image file or dataset layout."""


def _check_image(arr: np.ndarray, what: str) -> None:
    if arr.ndim != 2:
        raise ShapeError(f"{what} must be a 2-d array, got shape {arr.shape}")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise DomainError(f"{what} values must lie in [0, 1]")


@dataclass
class FusionSample:
    i1: np.ndarray
    i2: np.ndarray
    oracle: np.ndarray | None
    task: str
    seed: int

    def __post_init__(self):
        _check_image(self.i1, "FusionSample.i1")
        _check_image(self.i2, "FusionSample.i2")
        if self.i1.shape != self.i2.shape:
            raise ShapeError(f"FusionSample: sources {self.i1.shape} and "
                             f"{self.i2.shape} differ")
        if self.oracle is not None:
            _check_image(self.oracle, "FusionSample.oracle")
            if self.oracle.shape != self.i1.shape:
                raise ShapeError("FusionSample: oracle shape differs from sources")


@dataclass(frozen=True)
class SyntheticTaskSpec:
    task: str
    h: int = 64
    w: int = 64
    n_blobs: int = 3
    texture_sigma: float = 1.5
    gamma_range: tuple[float, float] = (0.45, 2.2)
    exposure_scales: tuple[float, float] = (1.3, 0.7)
    blur_sigma: float = 2.0
    mask_smoothness: float = 3.0

    def __post_init__(self):
        if self.task not in TASK_KINDS:
            raise DomainError(f"SyntheticTaskSpec: unknown task {self.task!r}")
        if self.h < 16 or self.w < 16:
            raise DomainError(f"SyntheticTaskSpec: {self.h}x{self.w} below the 16-pixel floor")
        lo, hi = self.gamma_range
        if not 0 < lo <= 1 <= hi:
            raise DomainError(f"SyntheticTaskSpec: gamma range ({lo}, {hi}) must straddle 1")
        if self.blur_sigma < 0 or self.n_blobs < 1:
            raise DomainError("SyntheticTaskSpec: blur_sigma must be >= 0 and n_blobs >= 1")


def default_specs(h: int = 64, w: int = 64,
                  tasks: tuple[str, ...] = TRAIN_TASKS) -> list[SyntheticTaskSpec]:
    return [SyntheticTaskSpec(task=t, h=h, w=w) for t in tasks]


def _bandlimited(rng: np.random.Generator, h: int, w: int, sigma: float,
                 lo: float, hi: float) -> np.ndarray:
    z = gaussian_filter(rng.standard_normal((h, w)), sigma, mode="reflect")
    span = z.max() - z.min()
    z = (z - z.min()) / (span + 1e-12)
    return lo + (hi - lo) * z


def _gen_ivf(rng, spec):
    texture = _bandlimited(rng, spec.h, spec.w, spec.texture_sigma, 0.05, 0.85)
    bg = _bandlimited(rng, spec.h, spec.w, 2.0 * spec.texture_sigma, 0.05, 0.2)
    yy, xx = np.mgrid[0:spec.h, 0:spec.w].astype(np.float64)
    blobs = np.zeros((spec.h, spec.w))
    r_lo = min(spec.h, spec.w) / 10.0
    for _ in range(spec.n_blobs):
        cy = rng.uniform(0, spec.h)
        cx = rng.uniform(0, spec.w)
        r = rng.uniform(r_lo, 2.0 * r_lo)
        amp = rng.uniform(0.7, 0.95)
        blobs = np.maximum(blobs, amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2)
                                               / (2.0 * r * r)))
    i2 = np.maximum(bg, blobs)
    return texture, i2, np.maximum(texture, i2)


def _gen_mef(rng, spec):
    latent = _bandlimited(rng, spec.h, spec.w, spec.texture_sigma, 0.05, 0.95)
    g_lo, g_hi = spec.gamma_range
    gamma_over = rng.uniform(g_lo, 1.0)
    gamma_under = rng.uniform(1.0, g_hi)
    s_over, s_under = spec.exposure_scales
    i1 = np.clip(s_over * latent ** gamma_over, 0.0, 1.0)
    i2 = np.clip(s_under * latent ** gamma_under, 0.0, 1.0)
    return i1, i2, latent


def _gen_mff(rng, spec):
    latent = _bandlimited(rng, spec.h, spec.w, spec.texture_sigma, 0.05, 0.95)
    z = gaussian_filter(rng.standard_normal((spec.h, spec.w)),
                        spec.mask_smoothness, mode="reflect")
    z = (z - z.mean()) / (z.std() + 1e-12)
    mask = 1.0 / (1.0 + np.exp(-3.0 * z))
    blurred = gaussian_filter(latent, spec.blur_sigma, mode="reflect")
    # written as blurred + m*(sharp - blurred) so sigma=0 reproduces the
    # latent image bit for bit
    i1 = blurred + mask * (latent - blurred)
    i2 = latent + mask * (blurred - latent)
    return i1, i2, latent


def _gen_unseen(rng, spec):
    latent = _bandlimited(rng, spec.h, spec.w, spec.texture_sigma, 0.05, 0.95)
    low = gaussian_filter(latent, max(spec.blur_sigma, 1.0), mode="reflect")
    i1 = low
    i2 = np.clip(latent - low + 0.5, 0.0, 1.0)
    return i1, i2, latent


_GENERATORS = {"ivf": _gen_ivf, "mef": _gen_mef, "mff": _gen_mff,
               "unseen": _gen_unseen}


def gen_pair(spec: SyntheticTaskSpec, seed: int) -> FusionSample:
    """Deterministic sample for (spec, seed), with its analytic fusion target."""
    rng = np.random.default_rng(seed)
    i1, i2, oracle = _GENERATORS[spec.task](rng, spec)
    return FusionSample(i1=i1, i2=i2, oracle=oracle, task=spec.task, seed=seed)


def sample_batch(specs: list[SyntheticTaskSpec], b: int, seed: int) -> list[FusionSample]:
    """Round-robin over the task specs so per-task counts differ by at most
    one, with per-sample seeds derived from the batch seed."""
    if not specs:
        raise DomainError("sample_batch: no task specs")
    if b < 1 or (b != 1 and b < len(specs)):
        raise DomainError(f"sample_batch: batch {b} must be 1 or >= {len(specs)} tasks")
    rng = np.random.default_rng(seed)
    child = rng.integers(0, 2 ** 63, size=b)
    return [gen_pair(specs[i % len(specs)], int(child[i])) for i in range(b)]


def _skip_space(buf: bytes, pos: int) -> int:
    while pos < len(buf):
        c = buf[pos]
        if c in b" \t\r\n":
            pos += 1
        elif c == ord("#"):
            while pos < len(buf) and buf[pos] not in b"\r\n":
                pos += 1
        else:
            break
    return pos


def _header_int(buf: bytes, pos: int, what: str) -> tuple[int, int]:
    pos = _skip_space(buf, pos)
    if pos >= len(buf):
        raise FormatError(f"pnm: missing {what} at byte {pos}")
    start = pos
    while pos < len(buf) and buf[pos] not in b" \t\r\n":
        pos += 1
    tok = buf[start:pos]
    if not tok.isdigit():
        raise FormatError(f"pnm: bad {what} {tok!r} at byte {start}")
    return int(tok), pos


def read_image(path) -> np.ndarray:
    """Binary PGM (P5) or PPM (P6) to a float image in [0, 1]; grayscale
    comes back (H, W), color (H, W, 3)."""
    buf = Path(path).read_bytes()
    pos = _skip_space(buf, 0)
    magic = buf[pos:pos + 2]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"pnm: unsupported magic {magic!r} at byte {pos}")
    w, pos = _header_int(buf, pos + 2, "width")
    h, pos = _header_int(buf, pos, "height")
    mv_at = _skip_space(buf, pos)
    maxval, pos = _header_int(buf, pos, "maxval")
    if w < 1 or h < 1:
        raise FormatError(f"pnm: degenerate size {w}x{h}")
    if maxval not in (255, 65535):
        raise FormatError(f"pnm: unsupported maxval {maxval} at byte {mv_at}")
    if pos >= len(buf) or buf[pos] not in b" \t\r\n":
        raise FormatError(f"pnm: expected single whitespace before raster at byte {pos}")
    pos += 1
    channels = 1 if magic == b"P5" else 3
    itemsize = 1 if maxval == 255 else 2
    need = w * h * channels * itemsize
    if len(buf) - pos < need:
        raise FormatError(f"pnm: raster truncated at byte {len(buf)}, "
                          f"need {need} bytes from byte {pos}")
    dtype = np.uint8 if itemsize == 1 else np.dtype(">u2")
    flat = np.frombuffer(buf[pos:pos + need], dtype=dtype)
    img = flat.astype(np.float64).reshape(h, w, channels) / maxval
    return img[:, :, 0] if channels == 1 else img


def quantize(img: np.ndarray, maxval: int = 255) -> np.ndarray:
    """Round-half-up quantization to maxval levels, returned rescaled to [0, 1]."""
    q = np.clip(np.floor(img * maxval + 0.5), 0, maxval)
    return q / maxval


def write_image(path, img: np.ndarray, maxval: int = 255) -> None:
    """Write a [0, 1] image as binary PGM (2-d input) or PPM ((H, W, 3))."""
    if maxval not in (255, 65535):
        raise DomainError(f"write_image: unsupported maxval {maxval}")
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        magic = b"P5"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    else:
        raise ShapeError(f"write_image: need (H, W) or (H, W, 3), got {arr.shape}")
    if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
        raise DomainError("write_image: values must be finite and in [0, 1]")
    h, w = arr.shape[0], arr.shape[1]
    q = np.clip(np.floor(arr * maxval + 0.5), 0, maxval)
    raster = q.astype(np.uint8 if maxval == 255 else np.dtype(">u2")).tobytes()
    header = magic + b"\n" + f"{w} {h}\n{maxval}\n".encode()
    Path(path).write_bytes(header + raster)


def rgb_to_ycbcr(img: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Full-range BT.601 split of an (H, W, 3) image in [0, 1]."""
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"rgb_to_ycbcr: need (H, W, 3), got {img.shape}")
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = 0.5 + (b - y) / 1.772
    cr = 0.5 + (r - y) / 1.402
    return y, cb, cr


def ycbcr_to_rgb(y: np.ndarray, cb: np.ndarray, cr: np.ndarray) -> np.ndarray:
    r = y + 1.402 * (cr - 0.5)
    b = y + 1.772 * (cb - 0.5)
    g = (y - 0.299 * r - 0.114 * b) / 0.587
    return np.stack([r, g, b], axis=-1)


def fuse_chroma(cb1, cr1, cb2, cr2) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel chroma mix weighted by each source's color saturation."""
    w1 = np.abs(cb1 - 0.5) + np.abs(cr1 - 0.5) + 1e-6
    w2 = np.abs(cb2 - 0.5) + np.abs(cr2 - 0.5) + 1e-6
    total = w1 + w2
    return (w1 * cb1 + w2 * cb2) / total, (w1 * cr1 + w2 * cr2) / total


@dataclass(frozen=True)
class DatasetPair:
    task: str
    pair_id: str
    a: Path
    b: Path
    gt: Path | None


def scan_dataset(root) -> list[DatasetPair]:
    """Discover `<root>/<task>/<pair>_{a,b[,gt]}.pgm` pairs in lexicographic
    order."""
    rootp = Path(root)
    if not rootp.is_dir():
        raise FormatError(f"scan_dataset: {rootp} is not a directory")
    pairs = []
    for task_dir in sorted(p for p in rootp.iterdir() if p.is_dir()):
        for a in sorted(task_dir.glob("*_a.pgm")):
            pid = a.name[:-len("_a.pgm")]
            b = task_dir / f"{pid}_b.pgm"
            if not b.is_file():
                raise FormatError(f"scan_dataset: {b} missing for {a}")
            gt = task_dir / f"{pid}_gt.pgm"
            pairs.append(DatasetPair(task=task_dir.name, pair_id=pid, a=a, b=b,
                                     gt=gt if gt.is_file() else None))
    return pairs


def load_pair(dp: DatasetPair) -> FusionSample:
    """Read a dataset pair as grayscale planes (color inputs use their luma)."""

    def gray(path):
        img = read_image(path)
        return rgb_to_ycbcr(img)[0] if img.ndim == 3 else img

    oracle = gray(dp.gt) if dp.gt is not None else None
    return FusionSample(i1=gray(dp.a), i2=gray(dp.b), oracle=oracle,
                        task=dp.task, seed=0)
