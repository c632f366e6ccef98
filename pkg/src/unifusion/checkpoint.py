"""Binary checkpoint container for model, optimizer, and weighting state.

Layout (all integers little-endian):

    magic  b"UFCP", version u32
    config u32 length + canonical config text (UTF-8)
    iteration u64
    tensors u32 count, then per tensor:
        u16 name length + name, u8 ndim, ndim x u32 dims,
        row-major float64 data
    weighting state: u32 n_tasks, xi/m/v (n_tasks f64 each),
        beta f64, gamma f64, t u64, u8 prev flag + optional prev losses
    optimizer state: alpha/beta1/beta2/eps f64, t u64,
        u32 buffer count, then per parameter m data and v data
        (shapes mirror the tensor directory)

Serialization is canonical, so save -> load -> save reproduces the file
byte for byte.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .autograd import ContractError
from .backbone import ModelParams, init_model
from .config import RunConfig, config_from_text, config_to_text
from .data import FormatError
from .optim import AdamState, FamoState

MAGIC = b"UFCP"
VERSION = 1


@dataclass
class Checkpoint:
    cfg: RunConfig
    iteration: int
    params: ModelParams
    famo: FamoState
    adam: AdamState


def _f64_bytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    """Serialize a checkpoint to its canonical byte string."""
    named = ckpt.params.named_parameters()
    out = [MAGIC, struct.pack("<I", VERSION)]

    blob = config_to_text(ckpt.cfg).encode("utf-8")
    out.append(struct.pack("<I", len(blob)))
    out.append(blob)
    out.append(struct.pack("<Q", ckpt.iteration))

    out.append(struct.pack("<I", len(named)))
    for name, t in named:
        nb = name.encode("utf-8")
        out.append(struct.pack("<H", len(nb)))
        out.append(nb)
        out.append(struct.pack("<B", t.ndim))
        out.append(struct.pack(f"<{t.ndim}I", *t.shape))
        out.append(_f64_bytes(t.data))

    fs = ckpt.famo
    n = fs.xi.shape[0]
    out.append(struct.pack("<I", n))
    out.append(_f64_bytes(fs.xi))
    out.append(_f64_bytes(fs.m))
    out.append(_f64_bytes(fs.v))
    out.append(struct.pack("<ddQ", fs.beta, fs.gamma, fs.t))
    if fs.prev_losses is None:
        out.append(struct.pack("<B", 0))
    else:
        out.append(struct.pack("<B", 1))
        out.append(_f64_bytes(fs.prev_losses))

    ad = ckpt.adam
    if len(ad.m) != len(named):
        raise ContractError(f"checkpoint: optimizer tracks {len(ad.m)} buffers "
                            f"for {len(named)} parameters")
    out.append(struct.pack("<ddddQ", ad.alpha, ad.beta1, ad.beta2, ad.eps, ad.t))
    out.append(struct.pack("<I", len(ad.m)))
    for m, v in zip(ad.m, ad.v):
        out.append(_f64_bytes(m))
        out.append(_f64_bytes(v))
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"checkpoint: truncated at byte {self.pos} "
                              f"reading {what}")
        piece = self.buf[self.pos:self.pos + n]
        self.pos += n
        return piece

    def unpack(self, fmt: str, what: str):
        vals = struct.unpack(fmt, self.take(struct.calcsize(fmt), what))
        return vals[0] if len(vals) == 1 else vals

    def f64s(self, count: int, shape, what: str) -> np.ndarray:
        raw = self.take(8 * count, what)
        return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)


def checkpoint_from_bytes(buf: bytes) -> Checkpoint:
    """Parse checkpoint bytes, validating structure against the embedded
    config and reporting the first inconsistency."""
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"checkpoint: bad magic {magic!r}, expected {MAGIC!r}")
    version = r.unpack("<I", "version")
    if version != VERSION:
        raise FormatError(f"checkpoint: unsupported version {version}, "
                          f"this reader handles version {VERSION}")

    blob_len = r.unpack("<I", "config length")
    cfg = config_from_text(r.take(blob_len, "config").decode("utf-8"))
    iteration = r.unpack("<Q", "iteration")

    params = init_model(np.random.default_rng(0), cfg.backbone)
    expected = params.named_parameters()
    count = r.unpack("<I", "tensor count")
    if count != len(expected):
        raise ContractError(f"checkpoint: {count} tensors stored, config "
                            f"implies {len(expected)}")
    for i, (exp_name, t) in enumerate(expected):
        name_len = r.unpack("<H", f"tensor {i} name length")
        name = r.take(name_len, f"tensor {i} name").decode("utf-8")
        ndim = r.unpack("<B", f"tensor {name} ndim")
        shape = r.unpack(f"<{ndim}I", f"tensor {name} shape")
        shape = (shape,) if ndim == 1 else tuple(shape)
        if name != exp_name or shape != t.shape:
            raise ContractError(
                f"checkpoint: tensor {i} is {name} with shape {shape}, config "
                f"implies {exp_name} with shape {t.shape}")
        t.data[...] = r.f64s(t.size, shape, f"tensor {name} data")

    n_tasks = r.unpack("<I", "task count")
    famo = FamoState(
        xi=r.f64s(n_tasks, (n_tasks,), "weighting logits"),
        m=r.f64s(n_tasks, (n_tasks,), "weighting first moment"),
        v=r.f64s(n_tasks, (n_tasks,), "weighting second moment"),
    )
    famo.beta, famo.gamma, famo.t = r.unpack("<ddQ", "weighting scalars")
    if r.unpack("<B", "previous-loss flag"):
        famo.prev_losses = r.f64s(n_tasks, (n_tasks,), "previous losses")

    alpha, beta1, beta2, eps, t_step = r.unpack("<ddddQ", "optimizer scalars")
    n_buf = r.unpack("<I", "optimizer buffer count")
    if n_buf != len(expected):
        raise ContractError(f"checkpoint: optimizer stores {n_buf} buffers, "
                            f"config implies {len(expected)}")
    ms, vs = [], []
    for name, t in expected:
        ms.append(r.f64s(t.size, t.shape, f"optimizer m for {name}"))
        vs.append(r.f64s(t.size, t.shape, f"optimizer v for {name}"))
    adam = AdamState(alpha=alpha, m=ms, v=vs, beta1=beta1, beta2=beta2,
                     eps=eps, t=t_step)

    if r.pos != len(buf):
        raise FormatError(f"checkpoint: {len(buf) - r.pos} trailing bytes "
                          f"after byte {r.pos}")
    return Checkpoint(cfg=cfg, iteration=iteration, params=params,
                      famo=famo, adam=adam)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read())
