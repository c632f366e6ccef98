"""Tokenization, stacked dual-stream window-attention blocks, reconstruction.

An image becomes one token per pixel via a 3x3 shallow conv, padded so the
token grid tiles into non-overlapping square windows. Each block runs two
windowed attention units whose intra/inter wiring depends on the variant
(SF: self then cross, IrSF: self twice, IeSF: cross twice), optionally the
per-token interaction attention between unit 2 and the MLP, and a 2-layer
MLP, all pre-layer-norm with residuals and parameters shared between the
two sources. Fusion of the final grids lives in the oaf module; this one
turns the fused grid back into an image through a 3x3 conv and a sigmoid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .attention import PixelAttnParams, TokenPair, ipa_forward, pixel_attn_init
from .autograd import (
    ContractError,
    DomainError,
    ShapeError,
    Tensor,
    crop_plan,
    gather_rows,
    pad_plan,
    unfold2d,
)
from .oaf import (OafParams, oaf_fuse, oaf_init, predict_weights,
                  symmetrize_weight_head)

VARIANTS = ("SF", "IrSF", "IeSF")
FUSE_MODES = ("oaf", "add")


@dataclass
class TokenGrid:
    """An (N, D) token grid with the spatial metadata to invert tokenization."""

    tokens: Tensor
    h_t: int
    w_t: int
    window: int
    orig_h: int | None = None
    orig_w: int | None = None

    def __post_init__(self):
        if self.tokens.ndim != 2:
            raise ShapeError(f"TokenGrid: tokens must be (N, D), got {self.tokens.shape}")
        if self.tokens.shape[0] != self.h_t * self.w_t:
            raise ShapeError(f"TokenGrid: {self.tokens.shape[0]} tokens for a "
                             f"{self.h_t}x{self.w_t} grid")
        if self.h_t % self.window or self.w_t % self.window:
            raise ShapeError(f"TokenGrid: {self.h_t}x{self.w_t} not divisible by "
                             f"window {self.window}")


@dataclass
class BackboneConfig:
    l_blocks: int = 2
    d: int = 16
    window: int = 8
    variant: str = "IeSF"
    use_ipa: bool = True
    mlp_ratio: float = 2.0
    c_in: int = 1
    c_out: int = 1

    def __post_init__(self):
        if self.l_blocks < 1:
            raise DomainError(f"BackboneConfig: need at least 1 block, got {self.l_blocks}")
        if self.d < 2 or self.d % 2:
            raise DomainError(f"BackboneConfig: embedding dim must be even and >= 2, "
                              f"got {self.d}")
        if self.window < 2:
            raise DomainError(f"BackboneConfig: window must be >= 2, got {self.window}")
        if self.variant not in VARIANTS:
            raise DomainError(f"BackboneConfig: variant {self.variant!r} not in {VARIANTS}")
        if self.mlp_ratio <= 0:
            raise DomainError("BackboneConfig: mlp_ratio must be positive")

    @property
    def mlp_hidden(self) -> int:
        return max(1, int(round(self.mlp_ratio * self.d)))


@dataclass
class WindowAttnParams:
    W_Q: Tensor
    W_K: Tensor
    W_V: Tensor
    W_O: Tensor

    def named(self, prefix: str) -> list[tuple[str, Tensor]]:
        return [(f"{prefix}.W_Q", self.W_Q), (f"{prefix}.W_K", self.W_K),
                (f"{prefix}.W_V", self.W_V), (f"{prefix}.W_O", self.W_O)]


@dataclass
class BlockParams:
    ln1_g: Tensor
    ln1_b: Tensor
    attn1: WindowAttnParams
    ln2_g: Tensor
    ln2_b: Tensor
    attn2: WindowAttnParams
    ln_i_g: Tensor
    ln_i_b: Tensor
    ipa: PixelAttnParams
    ln3_g: Tensor
    ln3_b: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor

    def named(self, prefix: str) -> list[tuple[str, Tensor]]:
        out = [(f"{prefix}.ln1.g", self.ln1_g), (f"{prefix}.ln1.b", self.ln1_b)]
        out.extend(self.attn1.named(f"{prefix}.attn1"))
        out.extend([(f"{prefix}.ln2.g", self.ln2_g), (f"{prefix}.ln2.b", self.ln2_b)])
        out.extend(self.attn2.named(f"{prefix}.attn2"))
        out.extend([(f"{prefix}.ln_ipa.g", self.ln_i_g), (f"{prefix}.ln_ipa.b", self.ln_i_b)])
        out.extend(self.ipa.named(f"{prefix}.ipa"))
        out.extend([(f"{prefix}.ln3.g", self.ln3_g), (f"{prefix}.ln3.b", self.ln3_b),
                    (f"{prefix}.mlp.W1", self.mlp_w1), (f"{prefix}.mlp.b1", self.mlp_b1),
                    (f"{prefix}.mlp.W2", self.mlp_w2), (f"{prefix}.mlp.b2", self.mlp_b2)])
        return out


@dataclass
class ModelParams:
    shallow_w: Tensor
    shallow_b: Tensor
    blocks: list[BlockParams]
    final_g: Tensor
    final_b: Tensor
    oaf: OafParams
    recon_w: Tensor
    recon_b: Tensor

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [("shallow.w", self.shallow_w), ("shallow.b", self.shallow_b)]
        for i, bp in enumerate(self.blocks):
            out.extend(bp.named(f"block{i}"))
        out.extend([("final_ln.g", self.final_g), ("final_ln.b", self.final_b)])
        out.extend(self.oaf.named("oaf"))
        out.extend([("recon.w", self.recon_w), ("recon.b", self.recon_b)])
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]


def param_count(p: ModelParams) -> int:
    return sum(t.size for t in p.parameters())


def cross_unit_count(variant: str) -> int:
    """Inter-domain attention units per block, before the optional IPA pass."""
    if variant not in VARIANTS:
        raise DomainError(f"cross_unit_count: unknown variant {variant!r}")
    return {"SF": 1, "IrSF": 0, "IeSF": 2}[variant]


def init_model(rng: np.random.Generator, cfg: BackboneConfig,
               proj_scale: float | None = None, calm_start: bool = True) -> ModelParams:
    d = cfg.d

    def mat(fan_in, fan_out, scale=None):
        s = fan_in ** -0.5 if scale is None else scale
        return Tensor(rng.normal(0.0, s, (fan_in, fan_out)), requires_grad=True)

    def vec(n, value=0.0):
        return Tensor(np.full(n, value), requires_grad=True)

    def attn():
        return WindowAttnParams(W_Q=mat(d, d, proj_scale), W_K=mat(d, d, proj_scale),
                                W_V=mat(d, d, proj_scale), W_O=mat(d, d, proj_scale))

    blocks = []
    for _ in range(cfg.l_blocks):
        blocks.append(BlockParams(
            ln1_g=vec(d, 1.0), ln1_b=vec(d), attn1=attn(),
            ln2_g=vec(d, 1.0), ln2_b=vec(d), attn2=attn(),
            ln_i_g=vec(d, 1.0), ln_i_b=vec(d),
            ipa=pixel_attn_init(rng, d, proj_scale=proj_scale),
            ln3_g=vec(d, 1.0), ln3_b=vec(d),
            mlp_w1=mat(d, cfg.mlp_hidden, proj_scale), mlp_b1=vec(cfg.mlp_hidden),
            mlp_w2=mat(cfg.mlp_hidden, d, proj_scale), mlp_b2=vec(d),
        ))
    return ModelParams(
        shallow_w=mat(9 * cfg.c_in, d, proj_scale),
        shallow_b=vec(d),
        blocks=blocks,
        final_g=vec(d, 1.0),
        final_b=vec(d),
        oaf=oaf_init(rng, d, scale=proj_scale, calm_start=calm_start),
        recon_w=mat(9 * d, cfg.c_out, proj_scale),
        recon_b=vec(cfg.c_out),
    )


def make_swap_symmetric(p: ModelParams) -> None:
    """Make the one joint computation (the fusion weight head) swap-symmetric.

    Everything else in the model is already a shared-parameter function run
    once per source, so after this call the fused output is bitwise
    invariant to exchanging the two input images.
    """
    symmetrize_weight_head(p.oaf)


def _rows(v: Tensor, n: int) -> Tensor:
    return v.reshape(1, v.shape[0]).expand(n, v.shape[0])


def layer_norm(x: Tensor, g: Tensor, b: Tensor, eps: float = 1e-5) -> Tensor:
    n, d = x.shape
    mu = x.mean(axis=1).reshape(n, 1).expand(n, d)
    xc = x - mu
    var = (xc * xc).mean(axis=1).reshape(n, 1)
    sigma = (var + eps).sqrt().expand(n, d)
    return (xc / sigma) * _rows(g, n) + _rows(b, n)


def _partition(t: Tensor, grid: TokenGrid) -> Tensor:
    w = grid.window
    hw, ww = grid.h_t // w, grid.w_t // w
    d = t.shape[1]
    t = t.reshape(hw, w, ww, w, d).transpose(0, 2, 1, 3, 4)
    return t.reshape(hw * ww, w * w, d)


def _unpartition(t: Tensor, grid: TokenGrid) -> Tensor:
    w = grid.window
    hw, ww = grid.h_t // w, grid.w_t // w
    d = t.shape[2]
    t = t.reshape(hw, ww, w, w, d).transpose(0, 2, 1, 3, 4)
    return t.reshape(grid.h_t * grid.w_t, d)


def window_msa(q_in: Tensor, kv_in: Tensor, ap: WindowAttnParams,
               grid: TokenGrid, n_heads: int = 2) -> Tensor:
    """Full attention inside each non-overlapping window, multi-head,
    followed by an output projection. ``q_in`` and ``kv_in`` are already
    normalized token grids; they differ only for inter-domain units.
    """
    n, d = q_in.shape
    if d % n_heads:
        raise ShapeError(f"window_msa: dim {d} not divisible by {n_heads} heads")
    dh = d // n_heads
    q = _partition(q_in @ ap.W_Q, grid)
    k = _partition(kv_in @ ap.W_K, grid)
    v = _partition(kv_in @ ap.W_V, grid)
    nw, t = q.shape[0], q.shape[1]

    def heads(x):
        return x.reshape(nw, t, n_heads, dh).transpose(0, 2, 1, 3)

    qh, kh, vh = heads(q), heads(k), heads(v)
    scores = (qh @ kh.transpose(0, 1, 3, 2)) * (dh ** -0.5)
    out = scores.softmax(axis=3) @ vh
    out = out.transpose(0, 2, 1, 3).reshape(nw, t, d)
    return _unpartition(out, grid) @ ap.W_O


def _check_aligned(x1: TokenGrid, x2: TokenGrid, op: str) -> None:
    if (x1.tokens.shape != x2.tokens.shape or x1.h_t != x2.h_t
            or x1.w_t != x2.w_t or x1.window != x2.window):
        raise ShapeError(f"{op}: token grids are not aligned")


def isf_block_forward(x1: TokenGrid, x2: TokenGrid, bp: BlockParams,
                      cfg: BackboneConfig,
                      trace: list | None = None) -> tuple[TokenGrid, TokenGrid]:
    """One dual-stream block: unit1, unit2, optional per-token interaction
    attention, then the MLP; every sublayer is pre-norm with a residual and
    runs both streams through the same parameters.
    """
    _check_aligned(x1, x2, "isf_block_forward")
    cross1 = cfg.variant == "IeSF"
    cross2 = cfg.variant in ("SF", "IeSF")
    if trace is not None:
        trace.append(("unit1", "cross" if cross1 else "self"))
        trace.append(("unit2", "cross" if cross2 else "self"))
        if cfg.use_ipa:
            trace.append(("ipa", "cross"))

    def unit(xs: Tensor, xo: Tensor, g, b, ap, cross: bool) -> Tensor:
        qn = layer_norm(xs, g, b)
        kvn = layer_norm(xo, g, b) if cross else qn
        return xs + window_msa(qn, kvn, ap, x1)

    a1, a2 = x1.tokens, x2.tokens
    b1 = unit(a1, a2, bp.ln1_g, bp.ln1_b, bp.attn1, cross1)
    b2 = unit(a2, a1, bp.ln1_g, bp.ln1_b, bp.attn1, cross1)
    c1 = unit(b1, b2, bp.ln2_g, bp.ln2_b, bp.attn2, cross2)
    c2 = unit(b2, b1, bp.ln2_g, bp.ln2_b, bp.attn2, cross2)
    if cfg.use_ipa:
        n1 = layer_norm(c1, bp.ln_i_g, bp.ln_i_b)
        n2 = layer_norm(c2, bp.ln_i_g, bp.ln_i_b)
        d1, d2 = ipa_forward(bp.ipa, TokenPair(n1, n2))
        c1 = c1 + (d1 - n1)
        c2 = c2 + (d2 - n2)

    def mlp(xin: Tensor) -> Tensor:
        n = xin.shape[0]
        h = layer_norm(xin, bp.ln3_g, bp.ln3_b)
        h = (h @ bp.mlp_w1 + _rows(bp.mlp_b1, n)).gelu()
        return xin + (h @ bp.mlp_w2 + _rows(bp.mlp_b2, n))

    out1 = TokenGrid(mlp(c1), x1.h_t, x1.w_t, x1.window, x1.orig_h, x1.orig_w)
    out2 = TokenGrid(mlp(c2), x2.h_t, x2.w_t, x2.window, x2.orig_h, x2.orig_w)
    return out1, out2


def tokenize(img: Tensor, p: ModelParams, cfg: BackboneConfig) -> TokenGrid:
    """3x3 shallow conv to D channels, reflect-pad the grid up to window
    multiples, one token per pixel."""
    if img.ndim != 3:
        raise ShapeError(f"tokenize: image must be (H, W, C), got {img.shape}")
    h, w, c = img.shape
    if c != cfg.c_in:
        raise ShapeError(f"tokenize: image has {c} channels, config expects {cfg.c_in}")
    if h < cfg.window or w < cfg.window:
        raise ShapeError(f"tokenize: image {h}x{w} smaller than window {cfg.window}")
    if img.data.min() < 0.0 or img.data.max() > 1.0:
        raise DomainError("tokenize: image values must lie in [0, 1]")
    n = h * w
    patches = unfold2d(img.reshape(n, c), h, w, 3).reshape(n, 9 * c)
    tokens = patches @ p.shallow_w + _rows(p.shallow_b, n)
    h_p = math.ceil(h / cfg.window) * cfg.window
    w_p = math.ceil(w / cfg.window) * cfg.window
    if (h_p, w_p) != (h, w):
        tokens = gather_rows(tokens, pad_plan(h, w, h_p, w_p))
    return TokenGrid(tokens, h_p, w_p, cfg.window, h, w)


def reconstruct(grid: TokenGrid, p: ModelParams, cfg: BackboneConfig) -> Tensor:
    """Crop the recorded padding, 3x3 conv to the output channels, sigmoid."""
    if grid.orig_h is None or grid.orig_w is None:
        raise ContractError("reconstruct: grid carries no padding record")
    tokens = grid.tokens
    h, w = grid.orig_h, grid.orig_w
    if (grid.h_t, grid.w_t) != (h, w):
        tokens = gather_rows(tokens, crop_plan(grid.h_t, grid.w_t, h, w))
    n = h * w
    d = tokens.shape[1]
    patches = unfold2d(tokens, h, w, 3).reshape(n, 9 * d)
    out = (patches @ p.recon_w + _rows(p.recon_b, n)).sigmoid()
    return out.reshape(h, w, cfg.c_out)


def encode_pair(i1: Tensor, i2: Tensor, p: ModelParams, cfg: BackboneConfig,
                trace: list | None = None) -> tuple[TokenGrid, TokenGrid]:
    """Tokenize both sources and run them through the block stack, ending
    with a shared norm so the fusion stage sees well-scaled tokens however
    much the residual stream drifted."""
    if i1.shape != i2.shape:
        raise ShapeError(f"encode_pair: images {i1.shape} and {i2.shape} differ")
    t1 = tokenize(i1, p, cfg)
    t2 = tokenize(i2, p, cfg)
    for bp in p.blocks:
        t1, t2 = isf_block_forward(t1, t2, bp, cfg, trace)
    t1 = TokenGrid(layer_norm(t1.tokens, p.final_g, p.final_b),
                   t1.h_t, t1.w_t, t1.window, t1.orig_h, t1.orig_w)
    t2 = TokenGrid(layer_norm(t2.tokens, p.final_g, p.final_b),
                   t2.h_t, t2.w_t, t2.window, t2.orig_h, t2.orig_w)
    return t1, t2


def fusion_weights(i1: Tensor, i2: Tensor, p: ModelParams,
                   cfg: BackboneConfig) -> np.ndarray:
    """The (2, 3) source-by-branch mixing weights the fusion stage would use
    for this input pair."""
    t1, t2 = encode_pair(i1, i2, p, cfg)
    return predict_weights(t1, t2, p.oaf).numpy()


def model_forward(i1: Tensor, i2: Tensor, p: ModelParams, cfg: BackboneConfig,
                  trace: list | None = None,
                  fuse_mode: str = "oaf",
                  oaf_disable: frozenset[str] = frozenset(),
                  dynamic_weights: bool = True) -> Tensor:
    """Tokenize both sources, run the block stack, fuse, reconstruct."""
    if fuse_mode not in FUSE_MODES:
        raise DomainError(f"model_forward: fuse_mode {fuse_mode!r} not in {FUSE_MODES}")
    t1, t2 = encode_pair(i1, i2, p, cfg, trace)
    if fuse_mode == "add":
        fused = TokenGrid((t1.tokens + t2.tokens) * 0.5, t1.h_t, t1.w_t,
                          t1.window, t1.orig_h, t1.orig_w)
    else:
        fused = oaf_fuse(t1, t2, p.oaf, disable=oaf_disable,
                         dynamic_weights=dynamic_weights)
    return reconstruct(fused, p, cfg)
