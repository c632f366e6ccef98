"""Per-token attention over aligned source pairs.

Every token of source 1 attends over a two-element key/value set built from
its own projection and the matching token of source 2, then adds a residual.
Three constructions are provided: a plain masked-softmax attention step, the
noise-plus-relation variant (pixel attention), and the interaction-enhanced
variant that moves the relation score into the keys and keeps values clean.
A threshold-based token exchange is included as a comparison baseline.

All functions are vectorized over the token axis: grids are (N, D) tensors
and the two-entry key/value sets are (N, 2, D). Both sources share the same
projection weights, so running a stream is one function applied twice.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autograd import ShapeError, Tensor, concat, narrow, where


@dataclass
class RelationDiscriminator:
    """Two affine layers 2D -> D_h -> 1 with a sigmoid output."""

    W1: Tensor  # (2D, D_h)
    b1: Tensor  # (D_h,)
    W2: Tensor  # (D_h, 1)
    b2: Tensor  # (1,)

    def named(self, prefix: str) -> list[tuple[str, Tensor]]:
        return [(f"{prefix}.W1", self.W1), (f"{prefix}.b1", self.b1),
                (f"{prefix}.W2", self.W2), (f"{prefix}.b2", self.b2)]


@dataclass
class PixelAttnParams:
    """Projections, per-layer noise vectors, and the relation discriminator."""

    W_Q: Tensor  # (D, D)
    W_K: Tensor  # (D, D)
    W_V: Tensor  # (D, D)
    N_1: Tensor  # (D,)
    N_2: Tensor  # (D,)
    N_K: Tensor  # (D,)
    N_V: Tensor  # (D,)
    relation: RelationDiscriminator

    @property
    def dim(self) -> int:
        return self.W_Q.shape[0]

    def named(self, prefix: str) -> list[tuple[str, Tensor]]:
        out = [(f"{prefix}.W_Q", self.W_Q), (f"{prefix}.W_K", self.W_K),
               (f"{prefix}.W_V", self.W_V), (f"{prefix}.N_1", self.N_1),
               (f"{prefix}.N_2", self.N_2), (f"{prefix}.N_K", self.N_K),
               (f"{prefix}.N_V", self.N_V)]
        out.extend(self.relation.named(f"{prefix}.relation"))
        return out


@dataclass
class TokenPair:
    """Aligned token grids of the two sources, shape (N, D) each."""

    x1: Tensor
    x2: Tensor

    def __post_init__(self):
        if self.x1.shape != self.x2.shape:
            raise ShapeError(f"TokenPair: shapes {self.x1.shape} and {self.x2.shape} differ")
        if self.x1.ndim != 2:
            raise ShapeError(f"TokenPair: grids must be (N, D), got {self.x1.shape}")


def relation_init(rng: np.random.Generator, d: int, d_hidden: int | None = None,
                  scale: float | None = None) -> RelationDiscriminator:
    d_hidden = d if d_hidden is None else d_hidden
    s1 = (2 * d) ** -0.5 if scale is None else scale
    s2 = d_hidden ** -0.5 if scale is None else scale
    return RelationDiscriminator(
        W1=Tensor(rng.normal(0.0, s1, (2 * d, d_hidden)), requires_grad=True),
        b1=Tensor(np.zeros(d_hidden), requires_grad=True),
        W2=Tensor(rng.normal(0.0, s2, (d_hidden, 1)), requires_grad=True),
        b2=Tensor(np.zeros(1), requires_grad=True),
    )


def pixel_attn_init(rng: np.random.Generator, d: int, d_hidden: int | None = None,
                    proj_scale: float | None = None,
                    noise_scale: float = 0.02) -> PixelAttnParams:
    s = d ** -0.5 if proj_scale is None else proj_scale

    def proj():
        return Tensor(rng.normal(0.0, s, (d, d)), requires_grad=True)

    def noise():
        return Tensor(rng.normal(0.0, noise_scale, d), requires_grad=True)

    return PixelAttnParams(W_Q=proj(), W_K=proj(), W_V=proj(),
                           N_1=noise(), N_2=noise(), N_K=noise(), N_V=noise(),
                           relation=relation_init(rng, d, d_hidden, proj_scale))


def _rowcast(v: Tensor, n: int) -> Tensor:
    """Broadcast a (D,) vector across n rows."""
    return v.reshape(1, v.shape[0]).expand(n, v.shape[0])


def relation_score(rel: RelationDiscriminator, a: Tensor, b: Tensor) -> Tensor:
    """Score how related token a is to token b, in (0, 1).

    The first argument is the "self" token; the MLP sees the ordered
    concatenation [a, b]. The concatenated affine layer is evaluated as two
    half-matrix products so that swapping (a, b) together with the matching
    weight-row swap is a bitwise mirror.
    """
    single = a.ndim == 1
    if single:
        a = a.reshape(1, a.shape[0])
        b = b.reshape(1, b.shape[0])
    if a.shape != b.shape:
        raise ShapeError(f"relation_score: token shapes {a.shape} and {b.shape} differ")
    d = a.shape[1]
    if rel.W1.shape[0] != 2 * d:
        raise ShapeError(f"relation_score: discriminator expects tokens of extent "
                         f"{rel.W1.shape[0] // 2}, got {d}")
    n = a.shape[0]
    w_self = narrow(rel.W1, 0, 0, d)
    w_other = narrow(rel.W1, 0, d, d)
    h = (a @ w_self) + (b @ w_other) + _rowcast(rel.b1, n)
    s = (h.gelu() @ rel.W2) + _rowcast(rel.b2, n)
    s = s.sigmoid()
    return s.reshape(()) if single else s


def per_token_msa(q: Tensor, K: Tensor, V: Tensor,
                  return_weights: bool = False):
    """Single-head attention of one query per token over a small key set.

    Accepts a single token (q: (1, D), K/V: (M, D)) or a batch of tokens
    (q: (N, 1, D), K/V: (N, M, D)). Scores are scaled by 1/sqrt(D).
    """
    single = q.ndim == 2
    if single:
        q = q.reshape(1, *q.shape)
        K = K.reshape(1, *K.shape)
        V = V.reshape(1, *V.shape)
    if q.ndim != 3 or q.shape[1] != 1:
        raise ShapeError(f"per_token_msa: query must be (N, 1, D), got {q.shape}")
    if K.shape != V.shape or K.ndim != 3:
        raise ShapeError(f"per_token_msa: K/V must match, got {K.shape} and {V.shape}")
    if K.shape[0] != q.shape[0] or K.shape[2] != q.shape[2]:
        raise ShapeError(f"per_token_msa: query {q.shape} incompatible with keys {K.shape}")
    d = q.shape[2]
    scores = (q @ K.transpose(0, 2, 1)) * (1.0 / math.sqrt(d))  # (N, 1, M)
    attn = scores.softmax(axis=2)
    out = attn @ V  # (N, 1, D)
    if single:
        out = out.reshape(1, d)
        attn = attn.reshape(1, K.shape[1])
    return (out, attn) if return_weights else out


def _stack_two(a: Tensor, b: Tensor) -> Tensor:
    """Stack two (N, D) grids into an (N, 2, D) key/value set."""
    n, d = a.shape
    return concat([a.reshape(n, 1, d), b.reshape(n, 1, d)], axis=1)


def pixel_attention(p: PixelAttnParams, t: TokenPair) -> tuple[Tensor, Tensor]:
    """Noise-plus-relation attention: each source queries a two-entry set
    built from its own noisy key and its relation-scaled self key, with the
    other source entering through the second value row.
    """
    def stream(xs: Tensor, xo: Tensor) -> Tensor:
        n, d = xs.shape
        s = relation_score(p.relation, xs, xo)          # (N, 1)
        q = (xs @ p.W_Q).reshape(n, 1, d)
        k_noise = (_rowcast(p.N_K, n) + xs) @ p.W_K
        k_rel = (xs * s.expand(n, d)) @ p.W_K
        v_noise = (_rowcast(p.N_V, n) + xs) @ p.W_V
        v_cross = xo @ p.W_V
        out = per_token_msa(q, _stack_two(k_noise, k_rel), _stack_two(v_noise, v_cross))
        return out.reshape(n, d) + xs

    return stream(t.x1, t.x2), stream(t.x2, t.x1)


def ipa_forward(p: PixelAttnParams, t: TokenPair) -> tuple[Tensor, Tensor]:
    """Interaction-enhanced attention: the relation score shifts the two key
    rows apart ((N1 + x - x*s) and (N2 + x + x*s), both through W_K) while
    the value rows stay noise-free projections of the two sources.
    """
    def stream(xs: Tensor, xo: Tensor) -> Tensor:
        n, d = xs.shape
        s = relation_score(p.relation, xs, xo).expand(n, d)
        q = (xs @ p.W_Q).reshape(n, 1, d)
        k_self = (_rowcast(p.N_1, n) + xs - xs * s) @ p.W_K
        k_cross = (_rowcast(p.N_2, n) + xs + xs * s) @ p.W_K
        v_self = xs @ p.W_V
        v_cross = xo @ p.W_V
        out = per_token_msa(q, _stack_two(k_self, k_cross), _stack_two(v_self, v_cross))
        return out.reshape(n, d) + xs

    return stream(t.x1, t.x2), stream(t.x2, t.x1)


def token_exchange(scores1: Tensor, scores2: Tensor, x1: Tensor, x2: Tensor,
                   gamma: float = 0.02) -> tuple[Tensor, Tensor]:
    """Swap low-scoring tokens with the aligned token of the other source.

    A token is kept iff its score >= gamma. The comparison itself is not
    differentiated; gradients flow through whichever token was selected.
    """
    if gamma < 0:
        raise ShapeError(f"token_exchange: gamma must be >= 0, got {gamma}")
    if x1.shape != x2.shape or x1.ndim != 2:
        raise ShapeError(f"token_exchange: grids {x1.shape} and {x2.shape} must match")
    n, d = x1.shape

    def mask(scores: Tensor) -> np.ndarray:
        flat = scores.data.reshape(-1)
        if flat.shape[0] != n:
            raise ShapeError(f"token_exchange: {flat.shape[0]} scores for {n} tokens")
        return np.repeat((flat >= gamma)[:, None], d, axis=1)

    return where(mask(scores1), x1, x2), where(mask(scores2), x2, x1)
