"""Operation-based adaptive fusion.

Two aligned feature grids are pushed through three parallel branches per
source: a spatially-variant high-pass convolution whose per-pixel kernels
come from a hypernetwork, an additive branch, and a multiplicative branch.
A small head pools both grids, emits six logits, and a joint softmax over
all (source, branch) pairs weights the branch outputs into one fused grid.

The weight head is evaluated as half-matrix sums so that a
swap-symmetric parameterization (see ``symmetrize_weight_head``) makes the
whole fusion bitwise invariant to exchanging the two sources.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .autograd import ShapeError, Tensor, concat, narrow, unfold2d


@dataclass
class Mlp:
    """Two affine layers with a GELU between them."""

    W1: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor

    def forward(self, x: Tensor) -> Tensor:
        n = x.shape[0]
        h = x @ self.W1 + _rows(self.b1, n)
        return h.gelu() @ self.W2 + _rows(self.b2, n)

    def named(self, prefix: str) -> list[tuple[str, Tensor]]:
        return [(f"{prefix}.W1", self.W1), (f"{prefix}.b1", self.b1),
                (f"{prefix}.W2", self.W2), (f"{prefix}.b2", self.b2)]


@dataclass
class OafParams:
    """Per-branch hypernetworks, the pooled weight head, and the kernel side."""

    hyper_h: Mlp  # D -> K*K per-pixel kernels
    hyper_a: Mlp  # D -> D additive operand
    hyper_m: Mlp  # D -> D multiplicative pre-activation
    weight_head: Mlp  # 2D -> 6 logits
    k: int

    def __post_init__(self):
        if self.k % 2 != 1:
            raise ShapeError(f"OafParams: kernel side must be odd, got {self.k}")
        if self.weight_head.W2.shape[1] != 6:
            raise ShapeError(f"OafParams: weight head must emit 6 logits, "
                             f"got {self.weight_head.W2.shape[1]}")
        if self.weight_head.W1.shape[1] % 2:
            raise ShapeError("OafParams: weight-head hidden width must be even")

    def named(self, prefix: str) -> list[tuple[str, Tensor]]:
        out = []
        for sub, name in ((self.hyper_h, "hyper_h"), (self.hyper_a, "hyper_a"),
                          (self.hyper_m, "hyper_m"), (self.weight_head, "weight_head")):
            out.extend(sub.named(f"{prefix}.{name}"))
        return out


BRANCHES = ("HPF", "ADD", "MUL")


def _rows(v: Tensor, n: int) -> Tensor:
    return v.reshape(1, v.shape[0]).expand(n, v.shape[0])


def _mlp_init(rng: np.random.Generator, d_in: int, d_hidden: int, d_out: int,
              scale: float | None = None, zero_last: bool = False) -> Mlp:
    s1 = d_in ** -0.5 if scale is None else scale
    s2 = d_hidden ** -0.5 if scale is None else scale
    w2 = np.zeros((d_hidden, d_out)) if zero_last else rng.normal(0.0, s2, (d_hidden, d_out))
    return Mlp(W1=Tensor(rng.normal(0.0, s1, (d_in, d_hidden)), requires_grad=True),
               b1=Tensor(np.zeros(d_hidden), requires_grad=True),
               W2=Tensor(w2, requires_grad=True),
               b2=Tensor(np.zeros(d_out), requires_grad=True))


def oaf_init(rng: np.random.Generator, d: int, k: int = 3,
             hidden: int | None = None, scale: float | None = None,
             calm_start: bool = True) -> OafParams:
    """Build fusion parameters.

    With ``calm_start`` the hypernetworks' output layers start at zero, so
    the branches begin as (0, identity, identity) and training moves away
    from a sane fusion rather than from noise.
    """
    hidden = d if hidden is None else hidden
    if hidden % 2 != 0:
        raise ShapeError(f"oaf_init: weight-head hidden width must be even, got {hidden}")
    return OafParams(
        hyper_h=_mlp_init(rng, d, hidden, k * k, scale, zero_last=calm_start),
        hyper_a=_mlp_init(rng, d, hidden, d, scale, zero_last=calm_start),
        hyper_m=_mlp_init(rng, d, hidden, d, scale, zero_last=calm_start),
        weight_head=_mlp_init(rng, 2 * d, hidden, 6, scale),
        k=k,
    )


def predict_operands(x, p: OafParams) -> tuple[Tensor, Tensor, Tensor]:
    """Run the three hypernetworks token-wise over a grid.

    Returns (P_h, P_a, P_m): per-pixel zero-mean K*K kernels, an additive
    operand, and a multiplier built as 1 + tanh so identity sits at zero.
    """
    tokens = x.tokens
    n = tokens.shape[0]
    kk = p.k * p.k
    raw = p.hyper_h.forward(tokens)  # (N, K*K)
    p_h = raw - raw.mean(axis=1).reshape(n, 1).expand(n, kk)
    p_a = p.hyper_a.forward(tokens)
    p_m = p.hyper_m.forward(tokens).tanh() + 1.0
    return p_h, p_a, p_m


def branch_apply(kind: str, x, operand: Tensor):
    """Apply one fusion branch to a grid and return a grid of the same shape."""
    tokens = x.tokens
    n, d = tokens.shape
    if kind == "HPF":
        kk = operand.shape[1] if operand.ndim == 2 else -1
        k = int(round(kk ** 0.5)) if kk > 0 else -1
        if operand.ndim != 2 or operand.shape[0] != n or k * k != kk:
            raise ShapeError(f"branch_apply: HPF operand must be (N, K*K), got {operand.shape}")
        patches = unfold2d(tokens, x.h_t, x.w_t, k)          # (N, K*K, D)
        out = (operand.reshape(n, 1, kk) @ patches).reshape(n, d)
    elif kind == "ADD":
        if operand.shape != tokens.shape:
            raise ShapeError(f"branch_apply: ADD operand shape {operand.shape} "
                             f"!= grid {tokens.shape}")
        out = tokens + operand
    elif kind == "MUL":
        if operand.shape != tokens.shape:
            raise ShapeError(f"branch_apply: MUL operand shape {operand.shape} "
                             f"!= grid {tokens.shape}")
        out = tokens * operand
    else:
        raise ShapeError(f"branch_apply: unknown branch {kind!r}")
    return dataclasses.replace(x, tokens=out)


def _head_logits(p: OafParams, pool1: Tensor, pool2: Tensor) -> Tensor:
    # Both affine layers are evaluated quadrant by quadrant. Mirrored terms
    # then go through dgemms of identical shape on identical values, so a
    # symmetrized head makes source swap a bitwise mirror of the logits
    # (a single wide matmul rounds differently per column position).
    head = p.weight_head
    d = pool1.shape[1]
    hid = head.W1.shape[1]
    m = hid // 2

    def quad(t, r0, rn, c0, cn):
        return narrow(narrow(t, 0, r0, rn), 1, c0, cn)

    b1 = head.b1.reshape(1, hid)
    h_a = (pool1 @ quad(head.W1, 0, d, 0, m) + pool2 @ quad(head.W1, d, d, 0, m)
           + narrow(b1, 1, 0, m)).gelu()
    h_b = (pool1 @ quad(head.W1, 0, d, m, hid - m) + pool2 @ quad(head.W1, d, d, m, hid - m)
           + narrow(b1, 1, m, hid - m)).gelu()
    b2 = head.b2.reshape(1, 6)
    first = h_a @ quad(head.W2, 0, m, 0, 3) + h_b @ quad(head.W2, m, hid - m, 0, 3) \
        + narrow(b2, 1, 0, 3)
    last = h_a @ quad(head.W2, 0, m, 3, 3) + h_b @ quad(head.W2, m, hid - m, 3, 3) \
        + narrow(b2, 1, 3, 3)
    return concat([first, last], axis=1)


def _joint_softmax(logits: Tensor) -> Tensor:
    # Softmax over all six logits arranged (2 sources, 3 branches). The
    # denominator pairs the two sources per branch before summing across
    # branches, so a row swap of the logits yields the exact row swap of
    # the weights (IEEE addition commutes; it does not associate).
    w = logits.reshape(2, 3)
    shift = float(w.data.max())
    e = (w - shift).exp()
    total = e.sum(axis=0).sum()
    return e / total.reshape(1, 1).expand(2, 3)


def predict_weights(x1, x2, p: OafParams) -> Tensor:
    """Pool both grids, emit six logits, softmax jointly into a 2x3 table.

    Row 0 weights source 1's branches (HPF, ADD, MUL), row 1 source 2's.
    """
    if x1.tokens.shape != x2.tokens.shape:
        raise ShapeError(f"predict_weights: grids {x1.tokens.shape} and "
                         f"{x2.tokens.shape} differ")
    d = x1.tokens.shape[1]
    pool1 = x1.tokens.mean(axis=0).reshape(1, d)
    pool2 = x2.tokens.mean(axis=0).reshape(1, d)
    logits = _head_logits(p, pool1, pool2)
    return _joint_softmax(logits)


def oaf_fuse(x1, x2, p: OafParams, disable: frozenset[str] = frozenset(),
             dynamic_weights: bool = True):
    """Fuse two grids: X_f = sum over branches of W[0]*branch(x1) + W[1]*branch(x2).

    ``disable`` drops branches by name, renormalizing the remaining weights;
    with ``dynamic_weights`` off the active weights are uniform constants.
    Per-branch terms are accumulated pairwise so the sum is bitwise
    invariant under source swap whenever the weight table is.
    """
    if x1.tokens.shape != x2.tokens.shape:
        raise ShapeError(f"oaf_fuse: grids {x1.tokens.shape} and {x2.tokens.shape} differ")
    unknown = disable - set(BRANCHES)
    if unknown:
        raise ShapeError(f"oaf_fuse: unknown branches {sorted(unknown)}")
    active = [b for b in BRANCHES if b not in disable]
    if not active:
        raise ShapeError("oaf_fuse: all branches disabled")
    n, d = x1.tokens.shape

    if dynamic_weights:
        w = predict_weights(x1, x2, p)
        if disable:
            mask = np.array([[1.0 if b not in disable else 0.0 for b in BRANCHES]] * 2)
            w = w * Tensor(mask)
            total = w.sum(axis=0).sum().reshape(1, 1).expand(2, 3)
            w = w / total
    else:
        mask = np.array([[1.0 if b not in disable else 0.0 for b in BRANCHES]] * 2)
        w = Tensor(mask / mask.sum())

    ops1 = predict_operands(x1, p)
    ops2 = predict_operands(x2, p)
    by_branch = dict(zip(BRANCHES, range(3)))

    fused = None
    for b in active:
        i = by_branch[b]
        y1 = branch_apply(b, x1, ops1[i]).tokens
        y2 = branch_apply(b, x2, ops2[i]).tokens
        w1 = narrow(w.reshape(1, 6), 1, i, 1).reshape(1, 1).expand(n, d)
        w2 = narrow(w.reshape(1, 6), 1, 3 + i, 1).reshape(1, 1).expand(n, d)
        term = y1 * w1 + y2 * w2
        fused = term if fused is None else fused + term
    return dataclasses.replace(x1, tokens=fused)


def symmetrize_weight_head(p: OafParams) -> None:
    """Rewrite the weight head in place so source swap permutes its logits.

    The first layer becomes [[A, B], [B, A]] over (source x hidden-half)
    blocks with mirrored bias halves, and the second [[U, V], [V, U]] over
    (hidden-half x logit-triple) blocks. Combined with the half-matrix
    evaluation order this makes predict_weights(x2, x1) the exact row swap
    of predict_weights(x1, x2), bit for bit.
    """
    head = p.weight_head
    two_d, hid = head.W1.shape
    d = two_d // 2
    if hid % 2 != 0:
        raise ShapeError(f"symmetrize_weight_head: hidden width {hid} must be even")
    m = hid // 2
    w1 = head.W1.data
    w1[:d, m:] = w1[d:, :m]
    w1[d:, m:] = w1[:d, :m]
    head.b1.data[m:] = head.b1.data[:m]
    w2 = head.W2.data
    w2[m:, :3] = w2[:m, 3:]
    w2[m:, 3:] = w2[:m, :3]
    head.b2.data[3:] = head.b2.data[:3]
