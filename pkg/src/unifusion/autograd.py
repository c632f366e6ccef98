"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine is intentionally small. Storage is contiguous row-major numpy,
always float64. There is no implicit broadcasting between tensors: binary
ops require equal shapes, and shape changes go through explicit reshape /
expand / transpose / concat / narrow ops. Every differentiable primitive
records a closure that maps the output adjoint to parent contributions;
``Tensor.backward`` replays the closures in reverse topological order.
Any non-finite value produced by a forward op raises immediately rather
than propagating NaNs into a training run.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf


class ShapeError(ValueError):
    """Operand shapes violate an op's contract."""


class DomainError(ValueError):
    """An argument value is outside the op's domain."""


class ContractError(RuntimeError):
    """An API was called in a way its contract forbids."""


class NumericsError(ArithmeticError):
    """A computation produced a non-finite value."""


def _check_finite(arr: np.ndarray, ctx: str) -> None:
    # The sum is finite only if every element is, except when huge finite
    # partials overflow; the elementwise pass settles those rare suspicions.
    with np.errstate(over="ignore", invalid="ignore"):
        if np.isfinite(arr.sum()):
            return
    bad = ~np.isfinite(arr.ravel())
    if bad.any():
        flat = np.flatnonzero(bad)
        raise NumericsError(f"non-finite value in {ctx} at flat index {int(flat[0])}")


class Tensor:
    """A float64 array plus the bookkeeping needed for reverse mode.

    ``grad`` is populated only on leaf tensors (those the user created) and
    accumulates across ``backward`` calls until ``zero_grad`` is called.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bw")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        _check_finite(self.data, "Tensor()")
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._bw: Callable[[np.ndarray], Iterable[tuple[Tensor, np.ndarray]]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- graph construction -------------------------------------------------

    @staticmethod
    def _result(data: np.ndarray, parents: Sequence["Tensor"], bw) -> "Tensor":
        out = Tensor.__new__(Tensor)
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        out.data = arr
        _check_finite(out.data, "op result")
        out.grad = None
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._bw = bw
        else:
            out.requires_grad = False
            out._parents = ()
            out._bw = None
        return out

    def backward(self) -> None:
        """Push d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if self.data.size != 1:
            raise ContractError(f"backward() root must be scalar, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("backward() root is not connected to any leaf")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        gmap: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = gmap.pop(id(node), None)
            if g is None:
                continue
            if node._bw is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, contrib in node._bw(g):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                if key in gmap:
                    gmap[key] = gmap[key] + contrib
                else:
                    gmap[key] = contrib

    # -- elementwise binary -------------------------------------------------

    def _coerce(self, other, op: str) -> "Tensor | float":
        if isinstance(other, Tensor):
            if other.shape != self.shape:
                raise ShapeError(f"{op}: shapes {self.shape} and {other.shape} differ")
            return other
        if isinstance(other, (int, float)):
            return float(other)
        raise ShapeError(f"{op}: unsupported operand type {type(other).__name__}")

    def __add__(self, other):
        other = self._coerce(other, "add")
        if isinstance(other, float):
            return Tensor._result(self.data + other, (self,), lambda g: ((self, g),))
        return Tensor._result(self.data + other.data, (self, other),
                              lambda g: ((self, g), (other, g)))

    __radd__ = __add__

    def __sub__(self, other):
        other = self._coerce(other, "sub")
        if isinstance(other, float):
            return Tensor._result(self.data - other, (self,), lambda g: ((self, g),))
        return Tensor._result(self.data - other.data, (self, other),
                              lambda g: ((self, g), (other, -g)))

    def __rsub__(self, other):
        other = self._coerce(other, "rsub")
        return Tensor._result(other - self.data, (self,), lambda g: ((self, -g),))

    def __mul__(self, other):
        other = self._coerce(other, "mul")
        if isinstance(other, float):
            return Tensor._result(self.data * other, (self,), lambda g: ((self, g * other),))
        return Tensor._result(self.data * other.data, (self, other),
                              lambda g: ((self, g * other.data), (other, g * self.data)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other, "div")
        if isinstance(other, float):
            if other == 0.0:
                raise DomainError("div: division by zero scalar")
            return Tensor._result(self.data / other, (self,), lambda g: ((self, g / other),))
        with np.errstate(divide="ignore", invalid="ignore"):
            out = self.data / other.data
        return Tensor._result(out, (self, other),
                              lambda g: ((self, g / other.data),
                                         (other, -g * out / other.data)))

    def __rtruediv__(self, other):
        other = self._coerce(other, "rdiv")
        with np.errstate(divide="ignore", invalid="ignore"):
            out = other / self.data
        return Tensor._result(out, (self,), lambda g: ((self, -g * out / self.data),))

    def __neg__(self):
        return Tensor._result(-self.data, (self,), lambda g: ((self, -g),))

    def __matmul__(self, other):
        if not isinstance(other, Tensor):
            raise ShapeError("matmul: both operands must be tensors")
        a, b = self.data, other.data
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError(f"matmul: operands must be at least 2-d, got {a.shape} @ {b.shape}")
        if a.shape[:-2] != b.shape[:-2]:
            raise ShapeError(f"matmul: leading dims differ, {a.shape} @ {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")

        def bw(g):
            return ((self, g @ np.swapaxes(b, -1, -2)),
                    (other, np.swapaxes(a, -1, -2) @ g))

        return Tensor._result(a @ b, (self, other), bw)

    # -- elementwise unary --------------------------------------------------

    def sigmoid(self):
        x = self.data
        out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                       np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        return Tensor._result(out, (self,), lambda g: ((self, g * out * (1.0 - out)),))

    def tanh(self):
        out = np.tanh(self.data)
        return Tensor._result(out, (self,), lambda g: ((self, g * (1.0 - out * out)),))

    def gelu(self):
        x = self.data
        cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
        out = x * cdf
        pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
        return Tensor._result(out, (self,), lambda g: ((self, g * (cdf + x * pdf)),))

    def abs(self):
        x = self.data
        return Tensor._result(np.abs(x), (self,), lambda g: ((self, g * np.sign(x)),))

    def sqrt(self):
        if np.any(self.data < 0):
            raise DomainError("sqrt: negative input")
        out = np.sqrt(self.data)
        return Tensor._result(out, (self,), lambda g: ((self, g * 0.5 / out),))

    def exp(self):
        out = np.exp(self.data)
        _check_finite(out, "exp")
        return Tensor._result(out, (self,), lambda g: ((self, g * out),))

    def log(self):
        if np.any(self.data <= 0):
            raise DomainError("log: non-positive input")
        return Tensor._result(np.log(self.data), (self,),
                              lambda g: ((self, g / self.data),))

    def clamp_min(self, floor: float):
        mask = self.data >= floor
        return Tensor._result(np.maximum(self.data, floor), (self,),
                              lambda g: ((self, g * mask),))

    # -- reductions ----------------------------------------------------------

    def sum(self, axis: int | None = None):
        if axis is None:
            return Tensor._result(self.data.sum(), (self,),
                                  lambda g: ((self, np.full_like(self.data, float(g))),))
        axis = self._check_axis(axis, "sum")
        shape = self.shape

        def bw(g):
            return ((self, np.broadcast_to(np.expand_dims(g, axis), shape).copy()),)

        return Tensor._result(self.data.sum(axis=axis), (self,), bw)

    def mean(self, axis: int | None = None):
        if axis is None:
            n = float(self.data.size)
            return Tensor._result(self.data.mean(), (self,),
                                  lambda g: ((self, np.full_like(self.data, float(g) / n)),))
        axis = self._check_axis(axis, "mean")
        n = float(self.shape[axis])
        shape = self.shape

        def bw(g):
            return ((self, np.broadcast_to(np.expand_dims(g / n, axis), shape).copy()),)

        return Tensor._result(self.data.mean(axis=axis), (self,), bw)

    def softmax(self, axis: int = -1):
        axis = self._check_axis(axis, "softmax")
        x = self.data
        m = x.max(axis=axis, keepdims=True)
        e = np.exp(x - m)
        out = e / e.sum(axis=axis, keepdims=True)

        def bw(g):
            dot = (g * out).sum(axis=axis, keepdims=True)
            return ((self, out * (g - dot)),)

        return Tensor._result(out, (self,), bw)

    def _check_axis(self, axis: int, op: str) -> int:
        if not -self.ndim <= axis < self.ndim:
            raise ShapeError(f"{op}: axis {axis} out of range for shape {self.shape}")
        return axis % self.ndim

    # -- shape ops -----------------------------------------------------------

    def reshape(self, *shape: int):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        try:
            out = self.data.reshape(shape)
        except ValueError as e:
            raise ShapeError(f"reshape: {e}") from None
        old = self.shape
        return Tensor._result(out, (self,), lambda g: ((self, g.reshape(old)),))

    def transpose(self, *axes: int):
        if len(axes) != self.ndim:
            raise ShapeError(f"transpose: need {self.ndim} axes, got {len(axes)}")
        inv = np.argsort(axes)
        return Tensor._result(np.transpose(self.data, axes), (self,),
                              lambda g: ((self, np.ascontiguousarray(np.transpose(g, inv))),))

    def expand(self, *shape: int):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        if len(shape) != self.ndim:
            raise ShapeError(f"expand: rank mismatch, {self.shape} to {shape}")
        axes = []
        for i, (have, want) in enumerate(zip(self.shape, shape)):
            if have == want:
                continue
            if have != 1:
                raise ShapeError(f"expand: cannot expand dim {i} from {have} to {want}")
            axes.append(i)
        axes_t = tuple(axes)

        def bw(g):
            return ((self, g.sum(axis=axes_t, keepdims=True)),)

        return Tensor._result(np.broadcast_to(self.data, shape).copy(), (self,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along ``axis``; all other dims must match."""
    if not tensors:
        raise ShapeError("concat: empty input")
    axis = tensors[0]._check_axis(axis, "concat")
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(base):
            raise ShapeError(f"concat: rank mismatch {tensors[0].shape} vs {t.shape}")
        if other[:axis] != base[:axis] or other[axis + 1:] != base[axis + 1:]:
            raise ShapeError(f"concat: off-axis dims differ, {tensors[0].shape} vs {t.shape}")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]
    parents = tuple(tensors)

    def bw(g):
        pieces = np.split(g, offsets, axis=axis)
        return tuple((p, np.ascontiguousarray(piece)) for p, piece in zip(parents, pieces))

    return Tensor._result(np.concatenate([t.data for t in tensors], axis=axis), parents, bw)


def narrow(t: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Slice ``length`` entries along ``axis`` starting at ``start``."""
    axis = t._check_axis(axis, "narrow")
    if start < 0 or length <= 0 or start + length > t.shape[axis]:
        raise ShapeError(f"narrow: [{start}, {start + length}) out of range "
                         f"for dim {axis} of shape {t.shape}")
    sl = [slice(None)] * t.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)

    def bw(g):
        full = np.zeros_like(t.data)
        full[sl] = g
        return ((t, full),)

    return Tensor._result(t.data[sl], (t,), bw)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; ties route the gradient to the first operand."""
    if not isinstance(a, Tensor) or not isinstance(b, Tensor):
        raise ShapeError("maximum: both operands must be tensors")
    if a.shape != b.shape:
        raise ShapeError(f"maximum: shapes {a.shape} and {b.shape} differ")
    mask = a.data >= b.data
    return Tensor._result(np.where(mask, a.data, b.data), (a, b),
                          lambda g: ((a, g * mask), (b, g * ~mask)))


def where(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Select from ``a`` where the boolean ``mask`` holds, else from ``b``."""
    mask = np.asarray(mask, dtype=bool)
    if a.shape != b.shape or mask.shape != a.shape:
        raise ShapeError(f"where: shapes {mask.shape}, {a.shape}, {b.shape} differ")
    return Tensor._result(np.where(mask, a.data, b.data), (a, b),
                          lambda g: ((a, g * mask), (b, g * ~mask)))


class GatherPlan:
    """A fixed row-gather index set with a precomputed scatter-add inverse.

    The adjoint of a gather is a scatter-add over duplicate indices; doing
    that with a sorted segment reduction instead of ``np.add.at`` keeps the
    backward pass vectorized.
    """

    def __init__(self, idx: np.ndarray, rows: int):
        self.idx = np.ascontiguousarray(idx, dtype=np.intp).ravel()
        if self.idx.size == 0:
            raise ShapeError("GatherPlan: empty index set")
        if self.idx.min() < 0 or self.idx.max() >= rows:
            raise ShapeError(f"GatherPlan: index out of range for {rows} rows")
        self.rows = int(rows)
        order = np.argsort(self.idx, kind="stable")
        sorted_idx = self.idx[order]
        starts = np.concatenate(([0], np.flatnonzero(np.diff(sorted_idx)) + 1))
        self._order = order
        self._starts = starts
        self._uniq = sorted_idx[starts]

    def scatter_add(self, g: np.ndarray) -> np.ndarray:
        out = np.zeros((self.rows,) + g.shape[1:], dtype=g.dtype)
        out[self._uniq] = np.add.reduceat(g[self._order], self._starts, axis=0)
        return out


def gather_rows(t: Tensor, plan: GatherPlan) -> Tensor:
    """Select rows of a 2-d tensor by index, with repeats allowed."""
    if t.ndim != 2:
        raise ShapeError(f"gather_rows: need a 2-d tensor, got shape {t.shape}")
    if plan.rows != t.shape[0]:
        raise ShapeError(f"gather_rows: plan built for {plan.rows} rows, tensor has {t.shape[0]}")
    return Tensor._result(t.data[plan.idx], (t,),
                          lambda g: ((t, plan.scatter_add(g)),))


def _reflect_index(i: np.ndarray, n: int) -> np.ndarray:
    # Mirror without repeating the edge sample, e.g. n=4: -2,-1,0,...,3,4,5 -> 2,1,0,...,3,2,1.
    if n == 1:
        return np.zeros_like(i)
    period = 2 * (n - 1)
    i = np.abs(i) % period
    return np.minimum(i, period - i)


_PLAN_CACHE: dict[tuple, GatherPlan] = {}


def unfold_plan(h: int, w: int, k: int) -> GatherPlan:
    """Gather indices turning an (h*w, C) grid into k*k reflect-padded patches."""
    if k % 2 != 1 or k < 1:
        raise ShapeError(f"unfold_plan: kernel size must be odd and positive, got {k}")
    key = ("unfold", h, w, k)
    if key not in _PLAN_CACHE:
        r = k // 2
        ii = _reflect_index(np.arange(h)[:, None] + np.arange(-r, r + 1)[None, :], h)
        jj = _reflect_index(np.arange(w)[:, None] + np.arange(-r, r + 1)[None, :], w)
        idx = ii[:, None, :, None] * w + jj[None, :, None, :]
        _PLAN_CACHE[key] = GatherPlan(idx.reshape(-1), h * w)
    return _PLAN_CACHE[key]


def pad_plan(h: int, w: int, h_to: int, w_to: int) -> GatherPlan:
    """Gather indices reflect-padding an (h*w, C) grid to (h_to*w_to, C)."""
    if h_to < h or w_to < w or h_to > 2 * h - 1 or w_to > 2 * w - 1:
        raise ShapeError(f"pad_plan: cannot pad ({h},{w}) to ({h_to},{w_to})")
    key = ("pad", h, w, h_to, w_to)
    if key not in _PLAN_CACHE:
        ii = _reflect_index(np.arange(h_to), h)
        jj = _reflect_index(np.arange(w_to), w)
        idx = ii[:, None] * w + jj[None, :]
        _PLAN_CACHE[key] = GatherPlan(idx.reshape(-1), h * w)
    return _PLAN_CACHE[key]


def crop_plan(h: int, w: int, h_to: int, w_to: int) -> GatherPlan:
    """Gather indices cropping an (h*w, C) grid to its top-left (h_to*w_to, C)."""
    if h_to > h or w_to > w:
        raise ShapeError(f"crop_plan: cannot crop ({h},{w}) to ({h_to},{w_to})")
    key = ("crop", h, w, h_to, w_to)
    if key not in _PLAN_CACHE:
        idx = np.arange(h_to)[:, None] * w + np.arange(w_to)[None, :]
        _PLAN_CACHE[key] = GatherPlan(idx.reshape(-1), h * w)
    return _PLAN_CACHE[key]


def unfold2d(t: Tensor, h: int, w: int, k: int) -> Tensor:
    """Expand an (h*w, C) grid into (h*w, k*k, C) reflect-padded neighborhoods."""
    if t.ndim != 2 or t.shape[0] != h * w:
        raise ShapeError(f"unfold2d: expected ({h * w}, C) tensor, got {t.shape}")
    patches = gather_rows(t, unfold_plan(h, w, k))
    return patches.reshape(h * w, k * k, t.shape[1])


def windows_plan(h: int, w: int, k: int) -> GatherPlan:
    """Gather indices for every fully-contained k*k window of an (h*w, C) grid."""
    if k < 1 or k > h or k > w:
        raise ShapeError(f"windows_plan: kernel {k} does not fit a {h}x{w} grid")
    key = ("windows", h, w, k)
    if key not in _PLAN_CACHE:
        ii = np.arange(h - k + 1)[:, None] + np.arange(k)[None, :]
        jj = np.arange(w - k + 1)[:, None] + np.arange(k)[None, :]
        idx = (ii[:, None, :, None] * w + jj[None, :, None, :])
        _PLAN_CACHE[key] = GatherPlan(idx.reshape(-1), h * w)
    return _PLAN_CACHE[key]


def windows2d(t: Tensor, h: int, w: int, k: int) -> Tensor:
    """Expand an (h*w, C) grid into ((h-k+1)*(w-k+1), k*k, C) valid windows."""
    if t.ndim != 2 or t.shape[0] != h * w:
        raise ShapeError(f"windows2d: expected ({h * w}, C) tensor, got {t.shape}")
    n_out = (h - k + 1) * (w - k + 1)
    patches = gather_rows(t, windows_plan(h, w, k))
    return patches.reshape(n_out, k * k, t.shape[1])


def gradcheck(f: Callable[[], Tensor], params: Tensor | Sequence[Tensor],
              eps: float = 1e-6) -> float:
    """Compare reverse-mode gradients of ``f()`` against central differences.

    Returns the worst relative error max |a - n| / max(1e-12, |a| + |n|)
    over every coordinate of every tensor in ``params``. ``f`` must build a
    fresh scalar from the same tensor objects on each call, since their
    ``data`` is perturbed in place.
    """
    if not 1e-8 <= eps <= 1e-4:
        raise DomainError(f"gradcheck: eps {eps} outside [1e-8, 1e-4]")
    plist = [params] if isinstance(params, Tensor) else list(params)
    for p in plist:
        if not p.requires_grad:
            raise ContractError("gradcheck: all checked tensors must require grad")
        p.zero_grad()
    root = f()
    if root.data.size != 1:
        raise ContractError(f"gradcheck: f() must be scalar, got shape {root.shape}")
    root.backward()
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in plist]
    worst = 0.0
    for p, ana in zip(plist, analytic):
        flat = p.data.ravel()
        aflat = ana.ravel()
        for i in range(flat.size):
            orig = flat[i]
            try:
                flat[i] = orig + eps
                f_plus = f().item()
                flat[i] = orig - eps
                f_minus = f().item()
            except NumericsError as e:
                raise NumericsError(f"gradcheck: non-finite evaluation while perturbing "
                                    f"coordinate {i}: {e}") from e
            finally:
                flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            err = abs(aflat[i] - numeric) / max(1e-12, abs(aflat[i]) + abs(numeric))
            worst = max(worst, err)
    return worst
