"""Multi-objective weighting, the Adam parameter update, and gradient
conflict diagnostics.

The weighting scheme keeps a logit vector xi over tasks. Each training step
does one forward/backward per task: the logits are first corrected using the
loss change observed since the previous step, then the per-task gradients
are combined with weights proportional to softmax(xi)_m / loss_m.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import DomainError, ShapeError, Tensor


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max())
    return e / e.sum()


@dataclass
class FamoState:
    xi: np.ndarray
    m: np.ndarray
    v: np.ndarray
    beta: float = 0.025
    gamma: float = 1e-3
    t: int = 0
    prev_losses: np.ndarray | None = None


def famo_init(n_tasks: int, beta: float = 0.025, gamma: float = 1e-3) -> FamoState:
    if n_tasks < 1:
        raise DomainError(f"famo_init: need at least one task, got {n_tasks}")
    z = np.zeros(n_tasks)
    return FamoState(xi=z.copy(), m=z.copy(), v=z.copy(), beta=beta, gamma=gamma)


def _check_losses(losses, state: FamoState, op: str) -> np.ndarray:
    arr = np.asarray(losses, dtype=np.float64)
    if arr.shape != state.xi.shape:
        raise ShapeError(f"{op}: got {arr.shape[0] if arr.ndim else 0} losses "
                         f"for {state.xi.shape[0]} tasks")
    if not np.all(arr > 0):
        raise DomainError(f"{op}: losses must be positive, got {arr.tolist()}")
    return arr


def famo_weights(state: FamoState, losses) -> np.ndarray:
    """Per-task gradient weights C * Z_m / loss_m, normalized to sum to 1."""
    arr = _check_losses(losses, state, "famo_weights")
    r = _softmax(state.xi) / arr
    return r / r.sum()


def famo_combine(per_task_grads, w: np.ndarray) -> list[np.ndarray]:
    """Weighted sum of per-task gradient sets, elementwise per parameter."""
    sets = [list(g) for g in per_task_grads]
    if len(sets) != len(w):
        raise ShapeError(f"famo_combine: {len(sets)} gradient sets for {len(w)} weights")
    first = sets[0]
    for m, s in enumerate(sets[1:], start=1):
        if len(s) != len(first):
            raise ShapeError(f"famo_combine: task {m} has {len(s)} gradients, "
                             f"task 0 has {len(first)}")
        for i, (a, b) in enumerate(zip(first, s)):
            if a.shape != b.shape:
                raise ShapeError(f"famo_combine: gradient {i} shape {b.shape} of task "
                                 f"{m} does not match {a.shape}")
    out = [w[0] * g for g in first]
    for m in range(1, len(sets)):
        for i, g in enumerate(sets[m]):
            out[i] = out[i] + w[m] * g
    return out


def famo_update_logits(state: FamoState, losses_t, losses_t1) -> np.ndarray:
    """Move xi along the softmax-Jacobian image of the log-loss improvements,
    with decay folded into the direction, through Adam-style moment buffers."""
    lt = _check_losses(losses_t, state, "famo_update_logits")
    lt1 = _check_losses(losses_t1, state, "famo_update_logits")
    d = np.log(lt) - np.log(lt1)
    z = _softmax(state.xi)
    delta = z * (d - float(z @ d))
    u = delta + state.gamma * state.xi
    state.t += 1
    state.m = 0.9 * state.m + 0.1 * u
    state.v = 0.999 * state.v + 0.001 * u * u
    mh = state.m / (1.0 - 0.9 ** state.t)
    vh = state.v / (1.0 - 0.999 ** state.t)
    state.xi = state.xi - state.beta * mh / (np.sqrt(vh) + 1e-8)
    return state.xi


def famo_step(state: FamoState, losses) -> np.ndarray:
    """One-forward-per-step protocol: fold the losses observed now into the
    logit update against the previous step's losses, then return this step's
    combination weights. Mutates ``state``."""
    arr = _check_losses(losses, state, "famo_step")
    if state.prev_losses is not None:
        famo_update_logits(state, state.prev_losses, arr)
    state.prev_losses = arr.copy()
    return famo_weights(state, arr)


@dataclass
class AdamState:
    alpha: float
    m: list[np.ndarray]
    v: list[np.ndarray]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0


def _as_array(p) -> np.ndarray:
    return p.data if isinstance(p, Tensor) else p


def adam_init(params, alpha: float = 2e-5, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    zeros = [np.zeros_like(_as_array(p)) for p in params]
    return AdamState(alpha=alpha, m=zeros,
                     v=[z.copy() for z in zeros], beta1=beta1, beta2=beta2, eps=eps)


def adam_step(state: AdamState, params, grads) -> None:
    """Bias-corrected Adam update, applied to the parameter arrays in place."""
    plist = list(params)
    glist = list(grads)
    if len(plist) != len(state.m) or len(glist) != len(plist):
        raise ShapeError(f"adam_step: {len(plist)} params, {len(glist)} grads, "
                         f"{len(state.m)} moment buffers")
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for i, (p, g) in enumerate(zip(plist, glist)):
        arr = _as_array(p)
        if arr.shape != g.shape or arr.shape != state.m[i].shape:
            raise ShapeError(f"adam_step: parameter {i} shape {arr.shape} does not "
                             f"match gradient {g.shape} or buffer {state.m[i].shape}")
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * (g * g)
        mh = state.m[i] / c1
        vh = state.v[i] / c2
        arr -= state.alpha * mh / (np.sqrt(vh) + state.eps)


@dataclass
class ConflictReport:
    iteration: int
    norms: np.ndarray
    angles_deg: np.ndarray
    degenerate: np.ndarray = field(repr=False)


def conflict_report(per_task_grads, iteration: int = 0) -> ConflictReport:
    """Pairwise angles (degrees) and L2 norms of the flattened per-task
    gradients. Pairs involving a zero gradient get 90 degrees and a flag."""
    flats = [np.concatenate([np.ravel(g) for g in gs]) for gs in per_task_grads]
    m = len(flats)
    if m < 2:
        raise DomainError(f"conflict_report: need at least 2 tasks, got {m}")
    for i, fl in enumerate(flats[1:], start=1):
        if fl.shape != flats[0].shape:
            raise ShapeError(f"conflict_report: task {i} flattens to {fl.shape[0]} "
                             f"entries, task 0 to {flats[0].shape[0]}")
    norms = np.array([np.linalg.norm(fl) for fl in flats])
    angles = np.zeros((m, m))
    degenerate = np.zeros((m, m), dtype=bool)
    for i in range(m):
        for j in range(i + 1, m):
            if norms[i] == 0.0 or norms[j] == 0.0:
                angles[i, j] = angles[j, i] = 90.0
                degenerate[i, j] = degenerate[j, i] = True
            else:
                # atan2 form stays accurate where arccos loses digits (near
                # 0 and 180 degrees)
                u = flats[i] / norms[i]
                v = flats[j] / norms[j]
                a = 2.0 * np.arctan2(np.linalg.norm(u - v), np.linalg.norm(u + v))
                angles[i, j] = angles[j, i] = float(np.degrees(a))
    return ConflictReport(iteration=iteration, norms=norms, angles_deg=angles,
                          degenerate=degenerate)


def conflict_pairs(report: ConflictReport) -> list[tuple[int, int, float, float, float]]:
    """Upper-triangle rows (i, j, angle_deg, norm_i, norm_j) for serialization."""
    m = len(report.norms)
    return [(i, j, float(report.angles_deg[i, j]),
             float(report.norms[i]), float(report.norms[j]))
            for i in range(m) for j in range(i + 1, m)]
