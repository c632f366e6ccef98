"""Multi-task training loop.

Each iteration draws a round-robin batch, runs one forward/backward per
task, folds the per-task losses into the weighting state, applies the
combined gradient with Adam, and records losses, weights, and periodic
gradient-conflict snapshots. Everything downstream of the seed is
deterministic, so reruns reproduce checkpoints byte for byte.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .autograd import DomainError, NumericsError, Tensor
from .backbone import ModelParams, init_model, model_forward
from .checkpoint import Checkpoint, save_checkpoint
from .config import RunConfig
from .data import FusionSample, default_specs, load_pair, sample_batch, scan_dataset
from .objectives import info_weights, task_loss, task_objective, unified_loss
from .optim import (AdamState, ConflictReport, FamoState, adam_init, adam_step,
                    conflict_pairs, conflict_report, famo_combine, famo_init,
                    famo_step)

LOSS_LOG = "loss_log.csv"
CONFLICT_LOG = "conflict_log.csv"
FINAL_CKPT = "model.ckpt"


@dataclass
class TrainResult:
    cfg: RunConfig
    params: ModelParams
    famo: FamoState
    adam: AdamState
    losses: np.ndarray
    weights: np.ndarray
    z: np.ndarray
    conflicts: list[ConflictReport] = field(default_factory=list)
    names: tuple[str, ...] = ()

    @property
    def objective_names(self) -> tuple[str, ...]:
        return self.names or self.cfg.tasks


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max())
    return e / e.sum()


def _dataset_pools(root, tasks) -> dict[str, list[FusionSample]]:
    pools: dict[str, list[FusionSample]] = {t: [] for t in tasks}
    for dp in scan_dataset(root):
        if dp.task in pools:
            pools[dp.task].append(load_pair(dp))
    for t, pool in pools.items():
        if not pool:
            raise DomainError(f"dataset {root} has no pairs for task {t!r}")
    return pools


def _dataset_batch(pools, tasks, b, seed) -> list[FusionSample]:
    rng = np.random.default_rng(seed)
    out = []
    for i in range(b):
        pool = pools[tasks[i % len(tasks)]]
        out.append(pool[int(rng.integers(0, len(pool)))])
    return out


def _task_pass(samples: list[FusionSample], spec, params: ModelParams,
               cfg: RunConfig, fuse_mode: str = "oaf",
               oaf_disable: frozenset[str] = frozenset(),
               dynamic_weights: bool = True) -> tuple[float, list[np.ndarray]]:
    """Mean loss over the samples plus its gradient per parameter. With
    spec None the samples score against the source-weighted unified loss
    instead of a task objective."""
    leaves = params.parameters()
    for t in leaves:
        t.grad = None
    total = None
    for s in samples:
        i1 = Tensor(s.i1[:, :, None])
        i2 = Tensor(s.i2[:, :, None])
        f = model_forward(i1, i2, params, cfg.backbone, fuse_mode=fuse_mode,
                          oaf_disable=oaf_disable,
                          dynamic_weights=dynamic_weights)
        if spec is None:
            w1, w2 = info_weights(Tensor(s.i1), Tensor(s.i2))
            loss = unified_loss(f, i1, i2, w1, w2)
        else:
            loss = task_loss(f, i1, i2, spec)
        total = loss if total is None else total + loss
    mean = total * (1.0 / len(samples))
    mean.backward()
    grads = [t.grad.copy() if t.grad is not None else np.zeros(t.shape)
             for t in leaves]
    for t in leaves:
        t.grad = None
    return float(mean.data), grads


def train_run(cfg: RunConfig, out_dir=None, progress=None,
              objective: str = "task", fuse_mode: str = "oaf",
              oaf_disable: frozenset[str] = frozenset(),
              dynamic_weights: bool = True) -> TrainResult:
    """Run the full loop; when out_dir is given, also write CSV logs and
    periodic checkpoints there. The keyword knobs exist for the ablation
    harness: objective "unified" collapses all tasks into one source-weighted
    objective, and the fusion knobs pass straight through to the forward."""
    if objective not in ("task", "unified"):
        raise DomainError(f"train_run: objective {objective!r} not in "
                          f"('task', 'unified')")
    tasks = cfg.tasks
    m_tasks = len(tasks)
    if cfg.batch != 1 and cfg.batch < m_tasks:
        raise DomainError(f"train_run: batch {cfg.batch} must be 1 or >= "
                          f"{m_tasks} tasks")
    names = tasks if objective == "task" else ("all",)
    m_obj = len(names)
    rng = np.random.default_rng(cfg.seed)
    params = init_model(rng, cfg.backbone)
    adam = adam_init(params.parameters(), alpha=cfg.alpha)
    famo = famo_init(m_obj, beta=cfg.famo_beta, gamma=cfg.famo_gamma)
    specs = ({t: task_objective(t) for t in tasks} if objective == "task"
             else {"all": None})

    pools = None
    gen_specs = None
    if cfg.data_root:
        pools = _dataset_pools(cfg.data_root, tasks)
    else:
        gen_specs = default_specs(cfg.data_height, cfg.data_width, tasks)

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)

    losses_hist = np.zeros((cfg.iterations, m_obj))
    weights_hist = np.zeros((cfg.iterations, m_obj))
    z_hist = np.zeros((cfg.iterations, m_obj))
    conflicts: list[ConflictReport] = []

    for it in range(cfg.iterations):
        batch_seed = int(rng.integers(0, 2 ** 63))
        if pools is not None:
            batch = _dataset_batch(pools, tasks, cfg.batch, batch_seed)
        else:
            batch = sample_batch(gen_specs, cfg.batch, batch_seed)

        losses = np.zeros(m_obj)
        grads: list[list[np.ndarray]] = []
        for mi, t in enumerate(names):
            group = (batch if objective == "unified"
                     else [s for s in batch if s.task == t])
            if not group:
                raise DomainError(f"iteration {it}: batch has no sample for "
                                  f"task {t!r}")
            try:
                losses[mi], g = _task_pass(group, specs[t], params, cfg,
                                           fuse_mode, oaf_disable,
                                           dynamic_weights)
            except NumericsError as e:
                raise NumericsError(f"training aborted at iteration {it}, "
                                    f"task {t!r}: {e}") from e
            if not np.isfinite(losses[mi]):
                raise NumericsError(f"training aborted at iteration {it}: "
                                    f"task {t!r} loss is {losses[mi]}")
            grads.append(g)

        if cfg.mo_mode == "famo":
            w = famo_step(famo, losses)
            z = _softmax(famo.xi)
        else:
            w = np.full(m_obj, 1.0 / m_obj)
            z = w.copy()
        adam_step(adam, params.parameters(), famo_combine(grads, w))

        losses_hist[it] = losses
        weights_hist[it] = w
        z_hist[it] = z
        if m_obj >= 2 and it % cfg.conflict_every == 0:
            conflicts.append(conflict_report(grads, iteration=it))

        if out_dir is not None and (it + 1) % cfg.checkpoint_every == 0:
            ck = Checkpoint(cfg=cfg, iteration=it + 1, params=params,
                            famo=famo, adam=adam)
            save_checkpoint(os.path.join(out_dir, f"ckpt_{it + 1:06d}.bin"), ck)
        if progress is not None:
            progress(it, losses)

    result = TrainResult(cfg=cfg, params=params, famo=famo, adam=adam,
                         losses=losses_hist, weights=weights_hist, z=z_hist,
                         conflicts=conflicts, names=names)
    if out_dir is not None:
        save_checkpoint(os.path.join(out_dir, FINAL_CKPT),
                        Checkpoint(cfg=cfg, iteration=cfg.iterations,
                                   params=params, famo=famo, adam=adam))
        write_loss_log(os.path.join(out_dir, LOSS_LOG), result)
        write_conflict_log(os.path.join(out_dir, CONFLICT_LOG), conflicts, names)
    return result


def write_loss_log(path, result: TrainResult) -> None:
    tasks = result.objective_names
    header = (["iteration"] + [f"loss_{t}" for t in tasks]
              + [f"z_{t}" for t in tasks] + [f"w_{t}" for t in tasks])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for it in range(result.losses.shape[0]):
            row = ([it] + [repr(float(v)) for v in result.losses[it]]
                   + [repr(float(v)) for v in result.z[it]]
                   + [repr(float(v)) for v in result.weights[it]])
            writer.writerow(row)


def write_conflict_log(path, reports: list[ConflictReport], tasks) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "task_i", "task_j", "angle_deg",
                         "norm_i", "norm_j"])
        for rep in reports:
            for i, j, angle, ni, nj in conflict_pairs(rep):
                writer.writerow([rep.iteration, tasks[i], tasks[j],
                                 repr(angle), repr(ni), repr(nj)])
