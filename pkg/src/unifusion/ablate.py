"""Ablation grid: short training runs over the component, variant, and
branch axes, each scored with per-task losses and oracle SSIM on a shared
probe set of synthetic pairs. Rows describe the grid structure only; no
ordering among cells is asserted anywhere.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .autograd import Tensor
from .backbone import model_forward
from .config import RunConfig
from .data import FusionSample, default_specs, gen_pair
from .metrics import ssim_metric
from .objectives import task_loss, task_objective
from .train import train_run

BASELINE_NOTE = ("note: the unified baseline weights its two sources by a "
                 "softmax over mean gradient energy; no pretrained feature "
                 "extractor is involved")


@dataclass(frozen=True)
class AblationCell:
    axis: str
    cell: str
    use_ipa: bool
    variant: str
    fuse_mode: str
    mo_mode: str
    objective: str = "task"
    oaf_disable: frozenset = frozenset()
    dynamic_weights: bool = True


@dataclass
class AblationRow:
    axis: str
    cell: str
    losses: dict[str, float] = field(default_factory=dict)
    ssims: dict[str, float] = field(default_factory=dict)


def ablation_cells() -> list[AblationCell]:
    """The full grid: two baselines plus the eight-cell component study,
    the three block variants, and the five fusion-branch rows."""
    cells = [
        AblationCell("component", "baseline", use_ipa=False, variant="SF",
                     fuse_mode="add", mo_mode="equal", objective="unified"),
        AblationCell("component", "baseline-ts", use_ipa=False, variant="SF",
                     fuse_mode="add", mo_mode="equal"),
    ]
    for ti in (False, True):
        for ta in (False, True):
            for mo in (False, True):
                label = (f"TI {'on' if ti else 'off'}, "
                         f"TA {'on' if ta else 'off'}, "
                         f"MO {'on' if mo else 'off'}")
                cells.append(AblationCell(
                    "component", label,
                    use_ipa=ti, variant="IeSF" if ti else "SF",
                    fuse_mode="oaf" if ta else "add",
                    mo_mode="famo" if mo else "equal"))
    for v in ("SF", "IrSF", "IeSF"):
        cells.append(AblationCell("variant", v, use_ipa=True, variant=v,
                                  fuse_mode="oaf", mo_mode="famo"))
    for b in ("HPF", "ADD", "MUL"):
        cells.append(AblationCell("branch", f"w/o {b}", use_ipa=True,
                                  variant="IeSF", fuse_mode="oaf",
                                  mo_mode="famo", oaf_disable=frozenset({b})))
    cells.append(AblationCell("branch", "w/o DW", use_ipa=True,
                              variant="IeSF", fuse_mode="oaf", mo_mode="famo",
                              dynamic_weights=False))
    cells.append(AblationCell("branch", "full", use_ipa=True, variant="IeSF",
                              fuse_mode="oaf", mo_mode="famo"))
    return cells


def _probes(cfg: RunConfig, n_pairs: int) -> dict[str, list[FusionSample]]:
    out: dict[str, list[FusionSample]] = {}
    for ti, spec in enumerate(default_specs(cfg.data_height, cfg.data_width,
                                            cfg.tasks)):
        out[spec.task] = [gen_pair(spec, 10 ** 9 + cfg.seed + 1000 * ti + k)
                          for k in range(n_pairs)]
    return out


def _score(params, cell: AblationCell, cfg: RunConfig, probes):
    losses: dict[str, float] = {}
    ssims: dict[str, float] = {}
    for t, samples in probes.items():
        spec = task_objective(t)
        lvals, svals = [], []
        for s in samples:
            i1 = Tensor(s.i1[:, :, None])
            i2 = Tensor(s.i2[:, :, None])
            f = model_forward(i1, i2, params, cfg.backbone,
                              fuse_mode=cell.fuse_mode,
                              oaf_disable=cell.oaf_disable,
                              dynamic_weights=cell.dynamic_weights)
            lvals.append(float(task_loss(f, i1, i2, spec).data))
            svals.append(ssim_metric(f.numpy()[:, :, 0], s.oracle))
        losses[t] = float(np.mean(lvals))
        ssims[t] = float(np.mean(svals))
    return losses, ssims


def run_grid(cfg: RunConfig, eval_pairs: int = 4,
             progress=None) -> list[AblationRow]:
    """Train every cell from the shared seed and score it on shared probes."""
    probes = _probes(cfg, eval_pairs)
    rows = []
    for cell in ablation_cells():
        cell_cfg = replace(
            cfg, mo_mode=cell.mo_mode,
            backbone=replace(cfg.backbone, use_ipa=cell.use_ipa,
                             variant=cell.variant))
        res = train_run(cell_cfg, objective=cell.objective,
                        fuse_mode=cell.fuse_mode,
                        oaf_disable=cell.oaf_disable,
                        dynamic_weights=cell.dynamic_weights)
        losses, ssims = _score(res.params, cell, cell_cfg, probes)
        rows.append(AblationRow(axis=cell.axis, cell=cell.cell,
                                losses=losses, ssims=ssims))
        if progress is not None:
            progress(rows[-1])
    return rows


def write_grid_csv(path, rows: list[AblationRow], tasks) -> None:
    header = (["axis", "cell"] + [f"loss_{t}" for t in tasks]
              + [f"ssim_{t}" for t in tasks])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for r in rows:
            writer.writerow([r.axis, r.cell]
                            + [repr(r.losses[t]) for t in tasks]
                            + [repr(r.ssims[t]) for t in tasks])
