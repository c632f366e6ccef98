"""Command-line surface: training, fusion, evaluation, derivative checks,
conflict diagnostics, and the ablation grid.

Only ``train`` (and ``ablate``, which wraps training) ever sees a task
label, and those labels come from config files or dataset directory names;
inference commands take bare images. Exit codes: 0 success, 1 broken
contract (shapes, domains, numerics), 2 unreadable input (file format,
I/O).
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

from .ablate import BASELINE_NOTE, run_grid, write_grid_csv
from .autograd import (ContractError, DomainError, NumericsError, ShapeError,
                       Tensor)
from .backbone import fusion_weights, model_forward
from .checkpoint import load_checkpoint
from .checks import run_and_report
from .config import apply_seed_override, config_to_text, load_config
from .data import (FormatError, fuse_chroma, load_pair, read_image,
                   rgb_to_ycbcr, scan_dataset, write_image, ycbcr_to_rgb)
from .figures import bar_chart, conflict_polar, loss_curves
from .metrics import evaluate_pair
from .objectives import task_objective
from .oaf import BRANCHES
from .optim import conflict_pairs, conflict_report
from .train import _dataset_pools, _task_pass, train_run, write_conflict_log

METRIC_NAMES = ("mi", "ssim", "sd", "ei", "qabf")


def _sibling(path, ext: str) -> str:
    return os.path.splitext(str(path))[0] + ext


def cmd_train(args) -> int:
    cfg = apply_seed_override(load_config(args.config))
    print("effective config:")
    print(config_to_text(cfg))
    step = max(1, cfg.iterations // 10)

    def progress(it, losses):
        if (it + 1) % step == 0 or it + 1 == cfg.iterations:
            vals = " ".join(f"{t}={v:.5f}" for t, v in zip(cfg.tasks, losses))
            print(f"iter {it + 1}/{cfg.iterations} {vals}", flush=True)

    result = train_run(cfg, out_dir=cfg.out_dir, progress=progress)
    fig = os.path.join(cfg.out_dir, "loss_curves.png")
    loss_curves(result.losses, cfg.tasks, fig, weights=result.weights)
    print(f"artifacts in {cfg.out_dir}: model.ckpt, loss_log.csv, "
          f"conflict_log.csv, loss_curves.png")
    return 0


def _luma(img: np.ndarray) -> np.ndarray:
    return rgb_to_ycbcr(img)[0] if img.ndim == 3 else img


def _chroma(img: np.ndarray, shape) -> tuple[np.ndarray, np.ndarray]:
    if img.ndim == 3:
        _, cb, cr = rgb_to_ycbcr(img)
        return cb, cr
    return np.full(shape, 0.5), np.full(shape, 0.5)


def cmd_fuse(args) -> int:
    ck = load_checkpoint(args.ckpt)
    img_a = read_image(args.a)
    img_b = read_image(args.b)
    y1, y2 = _luma(img_a), _luma(img_b)
    t1 = Tensor(y1[:, :, None])
    t2 = Tensor(y2[:, :, None])

    w = fusion_weights(t1, t2, ck.params, ck.cfg.backbone)
    print("branch weights:")
    print("         " + "".join(f"{b:>9}" for b in BRANCHES))
    for si in range(2):
        print(f"source {si + 1} "
              + "".join(f"{w[si, bi]:9.5f}" for bi in range(len(BRANCHES))))

    fused = model_forward(t1, t2, ck.params, ck.cfg.backbone).numpy()[:, :, 0]
    if img_a.ndim == 3 or img_b.ndim == 3:
        cb1, cr1 = _chroma(img_a, y1.shape)
        cb2, cr2 = _chroma(img_b, y2.shape)
        cb, cr = fuse_chroma(cb1, cr1, cb2, cr2)
        out = np.clip(ycbcr_to_rgb(fused, cb, cr), 0.0, 1.0)
    else:
        out = fused
    write_image(args.o, out)
    print(f"wrote {args.o}")
    return 0


def _fuse_plane(ck, i1: np.ndarray, i2: np.ndarray,
                baseline: bool) -> np.ndarray:
    if baseline:
        return 0.5 * (i1 + i2)
    f = model_forward(Tensor(i1[:, :, None]), Tensor(i2[:, :, None]),
                      ck.params, ck.cfg.backbone)
    return f.numpy()[:, :, 0]


def cmd_eval(args) -> int:
    ck = load_checkpoint(args.ckpt)
    pairs = scan_dataset(args.data)
    if not pairs:
        raise DomainError(f"eval: no pairs under {args.data}")
    have_oracle = any(dp.gt is not None for dp in pairs)
    names = list(METRIC_NAMES) + (["oracle_ssim"] if have_oracle else [])

    rows = []
    for dp in pairs:
        s = load_pair(dp)
        fused = _fuse_plane(ck, s.i1, s.i2, args.baseline_average)
        rows.append((dp.task, dp.pair_id,
                     evaluate_pair(fused, s.i1, s.i2, s.oracle)))

    means = {m: float(np.mean([r[m] for _, _, r in rows if m in r]))
             for m in names}
    with open(args.o, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["task", "pair"] + names)
        for task, pid, r in rows:
            writer.writerow([task, pid]
                            + [repr(r[m]) if m in r else "" for m in names])
        writer.writerow(["mean", ""] + [repr(means[m]) for m in names])

    fig = _sibling(args.o, ".png")
    bar_chart(names, [means[m] for m in names], "mean over pairs", fig)
    print(f"evaluated {len(rows)} pairs -> {args.o}, {fig}")
    for m in names:
        print(f"mean {m} = {means[m]:.6f}")
    return 0


def cmd_gradcheck(args) -> int:
    text, ok = run_and_report()
    print(text)
    return 0 if ok else 1


def cmd_diagnose(args) -> int:
    ck = load_checkpoint(args.ckpt)
    tasks = ck.cfg.tasks
    pools = _dataset_pools(args.data, tasks)
    grads = []
    for t in tasks:
        _, g = _task_pass(pools[t], task_objective(t), ck.params, ck.cfg)
        grads.append(g)
    rep = conflict_report(grads, iteration=ck.iteration)
    write_conflict_log(args.o, [rep], tasks)
    print(f"wrote {args.o}")
    for i, j, angle, ni, nj in conflict_pairs(rep):
        print(f"{tasks[i]} vs {tasks[j]}: angle {angle:.3f} deg, "
              f"norms {ni:.6f} / {nj:.6f}")
    if len(tasks) >= 2:
        fig = _sibling(args.o, ".svg")
        conflict_polar([rep], tasks, fig)
        print(f"wrote {fig}")
    else:
        print("single objective, no pairwise angles to plot")
    return 0


def cmd_ablate(args) -> int:
    cfg = apply_seed_override(load_config(args.config))

    def progress(row):
        vals = " ".join(f"ssim_{t}={v:.4f}" for t, v in row.ssims.items())
        print(f"[{row.axis}] {row.cell}: {vals}", flush=True)

    rows = run_grid(cfg, progress=progress)
    write_grid_csv(args.o, rows, cfg.tasks)
    fig = _sibling(args.o, ".png")
    labels = [f"{r.axis}: {r.cell}" for r in rows]
    values = [float(np.mean([r.ssims[t] for t in cfg.tasks])) for r in rows]
    bar_chart(labels, values, "mean oracle ssim", fig)
    print(f"wrote {args.o}, {fig}")
    print(BASELINE_NOTE)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="unifusion",
        description="task-agnostic image fusion: train, fuse, evaluate")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train from a config file")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("fuse", help="fuse two images with a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("-o", required=True)
    p.set_defaults(fn=cmd_fuse)

    p = sub.add_parser("eval", help="score fused pairs from a dataset tree")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("-o", required=True)
    p.add_argument("--baseline-average", action="store_true",
                   help="score the plain average of the sources instead")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck",
                       help="verify every derivative against finite differences")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("diagnose",
                       help="pairwise gradient-conflict angles at a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("-o", required=True)
    p.set_defaults(fn=cmd_diagnose)

    p = sub.add_parser("ablate", help="train and score the ablation grid")
    p.add_argument("--config", required=True)
    p.add_argument("-o", required=True)
    p.set_defaults(fn=cmd_ablate)
    return parser


def console_main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ShapeError, DomainError, ContractError, NumericsError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (FormatError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(console_main())
