"""End-to-end tests for the command-line interface."""

import argparse
import csv
import os

import numpy as np
import pytest

from unifusion.cli import build_parser, console_main
from unifusion.data import default_specs, gen_pair, quantize, read_image, write_image

TASKS = ("ivf", "mef", "mff")


def _write_cfg(path, out_dir, iterations=4, seed=11):
    path.write_text(
        "backbone.L = 1\n"
        "backbone.D = 8\n"
        "backbone.window = 4\n"
        f"tasks = {', '.join(TASKS)}\n"
        "train.batch = 3\n"
        f"train.iterations = {iterations}\n"
        f"train.seed = {seed}\n"
        "train.checkpoint_every = 2\n"
        "train.conflict_every = 2\n"
        "data.height = 16\n"
        "data.width = 16\n"
        f"out.dir = {out_dir}\n",
        encoding="utf-8")


@pytest.fixture(scope="session")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "micro.cfg"
    _write_cfg(cfg, root / "run")
    rc = console_main(["train", "--config", str(cfg)])
    assert rc == 0
    for spec in default_specs(16, 16, TASKS):
        d = root / "data" / spec.task
        d.mkdir(parents=True)
        for k in range(2):
            s = gen_pair(spec, 5000 + k)
            write_image(d / f"p{k}_a.pgm", quantize(s.i1))
            write_image(d / f"p{k}_b.pgm", quantize(s.i2))
            write_image(d / f"p{k}_gt.pgm", quantize(s.oracle))
    return root


def test_train_writes_artifacts(workdir, capsys):
    run = workdir / "run"
    for name in ("model.ckpt", "loss_log.csv", "conflict_log.csv",
                 "loss_curves.png", "ckpt_000002.bin", "ckpt_000004.bin"):
        assert (run / name).is_file()


def test_train_echoes_config_and_seed_override(tmp_path, capsys, monkeypatch):
    cfg = tmp_path / "t.cfg"
    _write_cfg(cfg, tmp_path / "run", iterations=1, seed=3)
    monkeypatch.setenv("TITA_SEED", "77")
    rc = console_main(["train", "--config", str(cfg)])
    out = capsys.readouterr().out
    assert rc == 0
    assert "effective config:" in out
    assert "train.seed = 77" in out


def test_fuse_gray_pair(workdir, tmp_path, capsys):
    out = tmp_path / "fused.pgm"
    rc = console_main(["fuse", "--ckpt", str(workdir / "run" / "model.ckpt"),
                       str(workdir / "data" / "ivf" / "p0_a.pgm"),
                       str(workdir / "data" / "ivf" / "p0_b.pgm"),
                       "-o", str(out)])
    text = capsys.readouterr().out
    assert rc == 0
    assert "branch weights" in text
    for b in ("HPF", "ADD", "MUL"):
        assert b in text
    img = read_image(out)
    assert img.shape == (16, 16)
    assert img.min() >= 0.0 and img.max() <= 1.0


def test_fuse_color_pair(workdir, tmp_path):
    spec = default_specs(16, 16, ("ivf",))[0]
    s = gen_pair(spec, 9100)
    rgb = np.clip(np.stack([s.i1, 0.4 * s.i1 + 0.3, s.i1 * 0.5 + 0.2],
                           axis=-1), 0, 1)
    a = tmp_path / "a.ppm"
    b = tmp_path / "b.pgm"
    out = tmp_path / "fused.ppm"
    write_image(a, rgb)
    write_image(b, quantize(s.i2))
    rc = console_main(["fuse", "--ckpt", str(workdir / "run" / "model.ckpt"),
                       str(a), str(b), "-o", str(out)])
    assert rc == 0
    img = read_image(out)
    assert img.shape == (16, 16, 3)


def test_eval_csv_schema_and_figure(workdir, tmp_path):
    out = tmp_path / "eval.csv"
    rc = console_main(["eval", "--ckpt", str(workdir / "run" / "model.ckpt"),
                       "--data", str(workdir / "data"), "-o", str(out)])
    assert rc == 0
    with open(out, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["task", "pair", "mi", "ssim", "sd", "ei", "qabf",
                       "oracle_ssim"]
    assert len(rows) == 1 + 6 + 1
    assert rows[-1][0] == "mean"
    body = rows[1:-1]
    for m_idx in range(2, 8):
        vals = [float(r[m_idx]) for r in body]
        assert abs(float(rows[-1][m_idx]) - np.mean(vals)) < 1e-12
    assert (tmp_path / "eval.png").is_file()


def test_eval_baseline_average_flag(workdir, tmp_path):
    out = tmp_path / "eval_base.csv"
    rc = console_main(["eval", "--ckpt", str(workdir / "run" / "model.ckpt"),
                       "--data", str(workdir / "data"), "-o", str(out),
                       "--baseline-average"])
    assert rc == 0
    with open(out, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    # the plain average of well-formed sources scores a sane oracle ssim
    assert float(rows[-1][-1]) > 0.3


def test_diagnose_schema_and_polar(workdir, tmp_path, capsys):
    out = tmp_path / "conf.csv"
    rc = console_main(["diagnose", "--ckpt",
                       str(workdir / "run" / "model.ckpt"),
                       "--data", str(workdir / "data"), "-o", str(out)])
    text = capsys.readouterr().out
    assert rc == 0
    assert "deg" in text
    with open(out, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["iteration", "task_i", "task_j", "angle_deg",
                       "norm_i", "norm_j"]
    assert len(rows) == 1 + 3
    assert all(r[0] == "4" for r in rows[1:])
    angles = [float(r[3]) for r in rows[1:]]
    assert all(0.0 <= a <= 180.0 for a in angles)
    assert (tmp_path / "conf.svg").is_file()


def test_ablate_grid(tmp_path, capsys):
    cfg = tmp_path / "ab.cfg"
    _write_cfg(cfg, tmp_path / "unused", iterations=2)
    out = tmp_path / "ablation.csv"
    rc = console_main(["ablate", "--config", str(cfg), "-o", str(out)])
    text = capsys.readouterr().out
    assert rc == 0
    assert "gradient energy" in text
    with open(out, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][:2] == ["axis", "cell"]
    assert len(rows) == 1 + 18
    cells = {(r[0], r[1]) for r in rows[1:]}
    assert ("component", "baseline") in cells
    assert ("component", "baseline-ts") in cells
    assert sum(1 for a, c in cells if a == "component" and c.startswith("TI")) == 8
    assert {c for a, c in cells if a == "variant"} == {"SF", "IrSF", "IeSF"}
    assert {c for a, c in cells if a == "branch"} == {
        "w/o HPF", "w/o ADD", "w/o MUL", "w/o DW", "full"}
    for r in rows[1:]:
        for v in r[2:]:
            assert np.isfinite(float(v))
    assert (tmp_path / "ablation.png").is_file()


def test_exit_codes(workdir, tmp_path, capsys):
    assert console_main(["train", "--config",
                         str(tmp_path / "missing.cfg")]) == 2
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"XXXX")
    assert console_main(["fuse", "--ckpt", str(bad),
                         str(workdir / "data" / "ivf" / "p0_a.pgm"),
                         str(workdir / "data" / "ivf" / "p0_b.pgm"),
                         "-o", str(tmp_path / "x.pgm")]) == 2
    odd = tmp_path / "odd.cfg"
    odd.write_text("backbone.D = 7\n", encoding="utf-8")
    assert console_main(["train", "--config", str(odd)]) == 1
    small = tmp_path / "small.pgm"
    write_image(small, np.full((8, 8), 0.5))
    assert console_main(["fuse", "--ckpt",
                         str(workdir / "run" / "model.ckpt"),
                         str(workdir / "data" / "ivf" / "p0_a.pgm"),
                         str(small), "-o", str(tmp_path / "x.pgm")]) == 1
    capsys.readouterr()


def test_no_command_accepts_a_task_flag():
    parser = build_parser()
    subs = [a for a in parser._actions
            if isinstance(a, argparse._SubParsersAction)]
    assert len(subs) == 1
    for name, sp in subs[0].choices.items():
        assert "--task" not in sp._option_string_actions, name


def test_unknown_command_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        console_main(["frobnicate"])
    assert exc.value.code == 2
    capsys.readouterr()
