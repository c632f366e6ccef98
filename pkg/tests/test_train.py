"""Training loop: determinism, logging, cadences, and failure handling."""

import csv
import os

import numpy as np
import pytest

from unifusion.autograd import DomainError, NumericsError
from unifusion.backbone import BackboneConfig
from unifusion.checkpoint import load_checkpoint
from unifusion.config import RunConfig
from unifusion.data import default_specs, gen_pair, quantize, write_image
from unifusion.train import (CONFLICT_LOG, FINAL_CKPT, LOSS_LOG, train_run,
                             write_loss_log)


def tiny_cfg(**kw):
    base = dict(
        backbone=BackboneConfig(l_blocks=1, d=8, window=4),
        tasks=("ivf", "mef", "mff"), batch=3, iterations=4, seed=11,
        data_height=16, data_width=16, checkpoint_every=2, conflict_every=2)
    base.update(kw)
    return RunConfig(**base)


class TestLoop:
    def test_histories_have_run_shape(self):
        res = train_run(tiny_cfg())
        assert res.losses.shape == (4, 3)
        assert res.weights.shape == (4, 3)
        assert res.z.shape == (4, 3)
        assert np.all(res.losses > 0)
        assert np.all(np.isfinite(res.losses))

    def test_weights_sum_to_one(self):
        res = train_run(tiny_cfg())
        assert np.allclose(res.weights.sum(axis=1), 1.0, atol=1e-12)

    def test_equal_mode_is_uniform(self):
        res = train_run(tiny_cfg(mo_mode="equal"))
        assert np.array_equal(res.weights, np.full((4, 3), 1.0 / 3.0))
        assert np.array_equal(res.famo.xi, np.zeros(3))

    def test_two_runs_are_bit_identical(self):
        a = train_run(tiny_cfg())
        b = train_run(tiny_cfg())
        assert np.array_equal(a.losses, b.losses)
        for ta, tb in zip(a.params.parameters(), b.params.parameters()):
            assert ta.data.tobytes() == tb.data.tobytes()

    def test_seed_changes_trajectory(self):
        a = train_run(tiny_cfg())
        b = train_run(tiny_cfg(seed=12))
        assert not np.array_equal(a.losses, b.losses)

    def test_conflict_cadence(self):
        res = train_run(tiny_cfg())
        assert [r.iteration for r in res.conflicts] == [0, 2]

    def test_single_task_famo_equals_equal_mode(self):
        famo = train_run(tiny_cfg(tasks=("mef",), batch=1, mo_mode="famo"))
        equal = train_run(tiny_cfg(tasks=("mef",), batch=1, mo_mode="equal"))
        for ta, tb in zip(famo.params.parameters(), equal.params.parameters()):
            assert ta.data.tobytes() == tb.data.tobytes()
        assert np.array_equal(famo.weights, np.ones((4, 1)))

    def test_batch_smaller_than_task_count(self):
        with pytest.raises(DomainError, match="batch"):
            train_run(tiny_cfg(batch=2))

    def test_divergence_names_iteration_and_task(self):
        # A giant step size overflows the parameters after one update, so
        # the next iteration's first task forward must abort with context.
        cfg = tiny_cfg(alpha=1e300)
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(NumericsError, match=r"iteration 1.*'ivf'"):
                train_run(cfg)


class TestArtifacts:
    def test_checkpoints_and_logs_written(self, tmp_path):
        out = tmp_path / "run"
        res = train_run(tiny_cfg(), out_dir=out)
        names = sorted(os.listdir(out))
        assert names == ["ckpt_000002.bin", "ckpt_000004.bin",
                         CONFLICT_LOG, LOSS_LOG, FINAL_CKPT]
        final = load_checkpoint(out / FINAL_CKPT)
        assert final.iteration == 4
        for (na, ta), (nb, tb) in zip(final.params.named_parameters(),
                                      res.params.named_parameters()):
            assert na == nb
            assert np.array_equal(ta.data, tb.data)

    def test_periodic_checkpoint_iteration_field(self, tmp_path):
        out = tmp_path / "run"
        train_run(tiny_cfg(), out_dir=out)
        assert load_checkpoint(out / "ckpt_000002.bin").iteration == 2

    def test_loss_log_schema(self, tmp_path):
        out = tmp_path / "run"
        res = train_run(tiny_cfg(), out_dir=out)
        with open(out / LOSS_LOG, newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["iteration", "loss_ivf", "loss_mef", "loss_mff",
                           "z_ivf", "z_mef", "z_mff",
                           "w_ivf", "w_mef", "w_mff"]
        assert len(rows) == 1 + 4
        assert float(rows[1][1]) == res.losses[0, 0]
        assert float(rows[4][9]) == res.weights[3, 2]

    def test_conflict_log_schema(self, tmp_path):
        out = tmp_path / "run"
        res = train_run(tiny_cfg(), out_dir=out)
        with open(out / CONFLICT_LOG, newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["iteration", "task_i", "task_j", "angle_deg",
                           "norm_i", "norm_j"]
        assert len(rows) == 1 + len(res.conflicts) * 3
        assert rows[1][:3] == ["0", "ivf", "mef"]
        assert 0.0 <= float(rows[1][3]) <= 180.0
        assert float(rows[1][4]) > 0

    def test_loss_log_round_trips_exactly(self, tmp_path):
        res = train_run(tiny_cfg())
        path = tmp_path / "log.csv"
        write_loss_log(path, res)
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        back = np.array([[float(v) for v in row[1:4]] for row in rows])
        assert np.array_equal(back, res.losses)


class TestDatasetSource:
    def write_pool(self, root, task, n):
        spec = default_specs(16, 16, (task,))[0]
        os.makedirs(root / task)
        for k in range(n):
            s = gen_pair(spec, seed=100 + k)
            write_image(root / task / f"p{k}_a.pgm", quantize(s.i1))
            write_image(root / task / f"p{k}_b.pgm", quantize(s.i2))

    def test_trains_from_directory(self, tmp_path):
        for task in ("ivf", "mef"):
            self.write_pool(tmp_path, task, 3)
        cfg = tiny_cfg(tasks=("ivf", "mef"), batch=2, iterations=2,
                       data_root=str(tmp_path))
        res = train_run(cfg)
        assert res.losses.shape == (2, 2)
        assert np.all(np.isfinite(res.losses))

    def test_missing_task_pool_rejected(self, tmp_path):
        self.write_pool(tmp_path, "ivf", 2)
        cfg = tiny_cfg(tasks=("ivf", "mef"), batch=2, iterations=1,
                       data_root=str(tmp_path))
        with pytest.raises(DomainError, match="mef"):
            train_run(cfg)
