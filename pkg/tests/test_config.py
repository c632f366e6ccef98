"""Config file parsing, canonical serialization, and the seed override."""

import dataclasses

import pytest

from unifusion.autograd import DomainError
from unifusion.config import (RunConfig, apply_seed_override, config_from_text,
                              config_to_text, load_config, parse_kv,
                              save_config, seed_override)
from unifusion.data import FormatError


class TestParseKv:
    def test_basic_pairs(self):
        pairs = parse_kv("a = 1\nb.c = two\n")
        assert pairs == {"a": "1", "b.c": "two"}

    def test_comments_and_blanks(self):
        text = "# full line\n\na = 1  # trailing\n   \n"
        assert parse_kv(text) == {"a": "1"}

    def test_missing_equals(self):
        with pytest.raises(FormatError, match="line 2"):
            parse_kv("a = 1\nbogus line\n")

    def test_duplicate_key(self):
        with pytest.raises(FormatError, match="duplicate"):
            parse_kv("a = 1\na = 2\n")

    def test_empty_key(self):
        with pytest.raises(FormatError, match="empty key"):
            parse_kv("= 3\n")


class TestRunConfig:
    def test_desk_defaults(self):
        cfg = RunConfig()
        assert cfg.backbone.d == 16
        assert cfg.backbone.l_blocks == 2
        assert cfg.data_height == 64 and cfg.data_width == 64
        assert cfg.batch == 4
        assert cfg.iterations == 1000
        assert cfg.alpha == 1e-3
        assert cfg.mo_mode == "famo"
        assert cfg.tasks == ("ivf", "mef", "mff")

    def test_unknown_task_rejected(self):
        with pytest.raises(DomainError, match="unknown task"):
            RunConfig(tasks=("ivf", "night"))

    def test_duplicate_task_rejected(self):
        with pytest.raises(DomainError, match="duplicate"):
            RunConfig(tasks=("ivf", "ivf"))

    def test_bad_mo_mode(self):
        with pytest.raises(DomainError, match="mo_mode"):
            RunConfig(mo_mode="uniform")

    def test_nonpositive_alpha(self):
        with pytest.raises(DomainError, match="alpha"):
            RunConfig(alpha=0.0)

    def test_tiny_data_rejected(self):
        with pytest.raises(DomainError, match="16x16"):
            RunConfig(data_height=8)


class TestFromText:
    def test_empty_text_gives_defaults(self):
        assert config_from_text("") == RunConfig()

    def test_overrides(self):
        text = ("backbone.D = 8\nbackbone.L = 1\ntasks = ivf,mef\n"
                "train.alpha = 2e-05\ntrain.iterations = 20000\n"
                "train.batch = 8\ntrain.mo_mode = equal\nout.dir = runs/x\n")
        cfg = config_from_text(text)
        assert cfg.backbone.d == 8
        assert cfg.backbone.l_blocks == 1
        assert cfg.tasks == ("ivf", "mef")
        assert cfg.alpha == 2e-5
        assert cfg.iterations == 20000
        assert cfg.batch == 8
        assert cfg.mo_mode == "equal"
        assert cfg.out_dir == "runs/x"

    def test_unknown_key(self):
        with pytest.raises(FormatError, match="unknown key"):
            config_from_text("backbone.depth = 3\n")

    def test_bad_int(self):
        with pytest.raises(FormatError, match="integer"):
            config_from_text("train.batch = four\n")

    def test_bad_bool(self):
        with pytest.raises(FormatError, match="true or false"):
            config_from_text("backbone.use_ipa = yes\n")

    def test_bad_variant_rejected(self):
        with pytest.raises(DomainError, match="variant"):
            config_from_text("backbone.variant = Swin\n")


class TestCanonicalText:
    def test_round_trip_defaults(self):
        cfg = RunConfig()
        assert config_from_text(config_to_text(cfg)) == cfg

    def test_round_trip_non_defaults(self):
        cfg = RunConfig(
            backbone=dataclasses.replace(RunConfig().backbone, d=8, l_blocks=1,
                                         use_ipa=False, variant="SF"),
            tasks=("mef",), alpha=2e-5, batch=8, iterations=20000, seed=99,
            mo_mode="equal", famo_gamma=0.0, data_height=32, data_width=48,
            data_root="sets/desk", out_dir="runs/alt")
        assert config_from_text(config_to_text(cfg)) == cfg

    def test_serialization_is_stable(self):
        cfg = config_from_text("train.seed = 7\n")
        once = config_to_text(cfg)
        again = config_to_text(config_from_text(once))
        assert once == again

    def test_file_round_trip(self, tmp_path):
        cfg = RunConfig(seed=5)
        path = tmp_path / "run.cfg"
        save_config(path, cfg)
        assert load_config(path) == cfg


class TestSeedOverride:
    def test_absent_means_none(self):
        assert seed_override(environ={}) is None

    def test_present_parses(self):
        assert seed_override(environ={"TITA_SEED": "42"}) == 42

    def test_invalid_raises(self):
        with pytest.raises(FormatError, match="TITA_SEED"):
            seed_override(environ={"TITA_SEED": "soon"})

    def test_apply_replaces_seed_only(self):
        cfg = RunConfig(seed=1, batch=6)
        out = apply_seed_override(cfg, environ={"TITA_SEED": "9"})
        assert out.seed == 9
        assert out.batch == 6
        assert apply_seed_override(cfg, environ={}) == cfg
