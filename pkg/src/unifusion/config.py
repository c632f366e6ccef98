"""Run configuration: a flat key = value file mapped onto one dataclass.

The file format is deliberately tiny: UTF-8 text, one `key = value` pair
per line, `#` starts a comment, keys are dotted paths like `backbone.D`.
Serialization is canonical (fixed key order, shortest round-trip float
repr), so a config embedded in a checkpoint survives save/load byte for
byte.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass

from .autograd import DomainError
from .backbone import BackboneConfig
from .data import FormatError, TRAIN_TASKS

MO_MODES = ("famo", "equal")

SEED_ENV_VAR = "TITA_SEED"


@dataclass
class RunConfig:
    """Everything a training or ablation run needs, with desk-scale defaults.

    The published operating point (alpha 2e-5, batch 8, 20000 iterations)
    is reachable by overriding train.* keys.
    """

    backbone: BackboneConfig = dataclasses.field(default_factory=BackboneConfig)
    tasks: tuple[str, ...] = ("ivf", "mef", "mff")
    alpha: float = 1e-3
    batch: int = 4
    iterations: int = 1000
    seed: int = 0
    mo_mode: str = "famo"
    famo_beta: float = 0.025
    famo_gamma: float = 1e-3
    checkpoint_every: int = 250
    conflict_every: int = 50
    data_height: int = 64
    data_width: int = 64
    data_root: str = ""
    out_dir: str = "runs/desk"

    def __post_init__(self):
        if not self.tasks:
            raise DomainError("RunConfig: need at least one task")
        for t in self.tasks:
            if t not in TRAIN_TASKS:
                raise DomainError(f"RunConfig: unknown task {t!r}, expected one "
                                  f"of {TRAIN_TASKS}")
        if len(set(self.tasks)) != len(self.tasks):
            raise DomainError(f"RunConfig: duplicate task in {self.tasks}")
        if self.mo_mode not in MO_MODES:
            raise DomainError(f"RunConfig: mo_mode {self.mo_mode!r} not in {MO_MODES}")
        if self.alpha <= 0:
            raise DomainError("RunConfig: train.alpha must be positive")
        if self.batch < 1:
            raise DomainError("RunConfig: train.batch must be >= 1")
        if self.iterations < 1:
            raise DomainError("RunConfig: train.iterations must be >= 1")
        if self.famo_beta <= 0:
            raise DomainError("RunConfig: train.famo_beta must be positive")
        if self.famo_gamma < 0:
            raise DomainError("RunConfig: train.famo_gamma must be >= 0")
        if self.checkpoint_every < 1 or self.conflict_every < 1:
            raise DomainError("RunConfig: logging cadences must be >= 1")
        if self.data_height < 16 or self.data_width < 16:
            raise DomainError("RunConfig: data size must be at least 16x16")


def _fmt_bool(v: bool) -> str:
    return "true" if v else "false"


def _parse_bool(key: str, raw: str) -> bool:
    if raw == "true":
        return True
    if raw == "false":
        return False
    raise FormatError(f"config: {key} must be true or false, got {raw!r}")


def _parse_int(key: str, raw: str) -> int:
    try:
        return int(raw)
    except ValueError:
        raise FormatError(f"config: {key} must be an integer, got {raw!r}") from None


def _parse_float(key: str, raw: str) -> float:
    try:
        return float(raw)
    except ValueError:
        raise FormatError(f"config: {key} must be a number, got {raw!r}") from None


def parse_kv(text: str) -> dict[str, str]:
    """Parse `key = value` lines into an ordered dict of raw strings."""
    pairs: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"config line {lineno}: expected 'key = value', "
                              f"got {raw.strip()!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        value = value.strip()
        if not key:
            raise FormatError(f"config line {lineno}: empty key")
        if key in pairs:
            raise FormatError(f"config line {lineno}: duplicate key {key!r}")
        pairs[key] = value
    return pairs


def config_from_text(text: str) -> RunConfig:
    """Build a RunConfig from config-file text, defaulting missing keys."""
    pairs = parse_kv(text)
    base = RunConfig()
    bb = base.backbone

    def take(key, default, conv):
        raw = pairs.pop(key, None)
        return default if raw is None else conv(key, raw)

    backbone = BackboneConfig(
        l_blocks=take("backbone.L", bb.l_blocks, _parse_int),
        d=take("backbone.D", bb.d, _parse_int),
        window=take("backbone.window", bb.window, _parse_int),
        variant=take("backbone.variant", bb.variant, lambda k, r: r),
        use_ipa=take("backbone.use_ipa", bb.use_ipa, _parse_bool),
        mlp_ratio=take("backbone.mlp_ratio", bb.mlp_ratio, _parse_float),
    )
    raw_tasks = pairs.pop("tasks", None)
    if raw_tasks is None:
        tasks = base.tasks
    else:
        tasks = tuple(t.strip() for t in raw_tasks.split(",") if t.strip())
    cfg = RunConfig(
        backbone=backbone,
        tasks=tasks,
        alpha=take("train.alpha", base.alpha, _parse_float),
        batch=take("train.batch", base.batch, _parse_int),
        iterations=take("train.iterations", base.iterations, _parse_int),
        seed=take("train.seed", base.seed, _parse_int),
        mo_mode=take("train.mo_mode", base.mo_mode, lambda k, r: r),
        famo_beta=take("train.famo_beta", base.famo_beta, _parse_float),
        famo_gamma=take("train.famo_gamma", base.famo_gamma, _parse_float),
        checkpoint_every=take("train.checkpoint_every", base.checkpoint_every,
                              _parse_int),
        conflict_every=take("train.conflict_every", base.conflict_every,
                            _parse_int),
        data_height=take("data.height", base.data_height, _parse_int),
        data_width=take("data.width", base.data_width, _parse_int),
        data_root=take("data.root", base.data_root, lambda k, r: r),
        out_dir=take("out.dir", base.out_dir, lambda k, r: r),
    )
    if pairs:
        raise FormatError(f"config: unknown key {next(iter(pairs))!r}")
    return cfg


def config_to_text(cfg: RunConfig) -> str:
    """Serialize a RunConfig to its canonical config-file text."""
    bb = cfg.backbone
    lines = [
        f"backbone.L = {bb.l_blocks}",
        f"backbone.D = {bb.d}",
        f"backbone.window = {bb.window}",
        f"backbone.variant = {bb.variant}",
        f"backbone.use_ipa = {_fmt_bool(bb.use_ipa)}",
        f"backbone.mlp_ratio = {bb.mlp_ratio!r}",
        f"tasks = {','.join(cfg.tasks)}",
        f"train.alpha = {cfg.alpha!r}",
        f"train.batch = {cfg.batch}",
        f"train.iterations = {cfg.iterations}",
        f"train.seed = {cfg.seed}",
        f"train.mo_mode = {cfg.mo_mode}",
        f"train.famo_beta = {cfg.famo_beta!r}",
        f"train.famo_gamma = {cfg.famo_gamma!r}",
        f"train.checkpoint_every = {cfg.checkpoint_every}",
        f"train.conflict_every = {cfg.conflict_every}",
        f"data.height = {cfg.data_height}",
        f"data.width = {cfg.data_width}",
        f"data.root = {cfg.data_root}",
        f"out.dir = {cfg.out_dir}",
    ]
    return "\n".join(lines) + "\n"


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return config_from_text(fh.read())


def save_config(path, cfg: RunConfig) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(config_to_text(cfg))


def seed_override(environ=os.environ) -> int | None:
    """The seed forced by the environment, if any."""
    raw = environ.get(SEED_ENV_VAR)
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError:
        raise FormatError(f"{SEED_ENV_VAR} must be an integer, got {raw!r}") from None


def apply_seed_override(cfg: RunConfig, environ=os.environ) -> RunConfig:
    """A copy of cfg with the seed replaced when the env var is set."""
    seed = seed_override(environ)
    if seed is None:
        return cfg
    return dataclasses.replace(cfg, seed=seed)
