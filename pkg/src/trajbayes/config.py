"""Plain-text ``key = value`` run configuration.

Blank lines and ``#`` comments are ignored. Unknown keys are rejected and
every value is range-checked when the file is loaded. ``TB_SEED`` in the
environment overrides ``seed``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .segnet import NetConfig
from .synthdata import PhantomParams
from .trainer import SCHEDULES, TrainConfig

METHODS = ("vanilla", "temp", "swa", "mcdropout", "deepens", "ckpt-single", "ckpt-multi")


class ConfigError(ValueError):
    pass


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _frac(lo, hi, lo_open=False, hi_open=False):
    def check(v):
        if (v < lo or (lo_open and v == lo)) or (v > hi or (hi_open and v == hi)):
            lb = "(" if lo_open else "["
            rb = ")" if hi_open else "]"
            raise ValueError(f"must lie in {lb}{lo}, {hi}{rb}")
    return check


def _pos(v):
    if v <= 0:
        raise ValueError("must be positive")


def _nonneg(v):
    if v < 0:
        raise ValueError("must be non-negative")


def _choice(options):
    def check(v):
        if v not in options:
            raise ValueError(f"must be one of {options}")
    return check


# key -> (parser, validator)
SCHEMA = {
    "seed": (int, _frac(0, 2**64 - 1)),
    # network
    "in_channels": (int, _pos),
    "num_classes": (int, _frac(2, 64)),
    "base_width": (int, _pos),
    "depth": (int, _frac(1, 6)),
    "dropout_p": (float, _frac(0.0, 1.0, hi_open=True)),
    # training
    "epochs": (int, _pos),
    "cycles": (int, _pos),
    "gamma": (float, _frac(0.0, 1.0, True, True)),
    "alpha0": (float, _pos),
    "alpha_r": (float, _pos),
    "epsilon": (float, _pos),
    "batch_size": (int, _pos),
    "momentum": (float, _frac(0.0, 1.0, hi_open=True)),
    "nesterov": (_bool, None),
    "weight_decay": (float, _nonneg),
    "lr_denominator": (str, _choice(("T", "Tc"))),
    "ckpt_stride": (int, _pos),
    "augment": (_bool, None),
    "schedule": (str, _choice(SCHEDULES)),
    # data
    "image_size": (int, _frac(16, 1024)),
    "n_train": (int, _pos),
    "n_val_id": (int, _pos),
    "n_test_ood_a": (int, _pos),
    "n_test_ood_b": (int, _pos),
    "noise_sd": (float, _nonneg),
    "bias_amplitude": (float, _nonneg),
    "small_rv_fraction": (float, _frac(0.0, 1.0)),
    "absent_rv_fraction": (float, _frac(0.0, 1.0)),
    # methods
    "method": (str, _choice(METHODS)),
    "ens_n": (int, _pos),
    "ens_stride": (int, _pos),
    "tau": (float, _pos),
    "mc_n": (int, _pos),
    # paths
    "data_dir": (str, None),
    "train_data": (str, None),
}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    in_channels: int = 1
    num_classes: int = 4
    base_width: int = 8
    depth: int = 3
    dropout_p: float = 0.0
    epochs: int = 1200
    cycles: int = 3
    gamma: float = 0.8
    alpha0: float = 0.01
    alpha_r: float = 0.1
    epsilon: float = 0.9
    batch_size: int = 20
    momentum: float = 0.99
    nesterov: bool = True
    weight_decay: float = 3e-5
    lr_denominator: str = "T"
    ckpt_stride: int = 1
    augment: bool = True
    schedule: str = "cyclical"
    image_size: int = 64
    n_train: int = 200
    n_val_id: int = 50
    n_test_ood_a: int = 25
    n_test_ood_b: int = 25
    noise_sd: float = 0.04
    bias_amplitude: float = 0.10
    small_rv_fraction: float = 0.10
    absent_rv_fraction: float = 0.0
    method: str = "ckpt-multi"
    ens_n: int = 30
    ens_stride: int = 2
    tau: float = 1.5
    mc_n: int = 30
    data_dir: str = "data"
    train_data: str = ""

    def net_config(self) -> NetConfig:
        return NetConfig(self.in_channels, self.num_classes, self.base_width, self.depth, self.dropout_p)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, cycles=self.cycles, gamma=self.gamma, alpha0=self.alpha0,
            alpha_r=self.alpha_r, epsilon=self.epsilon, batch_size=self.batch_size,
            momentum=self.momentum, nesterov=self.nesterov, weight_decay=self.weight_decay,
            lr_denominator=self.lr_denominator, ckpt_stride=self.ckpt_stride,
            augment=self.augment, seed=self.seed)

    def phantom_params(self) -> PhantomParams:
        return PhantomParams(size=self.image_size, noise_sd=self.noise_sd, bias_amplitude=self.bias_amplitude,
                             small_rv_fraction=self.small_rv_fraction, absent_rv_fraction=self.absent_rv_fraction)

    def train_data_path(self) -> Path:
        return Path(self.train_data) if self.train_data else Path(self.data_dir) / "train.tbd"

    def split_counts(self) -> dict[str, int]:
        return {"train": self.n_train, "val_id": self.n_val_id,
                "test_ood_a": self.n_test_ood_a, "test_ood_b": self.n_test_ood_b}

    def validate(self) -> "RunConfig":
        """Cross-field checks, surfaced as ConfigError naming the offending key."""
        for f in fields(self):
            _, check = SCHEMA[f.name]
            if check is not None:
                try:
                    check(getattr(self, f.name))
                except ValueError as exc:
                    raise ConfigError(f"{f.name}: {exc}") from None
        if self.epochs % self.cycles:
            raise ConfigError(f"epochs: {self.epochs} is not divisible by cycles={self.cycles}")
        if self.image_size % 2**self.depth:
            raise ConfigError(f"image_size: {self.image_size} is not divisible by 2**depth={2**self.depth}")
        try:
            self.net_config(), self.train_config(), self.phantom_params()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n" for f in fields(self))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        parser, _ = SCHEMA[key]
        try:
            values[key] = parser(val)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: {key}: {exc}") from None
    cfg = RunConfig(**values)
    env_seed = os.environ.get("TB_SEED")
    if env_seed is not None:
        try:
            cfg = replace(cfg, seed=int(env_seed))
        except ValueError:
            raise ConfigError(f"TB_SEED: not an integer: {env_seed!r}") from None
    return cfg.validate()


def load_config(path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from None
    return parse_config(text, str(p))
