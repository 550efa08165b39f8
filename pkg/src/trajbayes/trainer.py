"""Training loop, learning-rate policies and checkpoint harvesting."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .segnet import SegNet
from .synthdata import Dataset
from .tensor import ParamSet, Rng

log = logging.getLogger(__name__)

SCHEDULES = ("poly", "constant-tail", "cyclical")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
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
    # "T" divides the in-cycle epoch by the total budget as printed; "Tc" by the cycle length
    lr_denominator: str = "T"
    ckpt_stride: int = 1
    augment: bool = True
    log_weights: str | None = "dec0.conv2.weight"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.cycles < 1:
            raise ValueError("epochs and cycles must be >= 1")
        if self.epochs % self.cycles:
            raise ValueError(f"epochs ({self.epochs}) must be divisible by cycles ({self.cycles})")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.alpha0 <= 0 or self.alpha_r <= 0:
            raise ValueError("alpha0 and alpha_r must be positive")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.batch_size < 1 or self.ckpt_stride < 1:
            raise ValueError("batch_size and ckpt_stride must be >= 1")
        if not 0.0 <= self.momentum < 1.0 or self.weight_decay < 0:
            raise ValueError("momentum must lie in [0, 1) and weight_decay >= 0")
        tc_len = self.epochs // self.cycles
        if math.ceil(self.gamma * tc_len - 1e-9) > tc_len - 1:
            raise ValueError(f"gamma={self.gamma} leaves no checkpoint epochs in a {tc_len}-epoch cycle")
        if self.lr_denominator not in ("T", "Tc"):
            raise ValueError(f"lr_denominator must be 'T' or 'Tc', got {self.lr_denominator!r}")

    @property
    def cycle_length(self) -> int:
        return self.epochs // self.cycles

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------
# schedules


def lr_poly(t: int, T_: int, alpha0: float, epsilon: float) -> float:
    """Polynomial decay ``alpha0 * (1 - t / T) ** epsilon``."""
    if not 0 <= t < T_:
        raise ValueError(f"epoch {t} outside [0, {T_})")
    return alpha0 * (1.0 - t / T_) ** epsilon


def window_start(cycle_length: int, gamma: float) -> int:
    """First in-cycle epoch of the collection window, ``ceil(gamma * Tc)``."""
    # tolerance keeps products like 0.8 * 20 from rounding up past an integer
    return math.ceil(gamma * cycle_length - 1e-9)


def lr_cyclical(t: int, cfg: TrainConfig) -> float:
    """Restart rate on the first epoch of each cycle, clamped poly decay after.

    ``alpha_r`` at in-cycle epoch 0, otherwise
    ``alpha0 * (1 - min(t_c, gamma * Tc) / D) ** epsilon`` with ``D`` the total
    budget (or the cycle length when ``lr_denominator == "Tc"``).
    """
    if not 0 <= t < cfg.epochs:
        raise ValueError(f"epoch {t} outside [0, {cfg.epochs})")
    tc_len = cfg.cycle_length
    t_c = t % tc_len
    if t_c == 0:
        return cfg.alpha_r
    denom = cfg.epochs if cfg.lr_denominator == "T" else tc_len
    plateau = cfg.gamma * tc_len
    # hold the plateau value itself on every window epoch so it is exactly flat
    frac = plateau if t_c >= window_start(tc_len, cfg.gamma) else min(t_c, plateau)
    return cfg.alpha0 * (1.0 - frac / denom) ** cfg.epsilon


def lr_constant_tail(t: int, cfg: TrainConfig) -> float:
    """Poly decay frozen after ``gamma`` of the budget; a single cycle, no restart."""
    if not 0 <= t < cfg.epochs:
        raise ValueError(f"epoch {t} outside [0, {cfg.epochs})")
    plateau = cfg.gamma * cfg.epochs
    frac = plateau if t >= window_start(cfg.epochs, cfg.gamma) else min(t, plateau)
    return cfg.alpha0 * (1.0 - frac / cfg.epochs) ** cfg.epsilon


def learning_rate(t: int, cfg: TrainConfig, schedule: str) -> float:
    if schedule == "cyclical":
        return lr_cyclical(t, cfg)
    if schedule == "constant-tail":
        return lr_constant_tail(t, cfg)
    if schedule == "poly":
        return lr_poly(t, cfg.epochs, cfg.alpha0, cfg.epsilon)
    raise ValueError(f"unknown schedule {schedule!r}; expected one of {SCHEDULES}")


def effective_cycles(cfg: TrainConfig, schedule: str) -> int:
    return cfg.cycles if schedule == "cyclical" else 1


def checkpoint_epochs(cfg: TrainConfig, schedule: str = "cyclical") -> list[int]:
    """Epochs whose end-of-epoch weights are kept: ``ceil(gamma*Tc) <= t mod Tc <= Tc-1``."""
    m = effective_cycles(cfg, schedule)
    tc_len = cfg.epochs // m
    start = window_start(tc_len, cfg.gamma)
    return [t for t in range(cfg.epochs)
            if t % tc_len >= start and (t % tc_len - start) % cfg.ckpt_stride == 0]


# --------------------------------------------------------------------------
# checkpoints


@dataclass
class CheckpointRecord:
    epoch: int
    cycle: int  # 1-based
    t_c: int
    params: ParamSet
    train_loss: float


class CheckpointStore:
    """Checkpoint records grouped by cycle, epochs ascending within each cycle."""

    def __init__(self, cycles: int, cycle_length: int, records: list[CheckpointRecord] = ()):
        self.cycles = cycles
        self.cycle_length = cycle_length
        self._by_cycle: dict[int, list[CheckpointRecord]] = {c: [] for c in range(1, cycles + 1)}
        for r in sorted(records, key=lambda r: r.epoch):
            self.add(r)

    def add(self, rec: CheckpointRecord) -> None:
        if rec.cycle not in self._by_cycle:
            raise ValueError(f"cycle {rec.cycle} outside 1..{self.cycles}")
        if rec.cycle != rec.epoch // self.cycle_length + 1 or rec.t_c != rec.epoch % self.cycle_length:
            raise ValueError(f"inconsistent cycle bookkeeping for epoch {rec.epoch}")
        bucket = self._by_cycle[rec.cycle]
        if bucket and bucket[-1].epoch >= rec.epoch:
            raise ValueError(f"epochs must increase within a cycle ({bucket[-1].epoch} then {rec.epoch})")
        bucket.append(rec)

    def cycle(self, c: int) -> list[CheckpointRecord]:
        return list(self._by_cycle[c])

    @property
    def records(self) -> list[CheckpointRecord]:
        return [r for c in sorted(self._by_cycle) for r in self._by_cycle[c]]

    def __len__(self) -> int:
        return sum(len(v) for v in self._by_cycle.values())

    def final(self) -> CheckpointRecord:
        recs = self.records
        if not recs:
            raise ValueError("checkpoint store is empty")
        return max(recs, key=lambda r: r.epoch)


@dataclass
class TrajectoryLog:
    entries: list[dict] = field(default_factory=list)

    def append(self, t: int, lr: float, loss: float, weights: np.ndarray | None = None) -> None:
        e = {"t": t, "lr": lr, "train_loss": loss}
        if weights is not None:
            e["weights"] = [float(v) for v in weights.ravel()]
        self.entries.append(e)

    def epochs(self) -> list[int]:
        return [e["t"] for e in self.entries]

    def lrs(self) -> list[float]:
        return [e["lr"] for e in self.entries]

    def losses(self) -> list[float]:
        return [e["train_loss"] for e in self.entries]

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for e in self.entries:
                fh.write(json.dumps(e) + "\n")

    @classmethod
    def read_jsonl(cls, path) -> "TrajectoryLog":
        with open(path) as fh:
            return cls([json.loads(line) for line in fh if line.strip()])


# --------------------------------------------------------------------------
# loss and loop


def loss(pred_logits: T.Tensor, label: np.ndarray) -> T.Tensor:
    """Cross-entropy plus soft Dice (foreground classes), equally weighted."""
    return T.add(T.cross_entropy(pred_logits, label), T.soft_dice_loss(pred_logits, label))


def augment(images: np.ndarray, labels: np.ndarray, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    """Random horizontal/vertical flips and a +-10% intensity scale per sample."""
    n = len(images)
    flips = rng.random((n, 2)) < 0.5
    gains = rng.uniform(0.9, 1.1, size=n).astype(np.float32)
    x = images.copy()
    y = labels.copy()
    for i in range(n):
        if flips[i, 0]:
            x[i], y[i] = x[i][..., ::-1], y[i][..., ::-1]
        if flips[i, 1]:
            x[i], y[i] = x[i][..., ::-1, :], y[i][::-1, :]
        x[i] *= gains[i]
    return x, y


@dataclass
class TrainResult:
    net: SegNet
    store: CheckpointStore
    log: TrajectoryLog


def train(net: SegNet, data: Dataset, cfg: TrainConfig, schedule: str = "cyclical", progress=None) -> TrainResult:
    """Run ``cfg.epochs`` epochs of SGD and harvest window checkpoints.

    ``net`` is not modified; the trained network is returned. ``progress``,
    if given, is called as ``progress(t, lr, loss)`` after every epoch.
    """
    if len(data) == 0:
        raise ValueError("training data is empty")
    if data.images.shape[1] != net.config.in_channels:
        raise ValueError("data channels do not match the network config")
    if schedule not in SCHEDULES:
        raise ValueError(f"unknown schedule {schedule!r}; expected one of {SCHEDULES}")

    m = effective_cycles(cfg, schedule)
    tc_len = cfg.epochs // m
    keep = set(checkpoint_epochs(cfg, schedule))
    store = CheckpointStore(m, tc_len)
    traj = TrajectoryLog()

    root = Rng(cfg.seed)
    data_rng, drop_rng = root.child(1), root.child(2)
    params = net.params.copy()
    params.bn_stale = False
    velocity = params.zeros_like()
    n = len(data)

    for t in range(cfg.epochs):
        lr = learning_rate(t, cfg, schedule)
        perm = data_rng.permutation(n)
        batch_losses = []
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            x, y = data.images[idx], data.labels[idx]
            if cfg.augment:
                x, y = augment(x, y, data_rng)
            x = np.ascontiguousarray(x.transpose(0, 2, 3, 1))
            work = SegNet(net.config, params)
            try:
                # overflow surfaces as NonFiniteError, so numpy's own warnings are noise here
                with np.errstate(over="ignore", invalid="ignore"):
                    z, leaves = work.forward(x, train_bn=True, dropout_active=True, rng=drop_rng, track_grad=True)
                    value = loss(z, y.astype(np.int64))
                    grads = T.backward(value, leaves)
            except T.NonFiniteError as exc:
                raise TrainingDiverged(f"non-finite values at epoch {t} (lr={lr:.3g}): {exc}") from exc
            params, velocity = T.sgd_momentum_step(
                params, grads, velocity, lr, cfg.momentum, cfg.weight_decay, cfg.nesterov)
            batch_losses.append(float(value.data))
        epoch_loss = float(np.mean(batch_losses))
        if not math.isfinite(epoch_loss) or not all(np.isfinite(params[k]).all() for k in params):
            raise TrainingDiverged(f"non-finite loss or weights at epoch {t} (lr={lr:.3g})")
        w = params[cfg.log_weights] if cfg.log_weights and cfg.log_weights in params else None
        traj.append(t, lr, epoch_loss, w)
        if t in keep:
            store.add(CheckpointRecord(t, t // tc_len + 1, t % tc_len, params.copy(), epoch_loss))
        if progress is not None:
            progress(t, lr, epoch_loss)
        log.debug("epoch %d lr %.5f loss %.4f", t, lr, epoch_loss)

    return TrainResult(SegNet(net.config, params.copy()), store, traj)
