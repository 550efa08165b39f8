"""Bayesian predictors built from SGD checkpoints, plus the comparison baselines."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .segnet import NetConfig, ProbabilisticPrediction, SegNet, build, predict_proba
from .synthdata import Dataset
from .tensor import DTYPE, ParamSet, Rng, is_buffer, require_compatible
from .trainer import CheckpointRecord, CheckpointStore, TrainConfig, train

__all__ = [
    "CheckpointStore", "EnsembleSpec", "ProbabilisticPrediction", "select_records", "select_members",
    "ensemble_predict", "ensemble_predict_batch", "swa_average", "bn_recalibrate", "mc_dropout_predict",
    "mc_dropout_predict_batch", "temperature_scale", "deep_ensemble_train", "predict_batch",
]

PREDICT_CHUNK = 25


class InsufficientCheckpoints(ValueError):
    pass


@dataclass(frozen=True)
class EnsembleSpec:
    mode: str = "single"  # "single" | "multi"
    n: int = 30
    stride: int = 2

    def __post_init__(self):
        if self.mode not in ("single", "multi"):
            raise ValueError(f"mode must be 'single' or 'multi', got {self.mode!r}")
        if self.n < 1 or self.stride < 1:
            raise ValueError("n and stride must be >= 1")


def select_records(store: CheckpointStore, spec: EnsembleSpec) -> list[CheckpointRecord]:
    """Members in ascending epoch order.

    single: ``n`` checkpoints of the last cycle at epochs ``E, E-s, E-2s, ...``
    counted back from the final epoch ``E``. multi: the newest ``n / M``
    checkpoints of every cycle.
    """
    if len(store) == 0:
        raise InsufficientCheckpoints("checkpoint store is empty")
    if spec.mode == "single":
        last = store.cycle(store.cycles)
        if not last:
            raise InsufficientCheckpoints("last cycle has no checkpoints")
        by_epoch = {r.epoch: r for r in last}
        final = last[-1].epoch
        wanted = [final - i * spec.stride for i in range(spec.n)]
        missing = [e for e in wanted if e not in by_epoch]
        if missing:
            raise InsufficientCheckpoints(
                f"single-modal n={spec.n}, stride={spec.stride} needs epochs down to {wanted[-1]}; "
                f"last cycle holds {last[0].epoch}..{final}")
        return [by_epoch[e] for e in sorted(wanted)]
    if spec.n % store.cycles:
        raise ValueError(f"multi-modal n={spec.n} is not divisible by M={store.cycles}")
    per = spec.n // store.cycles
    out = []
    for c in range(1, store.cycles + 1):
        recs = store.cycle(c)
        if len(recs) < per:
            raise InsufficientCheckpoints(f"cycle {c} holds {len(recs)} checkpoints, need {per}")
        out += recs[-per:]
    return out


def select_members(store: CheckpointStore, spec: EnsembleSpec) -> list[ParamSet]:
    return [r.params for r in select_records(store, spec)]


def predict_batch(net: SegNet, images: np.ndarray, dropout_active: bool = False, rng: Rng | None = None) -> np.ndarray:
    """Probabilities (N, C, H, W) computed in fixed chunks of ``PREDICT_CHUNK``."""
    out = [net.predict_proba_batch(images[i:i + PREDICT_CHUNK], dropout_active, rng)
           for i in range(0, len(images), PREDICT_CHUNK)]
    return np.concatenate(out)


def _mean_probs(maps) -> np.ndarray:
    # float64 accumulation in member order; n identical f32 maps average back exactly
    acc, n = None, 0
    for m in maps:
        acc = m.astype(np.float64) if acc is None else acc + m
        n += 1
    return (acc / n).astype(DTYPE)


def _nets(members: list[ParamSet], net_cfg: NetConfig) -> list[SegNet]:
    if not members:
        raise ValueError("ensemble needs at least one member")
    try:
        return [SegNet(net_cfg, m) for m in members]
    except ValueError as exc:
        raise ValueError(f"incompatible ensemble member: {exc}") from exc


def ensemble_predict(members: list[ParamSet], net_cfg: NetConfig, image: np.ndarray) -> ProbabilisticPrediction:
    """Average of member probability maps for one image (dropout off)."""
    nets = _nets(members, net_cfg)
    return ProbabilisticPrediction(_mean_probs(predict_proba(n, image).probs for n in nets))


def ensemble_predict_batch(members: list[ParamSet], net_cfg: NetConfig, images: np.ndarray) -> np.ndarray:
    nets = _nets(members, net_cfg)
    return _mean_probs(predict_batch(n, images) for n in nets)


def swa_average(members: list[ParamSet]) -> ParamSet:
    """Elementwise mean of weights; batchnorm statistics reset and flagged stale."""
    if not members:
        raise ValueError("swa_average needs at least one member")
    require_compatible(*members)
    out = {}
    for k in members[0]:
        if is_buffer(k):
            fill = 1.0 if k.endswith("running_var") else 0.0
            out[k] = np.full_like(members[0][k], fill)
        else:
            out[k] = _mean_probs(m[k] for m in members)
    return ParamSet(out, bn_stale=True)


def bn_recalibrate(net: SegNet, data: Dataset, batch_size: int = 20) -> SegNet:
    """One ordered pass over ``data`` re-estimating batchnorm running statistics.

    Statistics are the cumulative average of per-batch statistics; all other
    parameters are left bit-identical.
    """
    if len(data) == 0:
        raise ValueError("bn_recalibrate needs a non-empty dataset")
    params = net.params.copy()
    for k in params:
        if is_buffer(k):
            params[k][...] = 1.0 if k.endswith("running_var") else 0.0
    work = SegNet(net.config, params)
    for i, start in enumerate(range(0, len(data), batch_size)):
        x = np.ascontiguousarray(data.images[start:start + batch_size].transpose(0, 2, 3, 1))
        work.forward(x, train_bn=True, bn_momentum=None, stats_count=i)
    params.bn_stale = False
    return work


def mc_dropout_predict(net: SegNet, image: np.ndarray, n: int, rng: Rng) -> ProbabilisticPrediction:
    """Mean of ``n`` forward passes with dropout forced on."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return ProbabilisticPrediction(_mean_probs(
        predict_proba(net, image, dropout_active=True, rng=rng).probs for _ in range(n)))


def mc_dropout_predict_batch(net: SegNet, images: np.ndarray, n: int, rng: Rng) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be >= 1")
    return _mean_probs(predict_batch(net, images, dropout_active=True, rng=rng) for _ in range(n))


def temperature_scale(pred_logits: np.ndarray, tau: float) -> ProbabilisticPrediction:
    """softmax(logits / tau) over the class axis of (C, H, W) logits."""
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    z = pred_logits.astype(np.float64) / tau
    e = np.exp(z - z.max(axis=0, keepdims=True))
    return ProbabilisticPrediction((e / e.sum(axis=0, keepdims=True)).astype(DTYPE))


def deep_ensemble_train(base_cfg: NetConfig, train_cfg: TrainConfig, data: Dataset, k: int, seeds: list[int],
                        schedule: str = "poly") -> list[SegNet]:
    """``k`` independently initialised and trained single-cycle models."""
    if k < 1 or len(seeds) != k:
        raise ValueError(f"need k >= 1 and exactly k seeds, got k={k}, {len(seeds)} seeds")
    if len(set(seeds)) != k:
        raise ValueError(f"seed collision in {seeds}; deep-ensemble members need distinct seeds")
    nets = []
    for s in seeds:
        cfg = replace(train_cfg, seed=s)
        nets.append(train(build(base_cfg, Rng(s)), data, cfg, schedule).net)
    return nets
