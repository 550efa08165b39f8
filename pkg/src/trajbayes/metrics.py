"""Dice, entropy maps and foreground-box expected calibration error."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .segnet import ProbabilisticPrediction

N_BINS = 100
BIN_EDGES = np.arange(N_BINS + 1, dtype=np.float64) / N_BINS


@dataclass
class UncertaintyMap:
    """Per-voxel predictive entropy in bits, shape (H, W)."""

    ent: np.ndarray


def entropy_map(pred: ProbabilisticPrediction) -> UncertaintyMap:
    """Shannon entropy (base 2) over classes, with 0 log 0 = 0."""
    p = pred.probs.astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log2(np.where(p > 0, p, 1.0)), 0.0)
    ent = np.clip(terms.sum(axis=0), 0.0, math.log2(pred.num_classes))
    return UncertaintyMap(ent.astype(np.float32))


def dice(pred_labels: np.ndarray, gt: np.ndarray, k: int) -> float:
    """``2|A & B| / (|A| + |B|)`` for class ``k``; 1.0 when both masks are empty."""
    if pred_labels.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred_labels.shape} vs {gt.shape}")
    a = pred_labels == k
    b = gt == k
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


@dataclass(frozen=True)
class Region:
    """Inclusive axis-aligned box: ``bounds[i] = (lo, hi)`` for axis i."""

    bounds: tuple[tuple[int, int], ...]

    def slices(self) -> tuple[slice, ...]:
        return tuple(slice(lo, hi + 1) for lo, hi in self.bounds)

    @property
    def size(self) -> int:
        return int(np.prod([hi - lo + 1 for lo, hi in self.bounds]))


def foreground_bbox(gt: np.ndarray) -> Region:
    """Tightest box holding every voxel with ``gt > 0`` (any dimensionality)."""
    fg = np.nonzero(gt > 0)
    if len(fg[0]) == 0:
        raise ValueError("volume has no foreground voxels")
    return Region(tuple((int(ax.min()), int(ax.max())) for ax in fg))


@dataclass
class ReliabilityBins:
    """Per-bin voxel count, mean confidence and accuracy; bin s covers ((s-1)%, s%]."""

    counts: np.ndarray
    confidence: np.ndarray
    accuracy: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def weights(self) -> np.ndarray:
        return self.counts / max(self.total, 1)

    def to_dict(self) -> dict:
        nz = np.nonzero(self.counts)[0]
        return {
            "n_bins": len(self.counts),
            "bins": [{"bin": int(s + 1), "count": int(self.counts[s]),
                      "confidence": float(self.confidence[s]), "accuracy": float(self.accuracy[s])}
                     for s in nz],
        }


def confidence_bin(conf: np.ndarray) -> np.ndarray:
    """0-based bin index s-1 with ``edges[s-1] < conf <= edges[s]``."""
    idx = np.searchsorted(BIN_EDGES, conf, side="left") - 1
    return np.clip(idx, 0, N_BINS - 1)


def _region_voxels(pred: ProbabilisticPrediction, gt: np.ndarray, region: Region | None):
    probs = pred.probs
    if probs.shape[1:] != gt.shape:
        raise ValueError(f"prediction {probs.shape} does not match label {gt.shape}")
    if region is not None:
        sl = region.slices()
        probs = probs[(slice(None),) + sl]
        gt = gt[sl]
    conf = probs.max(axis=0).astype(np.float64).ravel()
    correct = (probs.argmax(axis=0) == gt).ravel()
    return conf, correct


def reliability_bins(conf: np.ndarray, correct: np.ndarray) -> ReliabilityBins:
    idx = confidence_bin(conf)
    # sort within bins so the float sums do not depend on voxel order
    order = np.lexsort((correct, conf, idx))
    idx, conf, correct = idx[order], conf[order], correct[order].astype(np.float64)
    counts = np.bincount(idx, minlength=N_BINS)
    conf_sum = np.bincount(idx, weights=conf, minlength=N_BINS)
    acc_sum = np.bincount(idx, weights=correct, minlength=N_BINS)
    safe = np.maximum(counts, 1)
    return ReliabilityBins(counts, conf_sum / safe, acc_sum / safe)


def ece_from_bins(bins: ReliabilityBins) -> float:
    """Percent ECE; empty bins contribute nothing."""
    if bins.total == 0:
        raise ValueError("no voxels to evaluate")
    gap = np.abs(bins.confidence - bins.accuracy)
    return float(100.0 * (bins.weights() * gap).sum())


def ece(preds: list[ProbabilisticPrediction], gts: list[np.ndarray], regions: list[Region | None] | None = None) -> tuple[float, ReliabilityBins]:
    """Voxels pooled over all volumes (inside each volume's region), 100 bins."""
    if not preds:
        raise ValueError("empty prediction set")
    if len(preds) != len(gts):
        raise ValueError("preds and gts differ in length")
    regions = [None] * len(preds) if regions is None else regions
    parts = [_region_voxels(p, g, r) for p, g, r in zip(preds, gts, regions)]
    conf = np.concatenate([c for c, _ in parts])
    correct = np.concatenate([k for _, k in parts])
    bins = reliability_bins(conf, correct)
    return ece_from_bins(bins), bins


def region_mean(values: np.ndarray, mask: np.ndarray) -> float:
    if not mask.any():
        return float("nan")
    return float(values[mask].astype(np.float64).mean())


@dataclass
class EvaluationReport:
    """One method on one split: Dice per foreground class and pooled ECE."""

    method: str
    split: str
    n_volumes: int
    dice_mean: dict[str, float]
    dice_sd: dict[str, float]
    ece_percent: float
    per_volume_ece: list[float]
    bins: ReliabilityBins
    excluded: list[int] = field(default_factory=list)

    @property
    def mean_foreground_dice(self) -> float:
        return float(np.mean(list(self.dice_mean.values())))

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "split": self.split,
            "n_volumes": self.n_volumes,
            "dice_mean": self.dice_mean,
            "dice_sd": self.dice_sd,
            "mean_foreground_dice": self.mean_foreground_dice,
            "ece_percent": self.ece_percent,
            "per_volume_ece": self.per_volume_ece,
            "excluded_volumes": self.excluded,
            "reliability": self.bins.to_dict(),
        }


def evaluate(method: str, split: str, preds: list[ProbabilisticPrediction], gts: list[np.ndarray],
             class_names: dict[int, str], keys: list[int] | None = None) -> EvaluationReport:
    """Score one method on one split.

    ``keys`` (e.g. sample seeds) fix a canonical volume order before any
    floating-point aggregation, so the result does not depend on input order.
    Volumes with no foreground are left out of ECE with a warning.
    """
    if len(preds) != len(gts) or not preds:
        raise ValueError("need equally many (>0) predictions and labels")
    order = np.argsort(np.asarray(keys), kind="stable") if keys is not None else np.arange(len(preds))
    preds = [preds[i] for i in order]
    gts = [gts[i] for i in order]
    kept_keys = [int(keys[i]) for i in order] if keys is not None else list(range(len(preds)))

    scores = {name: [] for name in class_names.values()}
    for p, g in zip(preds, gts):
        lab = p.labels()
        for k, name in class_names.items():
            scores[name].append(dice(lab, g, k))

    ece_preds, ece_gts, regions, per_volume, excluded = [], [], [], [], []
    for key, p, g in zip(kept_keys, preds, gts):
        try:
            r = foreground_bbox(g)
        except ValueError:
            warnings.warn(f"volume {key} has no foreground; excluded from ECE")
            excluded.append(key)
            continue
        ece_preds.append(p)
        ece_gts.append(g)
        regions.append(r)
        per_volume.append(ece([p], [g], [r])[0])
    ece_pct, bins = ece(ece_preds, ece_gts, regions)
    return EvaluationReport(
        method=method,
        split=split,
        n_volumes=len(preds),
        dice_mean={k: float(np.mean(v)) for k, v in scores.items()},
        dice_sd={k: float(np.std(v)) for k, v in scores.items()},
        ece_percent=ece_pct,
        per_volume_ece=per_volume,
        bins=bins,
        excluded=excluded,
    )
