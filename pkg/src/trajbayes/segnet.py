"""Small 2D U-Net: conv-bn-relu stages, max-pool down, nearest-upsample + conv up."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .tensor import DTYPE, ParamSet, Rng


@dataclass(frozen=True)
class NetConfig:
    in_channels: int = 1
    num_classes: int = 4
    base_width: int = 8
    depth: int = 3
    dropout_p: float = 0.0
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.in_channels < 1:
            raise ValueError("in_channels must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.base_width < 1 or self.depth < 1:
            raise ValueError("base_width and depth must be >= 1")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")

    def widths(self) -> list[int]:
        return [self.base_width * 2**i for i in range(self.depth + 1)]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ProbabilisticPrediction:
    """Per-voxel categorical distribution, ``probs`` shaped (C, H, W)."""

    probs: np.ndarray

    def __post_init__(self):
        if self.probs.ndim != 3:
            raise ValueError(f"probs must be (C, H, W), got {self.probs.shape}")

    @property
    def num_classes(self) -> int:
        return self.probs.shape[0]

    def labels(self) -> np.ndarray:
        # np.argmax returns the first maximum, i.e. ties go to the lowest class
        return self.probs.argmax(axis=0).astype(np.uint8)

    def confidence(self) -> np.ndarray:
        return self.probs.max(axis=0)


def _stage_names(prefix: str) -> list[str]:
    names = []
    for i in (1, 2):
        names += [f"{prefix}.conv{i}.weight", f"{prefix}.conv{i}.bias"]
        names += [f"{prefix}.bn{i}.{k}" for k in ("weight", "bias", "running_mean", "running_var")]
    return names


def _stage_prefixes(cfg: NetConfig) -> list[str]:
    enc = [f"enc{i}" for i in range(cfg.depth)] + ["bottleneck"]
    dec = [f"dec{i}" for i in reversed(range(cfg.depth))]
    return enc + dec


def param_shapes(cfg: NetConfig) -> dict[str, tuple[int, ...]]:
    """Every parameter name and shape, fully determined by the config."""
    w = cfg.widths()
    shapes: dict[str, tuple[int, ...]] = {}

    def conv(name, cin, cout, k=3):
        shapes[f"{name}.weight"] = (cout, cin, k, k)
        shapes[f"{name}.bias"] = (cout,)

    def bn(name, c):
        for k in ("weight", "bias", "running_mean", "running_var"):
            shapes[f"{name}.{k}"] = (c,)

    def stage(prefix, cin, cout):
        conv(f"{prefix}.conv1", cin, cout)
        bn(f"{prefix}.bn1", cout)
        conv(f"{prefix}.conv2", cout, cout)
        bn(f"{prefix}.bn2", cout)

    cin = cfg.in_channels
    for i in range(cfg.depth):
        stage(f"enc{i}", cin, w[i])
        cin = w[i]
    stage("bottleneck", cin, w[cfg.depth])
    for i in reversed(range(cfg.depth)):
        conv(f"dec{i}.up", w[i + 1], w[i])
        bn(f"dec{i}.upbn", w[i])
        stage(f"dec{i}", 2 * w[i], w[i])
    conv("head", w[0], cfg.num_classes, k=1)
    return dict(sorted(shapes.items()))


def init_params(cfg: NetConfig, rng: Rng) -> ParamSet:
    """He-normal conv weights, zero biases, unit bn scale, bn stats (0, 1)."""
    out = {}
    for name, shape in param_shapes(cfg).items():
        leafname = name.rsplit(".", 1)[-1]
        if leafname == "weight" and len(shape) == 4:
            fan_in = shape[1] * shape[2] * shape[3]
            out[name] = rng.normal(shape, scale=np.sqrt(2.0 / fan_in))
        elif leafname in ("weight", "running_var"):
            out[name] = np.ones(shape, dtype=DTYPE)
        else:
            out[name] = np.zeros(shape, dtype=DTYPE)
    return ParamSet(out)


class SegNet:
    """Config plus weights (batchnorm running statistics live in ``params``)."""

    def __init__(self, config: NetConfig, params: ParamSet):
        expected = param_shapes(config)
        if params.shapes() != expected:
            missing = set(expected) ^ set(params)
            raise ValueError(f"params do not match config; differing names: {sorted(missing)[:5]}")
        self.config = config
        self.params = params

    def with_params(self, params: ParamSet) -> "SegNet":
        return SegNet(self.config, params)

    def forward(
        self,
        x: np.ndarray,
        train_bn: bool = False,
        dropout_active: bool = False,
        rng: Rng | None = None,
        track_grad: bool = False,
        bn_momentum: float | None | str = "config",
        stats_count: int = 0,
    ) -> tuple[T.Tensor, dict[str, T.Tensor]]:
        """Logits (N, H, W, C) for a channels-last batch ``x`` (N, H, W, in_channels).

        In ``train_bn`` mode the running statistics in ``self.params`` are
        updated in place. Returns the logits node and the parameter leaves.
        """
        cfg = self.config
        if x.ndim != 4 or x.shape[-1] != cfg.in_channels:
            raise ValueError(f"expected (N, H, W, {cfg.in_channels}) input, got {x.shape}")
        step = 2**cfg.depth
        if x.shape[1] % step or x.shape[2] % step:
            raise ValueError(f"spatial extents {x.shape[1:3]} must be divisible by {step}")
        if self.params.bn_stale and not train_bn:
            raise ValueError("batchnorm statistics are stale; run bn_recalibrate first")
        leaves = {k: T.leaf(self.params[k], k, track_grad and not T.is_buffer(k)) for k in self.params}
        mom = cfg.bn_momentum if bn_momentum == "config" else bn_momentum

        def cbr(h, conv, bn):
            h = T.conv3x3(h, leaves[f"{conv}.weight"], leaves[f"{conv}.bias"])
            h = T.batchnorm(h, leaves[f"{bn}.weight"], leaves[f"{bn}.bias"],
                            self.params[f"{bn}.running_mean"], self.params[f"{bn}.running_var"],
                            train_bn, mom, cfg.bn_eps, stats_count)
            return T.relu(h)

        def stage(h, prefix):
            h = cbr(h, f"{prefix}.conv1", f"{prefix}.bn1")
            h = cbr(h, f"{prefix}.conv2", f"{prefix}.bn2")
            return T.dropout(h, cfg.dropout_p, dropout_active, rng)

        h = T.Tensor(x.astype(DTYPE, copy=False))
        skips = []
        for i in range(cfg.depth):
            h = stage(h, f"enc{i}")
            skips.append(h)
            h = T.maxpool2(h)
        h = stage(h, "bottleneck")
        for i in reversed(range(cfg.depth)):
            h = T.upsample2(h)
            h = cbr(h, f"dec{i}.up", f"dec{i}.upbn")
            h = T.concat([skips[i], h])
            h = stage(h, f"dec{i}")
        logits = T.conv1x1(h, leaves["head.weight"], leaves["head.bias"])
        return logits, leaves

    def logits(self, images: np.ndarray, dropout_active: bool = False, rng: Rng | None = None) -> np.ndarray:
        """Eval-mode logits (N, C, H, W) for images (N, in_channels, H, W)."""
        x = np.ascontiguousarray(images.transpose(0, 2, 3, 1))
        z, _ = self.forward(x, dropout_active=dropout_active, rng=rng)
        return z.data.transpose(0, 3, 1, 2)

    def predict_proba_batch(self, images: np.ndarray, dropout_active: bool = False, rng: Rng | None = None) -> np.ndarray:
        x = np.ascontiguousarray(images.transpose(0, 2, 3, 1))
        z, _ = self.forward(x, dropout_active=dropout_active, rng=rng)
        return T.softmax(z).data.transpose(0, 3, 1, 2)


def build(config: NetConfig, rng: Rng) -> SegNet:
    return SegNet(config, init_params(config, rng))


def predict_proba(net: SegNet, image: np.ndarray, dropout_active: bool = False, rng: Rng | None = None) -> ProbabilisticPrediction:
    """Single-weight predictive distribution for one (in_channels, H, W) image."""
    if image.ndim != 3:
        raise ValueError(f"expected (in_channels, H, W) image, got {image.shape}")
    probs = net.predict_proba_batch(image[None], dropout_active=dropout_active, rng=rng)[0]
    return ProbabilisticPrediction(np.ascontiguousarray(probs))
