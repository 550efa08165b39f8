"""Cardiac-like phantom slices with a controllable acquisition shift.

Labels: 0 background, 1 RV crescent, 2 MYO ring, 3 LV blood pool. Geometry is
evaluated analytically; labels come from pixel centres and the image from a
supersampled render, so edges are soft while the ground truth stays crisp.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .tensor import DTYPE, Rng

DOMAINS = ("ID", "OOD-A", "OOD-B")
BACKGROUND, RV, MYO, LV = 0, 1, 2, 3
CLASS_NAMES = {RV: "RV", MYO: "MYO", LV: "LV"}


@dataclass(frozen=True)
class PhantomParams:
    size: int = 64
    lv_radius: tuple[float, float] = (7.0, 11.0)
    myo_thickness: tuple[float, float] = (2.5, 4.5)
    rv_major: tuple[float, float] = (10.0, 15.0)
    rv_minor: tuple[float, float] = (5.0, 8.0)
    center_jitter: float = 4.0
    body_axes: tuple[float, float] = (26.0, 22.0)
    air_mean: float = 0.05
    body_mean: float = 0.40
    blood_mean: float = 0.85
    myo_mean: float = 0.22
    noise_sd: float = 0.04
    bias_amplitude: float = 0.10
    gamma: float = 1.0
    small_rv_fraction: float = 0.10
    small_rv_threshold: int = 40
    absent_rv_fraction: float = 0.0
    supersample: int = 2
    domain: str = "ID"

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise ValueError(f"domain must be one of {DOMAINS}, got {self.domain!r}")
        for name in ("small_rv_fraction", "absent_rv_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.size < 16 or self.supersample < 1 or self.gamma <= 0:
            raise ValueError("size >= 16, supersample >= 1 and gamma > 0 required")
        # LV + MYO + the RV offset must fit inside the image from any jittered centre;
        # geometry is in 64px units and scaled with the image
        r_epi = self.lv_radius[1] + self.myo_thickness[1]
        a, b = self.rv_minor[1], self.rv_major[1]
        reach = max(r_epi + 1.35 * a, float(np.hypot(r_epi + 0.35 * a, b))) + self.center_jitter
        if reach >= 32.0:
            raise ValueError(f"geometry does not fit the image (reach {reach:.1f} of 32 in 64px units)")

    def shifted(self, domain: str) -> "PhantomParams":
        """Parameters for an acquisition domain, relative to these ID defaults."""
        if domain == "ID":
            return replace(self, domain="ID")
        if domain == "OOD-A":
            return replace(self, domain=domain, blood_mean=self.blood_mean - 0.07,
                           myo_mean=self.myo_mean + 0.04, body_mean=self.body_mean + 0.03,
                           bias_amplitude=self.bias_amplitude + 0.10, gamma=self.gamma * 0.9)
        if domain == "OOD-B":
            return replace(self, domain=domain, blood_mean=self.blood_mean - 0.10,
                           myo_mean=self.myo_mean + 0.05, body_mean=self.body_mean - 0.05,
                           bias_amplitude=self.bias_amplitude + 0.15, gamma=self.gamma * 1.2,
                           noise_sd=self.noise_sd * 1.25)
        raise ValueError(f"unknown domain {domain!r}")


@dataclass
class LabeledSample:
    image: np.ndarray  # (1, H, W) float32 in [0, 1]
    label: np.ndarray  # (H, W) uint8
    seed: int
    domain: str = "ID"


@dataclass
class Dataset:
    """Stacked samples: images (N, 1, H, W), labels (N, H, W)."""

    images: np.ndarray
    labels: np.ndarray
    seeds: np.ndarray
    domains: list[str] = field(default_factory=list)

    def __post_init__(self):
        n = len(self.images)
        if len(self.labels) != n or len(self.seeds) != n or len(self.domains) != n:
            raise ValueError("images, labels, seeds and domains must have equal length")

    def __len__(self) -> int:
        return len(self.images)

    @classmethod
    def from_samples(cls, samples: list[LabeledSample]) -> "Dataset":
        if not samples:
            raise ValueError("empty sample list")
        return cls(
            np.stack([s.image for s in samples]).astype(DTYPE),
            np.stack([s.label for s in samples]).astype(np.uint8),
            np.array([s.seed for s in samples], dtype=np.uint64),
            [s.domain for s in samples],
        )

    def samples(self) -> list[LabeledSample]:
        return [LabeledSample(self.images[i], self.labels[i], int(self.seeds[i]), self.domains[i])
                for i in range(len(self))]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.intp)
        return Dataset(self.images[idx], self.labels[idx], self.seeds[idx], [self.domains[i] for i in idx])

    def concat(self, other: "Dataset") -> "Dataset":
        return Dataset(np.concatenate([self.images, other.images]), np.concatenate([self.labels, other.labels]),
                       np.concatenate([self.seeds, other.seeds]), self.domains + other.domains)


def _regions(xx, yy, geo) -> np.ndarray:
    """Class index at each coordinate, plus 4 for 'body' and 5 for 'air'."""
    cx, cy, r_lv, t_myo, rv = geo["cx"], geo["cy"], geo["r_lv"], geo["t_myo"], geo["rv"]
    d = np.hypot(xx - cx, yy - cy)
    out = np.full(xx.shape, 5, dtype=np.uint8)
    bx, by = geo["body"]
    out[((xx - cx) / bx) ** 2 + ((yy - cy) / by) ** 2 <= 1.0] = 4
    if rv is not None:
        ex, ey, a, b, th = rv
        u = (xx - ex) * np.cos(th) + (yy - ey) * np.sin(th)
        v = -(xx - ex) * np.sin(th) + (yy - ey) * np.cos(th)
        out[((u / a) ** 2 + (v / b) ** 2 <= 1.0) & (d > r_lv + t_myo)] = RV
    out[d <= r_lv + t_myo] = MYO
    out[d <= r_lv] = LV
    return out


def _rv_geometry(cx, cy, r_epi, a, b, th, scale):
    a, b = a * scale, b * scale
    # centre just outside the epicardium so the ellipse wraps it as a crescent
    dist = r_epi + a * 0.35
    return (cx + dist * np.cos(th), cy + dist * np.sin(th), a, b, th)


def sample_geometry(params: PhantomParams, rng: Rng) -> dict:
    p = params
    s = p.size / 64.0
    c0 = (p.size - 1) / 2.0
    cx = c0 + rng.uniform(-p.center_jitter, p.center_jitter) * s
    cy = c0 + rng.uniform(-p.center_jitter, p.center_jitter) * s
    r_lv = rng.uniform(*p.lv_radius) * s
    t_myo = rng.uniform(*p.myo_thickness) * s
    a = rng.uniform(*p.rv_minor) * s
    b = rng.uniform(*p.rv_major) * s
    th = np.pi + rng.uniform(-0.5, 0.5)
    body = (p.body_axes[0] * s, p.body_axes[1] * s)
    u = rng.random(2)
    small = u[0] < p.small_rv_fraction
    absent = u[1] < p.absent_rv_fraction
    geo = dict(cx=cx, cy=cy, r_lv=r_lv, t_myo=t_myo, body=body, rv=None, small=small)
    if absent:
        return geo
    scale = 0.45 if small else 1.0
    geo["rv"] = _rv_geometry(cx, cy, r_lv + t_myo, a, b, th, scale)
    if small:
        yy, xx = np.mgrid[0:p.size, 0:p.size].astype(np.float64)
        for it in range(500):
            area = int((_regions(xx, yy, geo) == RV).sum())
            if 0 < area < p.small_rv_threshold:
                break
            step = 0.02 + 0.1 / (1 + it // 20)
            scale *= (1 - step) if area > 0 else (1 + step / 2)
            geo["rv"] = _rv_geometry(cx, cy, r_lv + t_myo, a, b, th, scale)
        else:
            raise ValueError(f"cannot fit an RV smaller than {p.small_rv_threshold} px")
    return geo


def render(params: PhantomParams, geo: dict, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    """Image (H, W) and label (H, W) for one geometry."""
    p = params
    n, k = p.size, p.supersample
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    label = _regions(xx, yy, geo)
    # indexed by _regions output; 0 is never produced there
    means = np.array([p.body_mean, p.blood_mean, p.myo_mean, p.blood_mean, p.body_mean, p.air_mean])
    if k > 1:
        off = (np.arange(k) + 0.5) / k - 0.5
        sy, sx = np.meshgrid(off, off, indexing="ij")
        fine_y = (yy[:, :, None, None] + sy).reshape(n, n, -1)
        fine_x = (xx[:, :, None, None] + sx).reshape(n, n, -1)
        img = means[_regions(fine_x, fine_y, geo)].mean(axis=-1)
    else:
        img = means[label]
    label = np.where(label >= 4, BACKGROUND, label).astype(np.uint8)

    if p.bias_amplitude > 0:
        gx, gy = (xx / (n - 1)) * 2 - 1, (yy / (n - 1)) * 2 - 1
        c = rng.uniform(-1, 1, size=3)
        field_ = c[0] * gx + c[1] * gy + c[2] * gx * gy
        img = img * (1.0 + p.bias_amplitude * field_ / max(np.abs(c).sum(), 1e-8))
    img = np.clip(img, 0.0, 1.0) ** p.gamma
    if p.noise_sd > 0:
        img = img + rng.normal((n, n), scale=p.noise_sd)
    return np.clip(img, 0.0, 1.0).astype(DTYPE), label


def sample_seed(split_seed: int, index: int) -> int:
    return (split_seed * 0x9E3779B97F4A7C15 + index + 1) % 2**64


def generate_sample(params: PhantomParams, seed: int) -> LabeledSample:
    rng = Rng(seed)
    geo = sample_geometry(params, rng)
    img, label = render(params, geo, rng)
    return LabeledSample(img[None], label, seed, params.domain)


def generate_split(params: PhantomParams, count: int, seed: int) -> Dataset:
    """``count`` samples; deterministic in (params, seed)."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    return Dataset.from_samples([generate_sample(params, sample_seed(seed, i)) for i in range(count)])
