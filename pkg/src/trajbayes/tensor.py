"""Small reverse-mode autodiff over the fixed layer set used by the segmentation net.

Arrays are numpy ``float32`` in channels-last layout ``(N, H, W, C)``. Every op
records a node holding its parents and a vector-Jacobian closure; calling
:func:`backward` on a scalar walks those nodes in reverse topological order.
Ops are dtype-preserving, so the gradient checks can run in float64.
"""

from __future__ import annotations

from collections.abc import Iterable, Iterator, Mapping
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32
BN_BUFFERS = ("running_mean", "running_var")


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class AutodiffError(RuntimeError):
    pass


def _check(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {what}")
    return arr


# --------------------------------------------------------------------------
# ParamSet


def is_buffer(name: str) -> bool:
    """True for batchnorm running statistics (not trained, not averaged by SWA)."""
    return name.rsplit(".", 1)[-1] in BN_BUFFERS


class ParamSet(Mapping):
    """Named tensors of one network, iterated in lexicographic name order.

    ``bn_stale`` marks running statistics that no longer match the weights
    (e.g. after weight averaging) and must be re-estimated before inference.
    """

    def __init__(self, entries: Mapping[str, np.ndarray] | Iterable = (), bn_stale: bool = False):
        self._d = dict(entries)
        self.bn_stale = bn_stale

    def __getitem__(self, name: str) -> np.ndarray:
        return self._d[name]

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._d))

    def __len__(self) -> int:
        return len(self._d)

    def __repr__(self) -> str:
        return f"ParamSet({len(self)} tensors, {self.size()} values)"

    def copy(self) -> "ParamSet":
        return ParamSet({k: v.copy() for k, v in self._d.items()}, self.bn_stale)

    def size(self) -> int:
        return int(sum(v.size for v in self._d.values()))

    def trainable(self) -> list[str]:
        return [k for k in self if not is_buffer(k)]

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: tuple(self._d[k].shape) for k in self}

    def compatible(self, other: Mapping) -> bool:
        if set(self._d) != set(other):
            return False
        return all(self._d[k].shape == other[k].shape for k in self._d)

    def zeros_like(self) -> "ParamSet":
        return ParamSet({k: np.zeros_like(v) for k, v in self._d.items()})

    def bit_equal(self, other: Mapping, include_buffers: bool = True) -> bool:
        if not self.compatible(other):
            return False
        names = self if include_buffers else self.trainable()
        return all(np.array_equal(self._d[k], other[k]) for k in names)


def require_compatible(*sets: Mapping) -> None:
    first = sets[0]
    for other in sets[1:]:
        if set(first) != set(other):
            raise ValueError("ParamSets have different names")
        for k in first:
            if first[k].shape != other[k].shape:
                raise ValueError(f"shape mismatch for {k}: {first[k].shape} vs {other[k].shape}")


# --------------------------------------------------------------------------
# RNG


class Rng:
    """Philox-4x64 counter-based stream keyed by ``seed`` and a stream id.

    Same seed, stream and call sequence give the same numbers on every
    platform. ``child(i)`` derives an independent stream without consuming
    from this one.
    """

    def __init__(self, seed: int, stream: int = 0):
        if not 0 <= seed < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.stream = int(stream) % 2**64
        self._gen = np.random.Generator(np.random.Philox(key=self.seed + (self.stream << 64)))

    def child(self, stream: int) -> "Rng":
        return Rng(self.seed, (self.stream * 1_000_003 + stream + 1) % 2**64)

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        return (self._gen.standard_normal(shape, dtype=np.float64) * scale).astype(DTYPE)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self._gen.uniform(low, high, size)

    def random(self, shape) -> np.ndarray:
        return self._gen.random(shape, dtype=np.float64)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size)


# --------------------------------------------------------------------------
# autodiff nodes


class Tensor:
    """Array plus the tape entry that produced it."""

    __slots__ = ("data", "parents", "vjp", "requires_grad", "name")

    def __init__(
        self,
        data: np.ndarray,
        parents: tuple["Tensor", ...] = (),
        vjp: Callable[[np.ndarray], tuple] | None = None,
        requires_grad: bool = False,
        name: str | None = None,
    ):
        self.data = data
        self.parents = parents
        self.vjp = vjp
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, grad={self.requires_grad})"


def leaf(data: np.ndarray, name: str | None = None, requires_grad: bool = True) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _node(data: np.ndarray, parents: tuple, vjp, what: str) -> Tensor:
    _check(data, what)
    if any(p.requires_grad for p in parents):
        return Tensor(data, parents, vjp, requires_grad=True)
    return Tensor(data)


def backward(loss: Tensor, leaves: Mapping[str, Tensor]) -> ParamSet:
    """Gradients of scalar ``loss`` with respect to every named leaf.

    Leaves the loss does not depend on get zero gradients.
    """
    if loss.data.size != 1:
        raise AutodiffError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.vjp is None and not loss.requires_grad:
        raise AutodiffError("no recorded graph under this loss; run a forward pass first")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for p in t.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(order):
        g = grads.pop(id(t), None) if t.vjp is not None else grads.get(id(t))
        if g is None or t.vjp is None:
            continue
        for p, gp in zip(t.parents, t.vjp(g)):
            if gp is None or not p.requires_grad:
                continue
            _check(gp, "backward")
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + gp
            else:
                grads[id(p)] = gp

    out = {}
    for name, t in leaves.items():
        g = grads.get(id(t))
        out[name] = np.zeros_like(t.data) if g is None else g.astype(t.data.dtype, copy=False)
    return ParamSet(out)


# --------------------------------------------------------------------------
# elementwise / reduction helpers


def add(a: Tensor, b: Tensor) -> Tensor:
    return _node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(a: Tensor, k: float) -> Tensor:
    return _node(a.data * k, (a,), lambda g: (g * k,), "scale")


def sum_all(a: Tensor) -> Tensor:
    shape, dt = a.shape, a.data.dtype
    return _node(np.asarray(a.data.sum(), dtype=dt), (a,), lambda g: (np.broadcast_to(g, shape).astype(dt),), "sum")


# --------------------------------------------------------------------------
# layers (channels-last)


def _wmat3(w: np.ndarray) -> np.ndarray:
    # (O, C, 3, 3) -> (9C, O) with row order (ky, kx, c) to match _im2col3
    o = w.shape[0]
    return w.transpose(2, 3, 1, 0).reshape(-1, o)


def _im2col3(x: np.ndarray) -> np.ndarray:
    n, h, wd, c = x.shape
    xp = np.zeros((n, h + 2, wd + 2, c), dtype=x.dtype)
    xp[:, 1:-1, 1:-1, :] = x
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))  # (N, H, W, C, 3, 3)
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * wd, 9 * c)


def conv3x3(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1. ``w`` is (O, C, 3, 3)."""
    n, h, wd, c = x.shape
    o, ci, kh, kw = w.shape
    if (ci, kh, kw) != (c, 3, 3):
        raise ValueError(f"conv3x3 weight {w.shape} does not fit input channels {c}")
    cols = _im2col3(x.data)
    wm = _wmat3(w.data)
    out = (cols @ wm + b.data).reshape(n, h, wd, o)

    def vjp(g):
        g2 = g.reshape(-1, o)
        dw = (cols.T @ g2).reshape(3, 3, c, o).transpose(3, 2, 0, 1)
        db = g2.sum(axis=0)
        dx = None
        if x.requires_grad:
            dcols = (g2 @ wm.T).reshape(n, h, wd, 3, 3, c)
            dxp = np.zeros((n, h + 2, wd + 2, c), dtype=g.dtype)
            for i in range(3):
                for j in range(3):
                    dxp[:, i:i + h, j:j + wd, :] += dcols[:, :, :, i, j, :]
            dx = dxp[:, 1:-1, 1:-1, :]
        return dx, dw, db

    return _node(out, (x, w, b), vjp, "conv3x3")


def conv1x1(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Pointwise convolution. ``w`` is (O, C, 1, 1)."""
    n, h, wd, c = x.shape
    o = w.shape[0]
    if w.shape[1:] != (c, 1, 1):
        raise ValueError(f"conv1x1 weight {w.shape} does not fit input channels {c}")
    wm = w.data.reshape(o, c).T
    x2 = x.data.reshape(-1, c)
    out = (x2 @ wm + b.data).reshape(n, h, wd, o)

    def vjp(g):
        g2 = g.reshape(-1, o)
        dw = (x2.T @ g2).T.reshape(o, c, 1, 1)
        return (g2 @ wm.T).reshape(x.shape), dw, g2.sum(axis=0)

    return _node(out, (x, w, b), vjp, "conv1x1")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0).astype(x.data.dtype), (x,), lambda g: (g * mask,), "relu")


def maxpool2(x: Tensor) -> Tensor:
    n, h, wd, c = x.shape
    if h % 2 or wd % 2:
        raise ValueError(f"maxpool2 needs even spatial extents, got {(h, wd)}")
    blocks = x.data.reshape(n, h // 2, 2, wd // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, wd // 2, c, 4)
    idx = blocks.argmax(axis=-1)  # first maximum wins ties
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = gb.reshape(n, h // 2, wd // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, h, wd, c)
        return (gx,)

    return _node(out, (x,), vjp, "maxpool2")


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour x2 upsampling."""
    n, h, wd, c = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)

    def vjp(g):
        return (g.reshape(n, h, 2, wd, 2, c).sum(axis=(2, 4)),)

    return _node(out, (x,), vjp, "upsample2")


def concat(xs: list[Tensor]) -> Tensor:
    """Concatenate along channels."""
    sizes = [t.shape[-1] for t in xs]
    if len({t.shape[:-1] for t in xs}) != 1:
        raise ValueError(f"concat needs matching N, H, W; got {[t.shape for t in xs]}")
    out = np.concatenate([t.data for t in xs], axis=-1)
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=-1))

    return _node(out, tuple(xs), vjp, "concat")


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    train: bool,
    momentum: float | None = 0.1,
    eps: float = 1e-5,
    stats_count: int = 0,
) -> Tensor:
    """Channel batch normalisation.

    In train mode batch statistics normalise the input and the running
    arrays are updated in place: an exponential average with ``momentum``,
    or, when ``momentum`` is None, the cumulative average over
    ``stats_count`` previous batches. The running variance is unbiased and
    floored at ``eps``.
    """
    dt = x.data.dtype
    eps_c = dt.type(eps)
    if train:
        m = x.data.size // x.shape[-1]
        mean = x.data.mean(axis=(0, 1, 2))
        xc = x.data - mean
        var = (xc * xc).mean(axis=(0, 1, 2))
        inv = (1.0 / np.sqrt(var + eps_c)).astype(dt)
        xhat = xc * inv
        unbiased = var * (m / max(m - 1, 1))
        if momentum is None:
            k = stats_count
            running_mean[...] = (running_mean * k + mean) / (k + 1)
            running_var[...] = np.maximum((running_var * k + unbiased) / (k + 1), eps_c)
        else:
            running_mean[...] = (1 - momentum) * running_mean + momentum * mean
            running_var[...] = np.maximum((1 - momentum) * running_var + momentum * unbiased, eps_c)
        out = xhat * gamma.data + beta.data

        def vjp(g):
            dgamma = (g * xhat).sum(axis=(0, 1, 2))
            dbeta = g.sum(axis=(0, 1, 2))
            dxhat = g * gamma.data
            dx = (inv / m) * (m * dxhat - dxhat.sum(axis=(0, 1, 2)) - xhat * (dxhat * xhat).sum(axis=(0, 1, 2)))
            return dx.astype(dt), dgamma, dbeta

    else:
        inv = (1.0 / np.sqrt(running_var + eps_c)).astype(dt)
        xhat = (x.data - running_mean) * inv
        out = xhat * gamma.data + beta.data

        def vjp(g):
            return g * (gamma.data * inv), (g * xhat).sum(axis=(0, 1, 2)), g.sum(axis=(0, 1, 2))

    return _node(out.astype(dt, copy=False), (x, gamma, beta), vjp, "batchnorm")


def dropout(x: Tensor, p: float, active: bool, rng: Rng | None) -> Tensor:
    """Inverted dropout; identity when inactive or ``p == 0``."""
    if not active or p == 0.0:
        return x
    if rng is None:
        raise ValueError("active dropout needs an rng")
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) * x.data.dtype.type(1.0 / (1.0 - p))
    return _node(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def _softmax_last(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the channel (last) axis."""
    p = _softmax_last(x.data)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _node(p, (x,), vjp, "softmax")


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean per-voxel cross-entropy in nats. ``labels`` is (N, H, W) int."""
    z = logits.data
    c = z.shape[-1]
    if labels.shape != z.shape[:-1]:
        raise ValueError(f"labels {labels.shape} do not match logits {z.shape}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels must lie in [0, {c})")
    zs = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(zs).sum(axis=-1, keepdims=True))
    logp = zs - lse
    onehot = np.eye(c, dtype=z.dtype)[labels]
    nvox = labels.size
    val = -(logp * onehot).sum() / nvox

    def vjp(g):
        return ((np.exp(logp) - onehot) * (g / nvox),)

    return _node(np.asarray(val, dtype=z.dtype), (logits,), vjp, "cross_entropy")


def soft_dice_loss(logits: Tensor, labels: np.ndarray, smooth: float = 1e-5, include_background: bool = False) -> Tensor:
    """1 - mean soft Dice over classes, pooled over the whole batch."""
    z = logits.data
    c = z.shape[-1]
    dt = z.dtype
    p = _softmax_last(z)
    y = np.eye(c, dtype=dt)[labels]
    ks = slice(0, c) if include_background else slice(1, c)
    axes = (0, 1, 2)
    inter = (p * y).sum(axis=axes)[ks].astype(np.float64)
    denom = (p.sum(axis=axes) + y.sum(axis=axes))[ks].astype(np.float64)
    dk = (2 * inter + smooth) / (denom + smooth)
    nk = dk.size
    val = 1.0 - dk.mean()

    def vjp(g):
        # d dk / d p = (2 y (denom+s) - (2 inter + s)) / (denom+s)^2
        dp = np.zeros_like(p)
        num = 2 * inter + smooth
        den = denom + smooth
        a = (2.0 / den).astype(dt)
        b = (num / den**2).astype(dt)
        dp[..., ks] = -(y[..., ks] * a - b) * (g / nk)
        return (p * (dp - (dp * p).sum(axis=-1, keepdims=True)),)

    return _node(np.asarray(val, dtype=dt), (logits,), vjp, "soft_dice_loss")


# --------------------------------------------------------------------------
# uniform layer entry point

LAYER_KINDS = (
    "conv3x3", "conv1x1", "relu", "maxpool", "upsample", "batchnorm",
    "dropout", "softmax", "concat",
)


def forward_layer(kind: str, params: Mapping[str, Tensor], inputs, mode: str = "eval", rng: Rng | None = None, **kw) -> Tensor:
    """Apply one layer by kind name.

    ``params`` holds the layer's own tensors keyed by short name
    (``weight``, ``bias``, ``running_mean``...). ``inputs`` is a Tensor, or a
    list of them for ``concat``.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    train = mode == "train"
    if kind == "conv3x3":
        return conv3x3(inputs, params["weight"], params["bias"])
    if kind == "conv1x1":
        return conv1x1(inputs, params["weight"], params["bias"])
    if kind == "relu":
        return relu(inputs)
    if kind == "maxpool":
        return maxpool2(inputs)
    if kind == "upsample":
        return upsample2(inputs)
    if kind == "batchnorm":
        return batchnorm(inputs, params["weight"], params["bias"], params["running_mean"].data,
                         params["running_var"].data, train, **kw)
    if kind == "dropout":
        return dropout(inputs, kw.get("p", 0.0), train or kw.get("force", False), rng)
    if kind == "softmax":
        return softmax(inputs)
    if kind == "concat":
        return concat(list(inputs))
    raise ValueError(f"unknown layer kind {kind!r}; expected one of {LAYER_KINDS}")


# --------------------------------------------------------------------------
# optimiser


def sgd_momentum_step(
    params: ParamSet,
    grads: Mapping[str, np.ndarray],
    velocity: Mapping[str, np.ndarray],
    lr: float,
    momentum: float,
    weight_decay: float = 0.0,
    nesterov: bool = False,
    names: Iterable[str] | None = None,
) -> tuple[ParamSet, ParamSet]:
    """One SGD step with heavy-ball or Nesterov momentum.

    With ``d = g + weight_decay * w``::

        v <- momentum * v - lr * d
        w <- w + v                          (heavy ball)
        w <- w + momentum * v - lr * d      (nesterov, using the new v)

    Only ``names`` (default: all non-buffer entries) are updated; the rest
    are copied through unchanged.
    """
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    require_compatible(params, grads, velocity)
    names = params.trainable() if names is None else list(names)
    new_w = {k: params[k] for k in params}
    new_v = {k: velocity[k] for k in velocity}
    for k in names:
        w = params[k]
        dt = w.dtype.type
        lr_, m_, wd_ = dt(lr), dt(momentum), dt(weight_decay)
        d = grads[k] + wd_ * w if weight_decay else grads[k]
        v = m_ * velocity[k] - lr_ * d
        new_v[k] = v
        new_w[k] = w + (m_ * v - lr_ * d if nesterov else v)
    return ParamSet(new_w, params.bn_stale), ParamSet(new_v)
