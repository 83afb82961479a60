"""Reference residual convolutional denoiser with a hand-written backward pass.

Images are processed one at a time (never batched into one tensor), so the
forward pass of a given image does not depend on what else is in a batch.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import containers

log = logging.getLogger(__name__)


class ModelError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class DenoiserSpec:
    """Layer list of ``("conv", out_channels)`` and ``("relu",)`` entries (3x3, pad 1, bias)."""

    layers: tuple = (("conv", 16), ("relu",), ("conv", 16), ("relu",), ("conv", 1))
    residual_skip: bool = True

    def __post_init__(self):
        layers = tuple(tuple(l) for l in self.layers)
        object.__setattr__(self, "layers", layers)
        convs = [l for l in layers if l[0] == "conv"]
        if not convs or convs[-1][1] != 1:
            raise ModelError("the last conv layer must have one output channel")
        if any(l[0] not in ("conv", "relu") for l in layers):
            raise ModelError("layers must be conv or relu")

    def conv_shapes(self):
        """(out, in) channel pairs of each conv layer."""
        shapes, c = [], 1
        for l in self.layers:
            if l[0] == "conv":
                shapes.append((l[1], c))
                c = l[1]
        return shapes

    @property
    def n_params(self):
        return sum(o * i * 9 + o for o, i in self.conv_shapes())

    def to_dict(self):
        return {"layers": [list(l) for l in self.layers], "residual_skip": self.residual_skip}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(tuple(l) for l in d["layers"]), bool(d["residual_skip"]))

    @classmethod
    def tiny(cls, channels=2):
        return cls((("conv", channels), ("relu",), ("conv", 1)))


@dataclass
class DenoiserWeights:
    spec: DenoiserSpec
    theta: np.ndarray
    hu_window: tuple = (0.0, 2000.0)   # maps to [0, 1] inside the network
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if self.theta.shape != (self.spec.n_params,):
            raise ModelError(f"expected {self.spec.n_params} parameters, got {self.theta.shape}")
        if not np.all(np.isfinite(self.theta)):
            raise ModelError("non-finite parameters")
        lo, hi = self.hu_window
        if not hi > lo:
            raise ModelError("hu_window must be increasing")

    def unpack(self, theta=None):
        """List of (weight (o, i, 3, 3), bias (o,)) views into theta."""
        theta = self.theta if theta is None else theta
        out, pos = [], 0
        for o, i in self.spec.conv_shapes():
            w = theta[pos:pos + o * i * 9].reshape(o, i, 3, 3)
            pos += o * i * 9
            b = theta[pos:pos + o]
            pos += o
            out.append((w, b))
        return out

    def save(self, path):
        header = {"spec": self.spec.to_dict(), "hu_window": list(self.hu_window), "meta": self.meta}
        return containers.write_grid(path, self.theta, "denoiser", denoiser=json.dumps(header, sort_keys=True))

    @classmethod
    def load(cls, path):
        arr, h = containers.read_grid(path, "denoiser")
        d = json.loads(h["denoiser"])
        return cls(DenoiserSpec.from_dict(d["spec"]), arr.astype(np.float64),
                   tuple(d["hu_window"]), d["meta"])

    def stored(self):
        """Copy with parameters rounded to their on-disk float32 values."""
        with np.errstate(over="ignore"):
            theta = self.theta.astype(np.float32).astype(np.float64)
        return DenoiserWeights(self.spec, theta, self.hu_window, dict(self.meta))


def init_weights(spec, seed=0, hu_window=(0.0, 2000.0), last_gain=1e-2):
    """Kaiming-uniform weights (bound sqrt(6 / fan_in)), zero biases.

    The last conv layer is scaled by ``last_gain`` so a residual network
    starts close to the identity map.
    """
    rng = np.random.default_rng(seed)
    parts = []
    shapes = spec.conv_shapes()
    for n, (o, i) in enumerate(shapes):
        bound = math.sqrt(6.0 / (i * 9))
        if n == len(shapes) - 1:
            bound *= last_gain
        parts.append(rng.uniform(-bound, bound, o * i * 9))
        parts.append(np.zeros(o))
    return DenoiserWeights(spec, np.concatenate(parts), tuple(hu_window))


def zero_weights(spec, hu_window=(0.0, 2000.0)):
    return DenoiserWeights(spec, np.zeros(spec.n_params), tuple(hu_window))


# ----------------------------------------------------------------------------
# conv primitives on (C, H, W) arrays


def _im2col(a):
    C, H, W = a.shape
    p = np.pad(a, ((0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(p, (3, 3), axis=(1, 2))  # (C, H, W, 3, 3)
    return win.transpose(0, 3, 4, 1, 2).reshape(C * 9, H * W)


def _col2im(cols, C, H, W):
    cols = cols.reshape(C, 3, 3, H, W)
    p = np.zeros((C, H + 2, W + 2))
    for a in range(3):
        for b in range(3):
            p[:, a:a + H, b:b + W] += cols[:, a, b]
    return p[:, 1:-1, 1:-1]


def _forward(w, xn, keep=False):
    """Network body on a normalized image; returns output (and the tape if keep)."""
    h = xn[None]
    params = w.unpack()
    tape, ci = [], 0
    for l in w.spec.layers:
        if l[0] == "conv":
            K, b = params[ci]
            ci += 1
            cols = _im2col(h)
            out = (K.reshape(K.shape[0], -1) @ cols + b[:, None]).reshape(K.shape[0], *h.shape[1:])
            if keep:
                tape.append(("conv", cols, h.shape))
            h = out
        else:
            if keep:
                tape.append(("relu", h > 0))
            h = np.maximum(h, 0.0)
    out = h[0] + xn if w.spec.residual_skip else h[0]
    return (out, tape) if keep else out


def _backward(w, tape, gout):
    """Gradient w.r.t. theta given d(loss)/d(output) in normalized units."""
    params = w.unpack()
    grads = [None] * len(params)
    g = gout[None]
    ci = len(params)
    for entry in reversed(tape):
        if entry[0] == "relu":
            g = g * entry[1]
        else:
            _, cols, shape = entry
            ci -= 1
            K, _ = params[ci]
            gm = g.reshape(K.shape[0], -1)
            grads[ci] = ((gm @ cols.T).reshape(K.shape), gm.sum(axis=1))
            if ci > 0:
                g = _col2im(K.reshape(K.shape[0], -1).T @ gm, *shape)
    return np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in grads])


def _normalize(w, x):
    lo, hi = w.hu_window
    return (np.asarray(x, dtype=np.float64) - lo) / (hi - lo)


def _denormalize(w, xn):
    lo, hi = w.hu_window
    return xn * (hi - lo) + lo


def apply(w, x):
    """Denoise one HU image."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ModelError("apply expects a single 2D image")
    return _denormalize(w, _forward(w, _normalize(w, x)))


def loss_and_gradient(w, inputs, targets):
    """Sum of squared errors in normalized units, and its gradient in theta.

    Normalized units are HU divided by the window width, so this is the HU
    loss times a constant.
    """
    if len(inputs) != len(targets):
        raise ValueError("inputs and targets must have the same length")
    loss = 0.0
    grad = np.zeros_like(w.theta)
    for x, t in zip(inputs, targets):
        x = np.asarray(x, dtype=np.float64)
        t = np.asarray(t, dtype=np.float64)
        if x.shape != t.shape:
            raise ValueError("input/target shape mismatch")
        out, tape = _forward(w, _normalize(w, x), keep=True)
        r = out - _normalize(w, t)
        loss += float(np.sum(r * r))
        grad += _backward(w, tape, 2.0 * r)
    return loss, grad


@dataclass
class TrainConfig:
    epochs: int = 30
    learning_rate: float = 1e-3
    momentum: float = 0.9
    batch: int = 4
    seed: int = 0
    optimizer: str = "sgd"      # "sgd" (with momentum) or "adam"
    crop: int = 0               # random square crops of this side; 0 = full images

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate <= 0 or not 0 <= self.momentum < 1 or self.batch < 1:
            raise ValueError("bad learning rate, momentum or batch size")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def to_dict(self):
        return asdict(self)


def _crop_pair(x, t, side, rng):
    if side <= 0 or side >= min(x.shape):
        return x, t
    r = rng.integers(0, x.shape[0] - side + 1)
    c = rng.integers(0, x.shape[1] - side + 1)
    return x[r:r + side, c:c + side], t[r:r + side, c:c + side]


def train(spec, init, pairs, cfg, hu_window=(0.0, 2000.0)):
    """Minibatch training on (input, target) HU image pairs.

    ``init`` is a DenoiserWeights or None (seeded Kaiming init). The loss per
    step is the mean squared error per pixel in normalized units.
    """
    if not pairs:
        raise ValueError("need at least one training pair")
    w = init_weights(spec, cfg.seed, hu_window) if init is None else \
        DenoiserWeights(init.spec, init.theta.copy(), init.hu_window, dict(init.meta))
    if w.spec != spec:
        raise ModelError("initial weights do not match the architecture")
    rng = np.random.default_rng(cfg.seed)
    v = np.zeros_like(w.theta)
    m2 = np.zeros_like(w.theta)
    step = 0
    curve = []
    for ep in range(cfg.epochs):
        order = rng.permutation(len(pairs))
        total, npix = 0.0, 0
        for lo in range(0, len(order), cfg.batch):
            batch = [_crop_pair(*pairs[i], cfg.crop, rng) for i in order[lo:lo + cfg.batch]]
            n = sum(x.size for x, _ in batch)
            loss, g = loss_and_gradient(w, [b[0] for b in batch], [b[1] for b in batch])
            if not (math.isfinite(loss) and np.all(np.isfinite(g))):
                raise TrainingError(f"non-finite loss in epoch {ep}")
            total += loss
            npix += n
            g /= n
            step += 1
            if cfg.optimizer == "sgd":
                v = cfg.momentum * v - cfg.learning_rate * g
                w.theta = w.theta + v
            else:
                v = cfg.momentum * v + (1 - cfg.momentum) * g
                m2 = 0.999 * m2 + 0.001 * g * g
                vh = v / (1 - cfg.momentum ** step)
                mh = m2 / (1 - 0.999 ** step)
                w.theta = w.theta - cfg.learning_rate * vh / (np.sqrt(mh) + 1e-8)
        curve.append(total / npix)
        if not math.isfinite(curve[-1]):
            raise TrainingError(f"non-finite loss in epoch {ep}")
        log.info("denoiser epoch %d loss %.6e", ep, curve[-1])
    w.meta = {"epochs": cfg.epochs, "train": cfg.to_dict(), "loss_curve": curve}
    return w
