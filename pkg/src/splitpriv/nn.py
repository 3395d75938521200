"""Small layered network engine with hand-written reverse-mode gradients.

A model is an ordered list of layers. Each layer caches what it needs during
``forward`` and turns an upstream gradient into an input gradient plus
parameter gradients in ``backward``. Models can be cut at any layer boundary
and glued back together, which is all split learning needs.

Shapes are per-sample; every array that flows through a model carries a
leading batch axis. Everything is float64.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from splitpriv.errors import ShapeError
from splitpriv.rng import RngStream
from splitpriv.storage import write_npz

CHECKPOINT_VERSION = 1
KINDS = ("dense", "relu", "conv-2d-small", "max-pool", "batch-norm")


def _uniform_init(gen: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return gen.uniform(-bound, bound, size=shape)


class Layer:
    """Base class. ``params`` are trained; ``buffers`` are carried along
    (aggregated, checkpointed) but never touched by the optimizer."""

    kind = ""

    def __init__(self, in_shape: Sequence[int]):
        self.in_shape = tuple(int(d) for d in in_shape)
        self.params: list[np.ndarray] = []
        self.buffers: list[np.ndarray] = []

    @property
    def out_shape(self) -> tuple[int, ...]:
        return self.in_shape

    def config(self) -> dict:
        return {}

    def flops(self) -> int:
        """Forward FLOPs for one sample."""
        return int(np.prod(self.in_shape))

    def forward(self, x: np.ndarray, train: bool):
        raise NotImplementedError

    def backward(self, cache, gy: np.ndarray):
        raise NotImplementedError

    def copy(self) -> "Layer":
        new = object.__new__(type(self))
        new.__dict__.update(self.__dict__)
        new.params = [p.copy() for p in self.params]
        new.buffers = [b.copy() for b in self.buffers]
        return new

    def __repr__(self):
        return f"{type(self).__name__}({self.in_shape} -> {self.out_shape})"


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_shape, out_features: int, gen: np.random.Generator | None = None):
        super().__init__(in_shape)
        self.out_features = int(out_features)
        fan_in = int(np.prod(self.in_shape))
        if gen is None:
            self.params = [np.zeros((self.out_features, fan_in)), np.zeros(self.out_features)]
        else:
            self.params = [
                _uniform_init(gen, (self.out_features, fan_in), fan_in),
                _uniform_init(gen, (self.out_features,), fan_in),
            ]

    @property
    def out_shape(self):
        return (self.out_features,)

    def config(self):
        return {"out": self.out_features}

    def flops(self):
        return 2 * int(np.prod(self.in_shape)) * self.out_features

    def forward(self, x, train):
        w, b = self.params
        flat = x.reshape(x.shape[0], -1)
        return flat @ w.T + b, flat

    def backward(self, flat, gy):
        w, _ = self.params
        gw = gy.T @ flat
        gb = gy.sum(axis=0)
        gx = (gy @ w).reshape((gy.shape[0],) + self.in_shape)
        return gx, [gw, gb]


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train):
        mask = x > 0
        return np.where(mask, x, 0.0), mask

    def backward(self, mask, gy):
        return np.where(mask, gy, 0.0), []


class Conv2dSmall(Layer):
    """3x3 convolution, stride 1, zero padding 1 (spatial size preserved)."""

    kind = "conv-2d-small"
    ksize = 3

    def __init__(self, in_shape, out_channels: int, gen: np.random.Generator | None = None):
        super().__init__(in_shape)
        if len(self.in_shape) != 3:
            raise ShapeError(f"conv-2d-small needs (C, H, W) input, got {self.in_shape}")
        self.out_channels = int(out_channels)
        c_in = self.in_shape[0]
        fan_in = c_in * self.ksize * self.ksize
        wshape = (self.out_channels, c_in, self.ksize, self.ksize)
        if gen is None:
            self.params = [np.zeros(wshape), np.zeros(self.out_channels)]
        else:
            self.params = [
                _uniform_init(gen, wshape, fan_in),
                _uniform_init(gen, (self.out_channels,), fan_in),
            ]

    @property
    def out_shape(self):
        return (self.out_channels,) + self.in_shape[1:]

    def config(self):
        return {"out": self.out_channels}

    def flops(self):
        c_in, h, w = self.in_shape
        return 2 * self.ksize * self.ksize * c_in * self.out_channels * h * w

    def _cols(self, x):
        b, c, h, w = x.shape
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
        # (B, C, H, W, 3, 3) -> (B*H*W, C*9)
        return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * h * w, c * 9)

    def forward(self, x, train):
        w, bias = self.params
        b, _, h, wd = x.shape
        cols = self._cols(x)
        y = cols @ w.reshape(self.out_channels, -1).T + bias
        return y.reshape(b, h, wd, self.out_channels).transpose(0, 3, 1, 2), cols

    def backward(self, cols, gy):
        w, _ = self.params
        b, _, h, wd = gy.shape
        c_in = self.in_shape[0]
        g2 = gy.transpose(0, 2, 3, 1).reshape(b * h * wd, self.out_channels)
        gw = (g2.T @ cols).reshape(w.shape)
        gb = g2.sum(axis=0)
        gcols = (g2 @ w.reshape(self.out_channels, -1)).reshape(b, h, wd, c_in, 3, 3)
        gxp = np.zeros((b, c_in, h + 2, wd + 2))
        for i in range(3):
            for j in range(3):
                gxp[:, :, i:i + h, j:j + wd] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return gxp[:, :, 1:-1, 1:-1], [gw, gb]


class MaxPool(Layer):
    """2x2 max pooling with stride 2. Ties route the gradient to the first maximum."""

    kind = "max-pool"

    def __init__(self, in_shape):
        super().__init__(in_shape)
        if len(self.in_shape) != 3 or self.in_shape[1] % 2 or self.in_shape[2] % 2:
            raise ShapeError(f"max-pool needs (C, H, W) with even H, W, got {self.in_shape}")

    @property
    def out_shape(self):
        c, h, w = self.in_shape
        return (c, h // 2, w // 2)

    def _windows(self, x):
        b, c, h, w = x.shape
        return x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // 2, w // 2, 4)

    def forward(self, x, train):
        win = self._windows(x)
        idx = win.argmax(axis=-1)
        y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        return y, idx

    def backward(self, idx, gy):
        b, c, hh, wh = gy.shape
        g = np.zeros((b, c, hh, wh, 4))
        np.put_along_axis(g, idx[..., None], gy[..., None], axis=-1)
        g = g.reshape(b, c, hh, wh, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return g.reshape((b,) + self.in_shape), []


class BatchNorm(Layer):
    """Per-channel (image input) or per-feature (vector input) normalization.

    Training mode normalizes with batch statistics and folds them into the
    running estimates; evaluation mode uses the running estimates.
    """

    kind = "batch-norm"
    momentum = 0.1
    eps = 1e-5

    def __init__(self, in_shape, gen: np.random.Generator | None = None):
        super().__init__(in_shape)
        c = self.in_shape[0]
        self.params = [np.ones(c), np.zeros(c)]
        self.buffers = [np.zeros(c), np.ones(c)]

    def flops(self):
        return 2 * int(np.prod(self.in_shape))

    def _axes(self, x):
        return (0,) if x.ndim == 2 else (0, 2, 3)

    def _bshape(self, x):
        return (1, -1) if x.ndim == 2 else (1, -1, 1, 1)

    def forward(self, x, train):
        gamma, beta = self.params
        rmean, rvar = self.buffers
        axes, bs = self._axes(x), self._bshape(x)
        if train:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            n = x.size // x.shape[1]
            unbiased = var * n / (n - 1) if n > 1 else var
            rmean *= 1.0 - self.momentum
            rmean += self.momentum * mean
            rvar *= 1.0 - self.momentum
            rvar += self.momentum * unbiased
        else:
            mean, var = rmean, rvar
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean.reshape(bs)) * inv.reshape(bs)
        return xhat * gamma.reshape(bs) + beta.reshape(bs), (xhat, inv, train)

    def backward(self, cache, gy):
        xhat, inv, train = cache
        gamma, _ = self.params
        axes, bs = self._axes(gy), self._bshape(gy)
        ggamma = (gy * xhat).sum(axis=axes)
        gbeta = gy.sum(axis=axes)
        gxhat = gy * gamma.reshape(bs)
        if train:
            n = gy.size // gy.shape[1]
            gx = (inv.reshape(bs) / n) * (
                n * gxhat - gxhat.sum(axis=axes).reshape(bs) - xhat * (gxhat * xhat).sum(axis=axes).reshape(bs)
            )
        else:
            gx = gxhat * inv.reshape(bs)
        return gx, [ggamma, gbeta]


_LAYER_TYPES = {cls.kind: cls for cls in (Dense, ReLU, Conv2dSmall, MaxPool, BatchNorm)}


def make_layer(kind: str, in_shape, gen: np.random.Generator | None = None, **cfg) -> Layer:
    if kind not in _LAYER_TYPES:
        raise ValueError(f"unknown layer kind {kind!r}; expected one of {KINDS}")
    cls = _LAYER_TYPES[kind]
    if kind in ("dense", "conv-2d-small"):
        return cls(in_shape, cfg["out"], gen)
    if kind == "batch-norm":
        return cls(in_shape, gen)
    return cls(in_shape)


class LayeredModel:
    """An ordered stack of layers ``W^1 .. W^k``.

    An empty model is allowed and acts as the identity; its ``input_shape``
    is then whatever was given (possibly ``None``).
    """

    def __init__(self, layers: Sequence[Layer], input_shape=None):
        self.layers = list(layers)
        if self.layers:
            input_shape = self.layers[0].in_shape
            for a, b in zip(self.layers, self.layers[1:]):
                if a.out_shape != b.in_shape:
                    raise ShapeError(f"layer seam mismatch: {a.out_shape} vs {b.in_shape}")
        self.input_shape = None if input_shape is None else tuple(input_shape)

    @property
    def k(self) -> int:
        return len(self.layers)

    def __len__(self):
        return len(self.layers)

    @property
    def output_shape(self):
        return self.layers[-1].out_shape if self.layers else self.input_shape

    def copy(self) -> "LayeredModel":
        return LayeredModel([layer.copy() for layer in self.layers], self.input_shape)

    def parameters(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params]

    def arch(self) -> list[dict]:
        return [{"kind": layer.kind, **layer.config()} for layer in self.layers]

    def shape_at(self, s: int) -> tuple[int, ...]:
        """Per-sample shape of the activation after layer ``s`` (``s=0`` is the input)."""
        if s == 0:
            return self.input_shape
        return self.layers[s - 1].out_shape

    def __repr__(self):
        kinds = ", ".join(layer.kind for layer in self.layers)
        return f"LayeredModel(k={self.k}, input={self.input_shape}, [{kinds}])"


def build_model(arch: Sequence[dict], input_shape, rng: RngStream | None = None) -> LayeredModel:
    """Instantiate ``arch`` (list of ``{"kind": ..., "out": ...}``) with seeded uniform init."""
    gen = (rng or RngStream(0)).generator()
    shape = tuple(input_shape)
    layers = []
    for spec in arch:
        spec = dict(spec)
        kind = spec.pop("kind")
        layer = make_layer(kind, shape, gen, **spec)
        layers.append(layer)
        shape = layer.out_shape
    return LayeredModel(layers, input_shape)


def reinitialize(model: LayeredModel, rng: RngStream) -> LayeredModel:
    """Same architecture, fresh weights."""
    return build_model(model.arch(), model.input_shape, rng)


def split_model(m: LayeredModel, s: int, copy: bool = False) -> tuple[LayeredModel, LayeredModel]:
    """Cut ``m`` after layer ``s``: prefix holds layers 1..s, suffix s+1..k.

    With ``copy=False`` the halves share layer objects with ``m``.
    """
    if not 1 <= s <= m.k - 1:
        raise ValueError(f"split index {s} outside 1..{m.k - 1}")
    layers = [layer.copy() for layer in m.layers] if copy else list(m.layers)
    return LayeredModel(layers[:s], m.input_shape), LayeredModel(layers[s:], layers[s].in_shape)


def concat_models(a: LayeredModel, b: LayeredModel) -> LayeredModel:
    if a.k == 0:
        return LayeredModel(b.layers, b.input_shape if b.k else a.input_shape)
    if b.k == 0:
        return LayeredModel(a.layers, a.input_shape)
    if a.output_shape != b.input_shape:
        raise ShapeError(f"cannot concatenate: {a.output_shape} feeds {b.input_shape}")
    return LayeredModel(a.layers + b.layers, a.input_shape)


@dataclass
class Tape:
    inputs: np.ndarray
    caches: list = field(default_factory=list)


@dataclass
class GradientPacket:
    boundary_grad: np.ndarray
    param_grads: list[list[np.ndarray]]
    loss_value: float | None = None


def forward(m: LayeredModel, x: np.ndarray, record_tape: bool = False, train: bool = False):
    """Run ``x`` (batch-first) through ``m``. Returns ``(output, tape)``; tape is
    ``None`` unless ``record_tape`` is set."""
    x = np.asarray(x, dtype=np.float64)
    if m.input_shape is not None and tuple(x.shape[1:]) != m.input_shape:
        raise ShapeError(f"input shape {x.shape[1:]} does not match model input {m.input_shape}")
    tape = Tape(inputs=x) if record_tape else None
    h = x
    for layer in m.layers:
        h, cache = layer.forward(h, train)
        if tape is not None:
            tape.caches.append(cache)
    return h, tape


def backward(m: LayeredModel, tape: Tape | None, upstream_grad: np.ndarray) -> GradientPacket:
    if tape is None:
        raise RuntimeError("backward needs a tape recorded by forward(record_tape=True)")
    if len(tape.caches) != m.k:
        raise RuntimeError("tape was recorded on a different model")
    g = np.asarray(upstream_grad, dtype=np.float64)
    expected = (tape.inputs.shape[0],) + tuple(m.output_shape or tape.inputs.shape[1:])
    if g.shape != expected:
        raise ShapeError(f"upstream gradient shape {g.shape} does not match output {expected}")
    grads: list[list[np.ndarray]] = [None] * m.k
    for j in range(m.k - 1, -1, -1):
        g, grads[j] = m.layers[j].backward(tape.caches[j], g)
    return GradientPacket(boundary_grad=g, param_grads=grads)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(logsum - z[np.arange(n), labels]))
    g = softmax(logits)
    g[np.arange(n), labels] -= 1.0
    return loss, g / n


def per_sample_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    z = logits - logits.max(axis=1, keepdims=True)
    return np.log(np.exp(z).sum(axis=1)) - z[np.arange(len(labels)), labels]


def sgd_step(m: LayeredModel, grads: list[list[np.ndarray]], lr: float, l2_lambda: float = 0.0) -> LayeredModel:
    """In place: ``p <- p - lr * (grad + l2_lambda * p)`` for every trained parameter."""
    if lr < 0 or l2_lambda < 0:
        raise ValueError("lr and l2_lambda must be non-negative")
    if len(grads) != m.k:
        raise ValueError("one gradient list per layer expected")
    for layer_grads in grads:
        for g in layer_grads:
            if not np.all(np.isfinite(g)):
                raise FloatingPointError("non-finite gradient")
    for layer, layer_grads in zip(m.layers, grads):
        for p, g in zip(layer.params, layer_grads):
            if l2_lambda:
                p -= lr * (g + l2_lambda * p)
            else:
                p -= lr * g
    return m


def predict(m: LayeredModel, x: np.ndarray, batch_size: int = 512) -> np.ndarray:
    out = [forward(m, x[i:i + batch_size])[0] for i in range(0, len(x), batch_size)]
    return np.concatenate(out).argmax(axis=1)


def model_flops(m: LayeredModel) -> list[int]:
    return [layer.flops() for layer in m.layers]


def save_model(path, m: LayeredModel) -> None:
    """Write a checkpoint (``.npz``); parameters round-trip bit-exactly."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "k": m.k,
        "input_shape": list(m.input_shape) if m.input_shape is not None else None,
        "layers": [
            {"kind": layer.kind, **layer.config(), "in_shape": list(layer.in_shape)} for layer in m.layers
        ],
    }
    arrays = {"meta": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)}
    for j, layer in enumerate(m.layers):
        for i, p in enumerate(layer.params):
            arrays[f"p{j}_{i}"] = p
        for i, b in enumerate(layer.buffers):
            arrays[f"b{j}_{i}"] = b
    write_npz(path, arrays)


def load_model(path) -> LayeredModel:
    with np.load(Path(path)) as data:
        meta = json.loads(data["meta"].tobytes().decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        layers = []
        for j, spec in enumerate(meta["layers"]):
            spec = dict(spec)
            kind, in_shape = spec.pop("kind"), spec.pop("in_shape")
            layer = make_layer(kind, in_shape, None, **spec)
            layer.params = [data[f"p{j}_{i}"].copy() for i in range(len(layer.params))]
            layer.buffers = [data[f"b{j}_{i}"].copy() for i in range(len(layer.buffers))]
            layers.append(layer)
    if len(layers) != meta["k"]:
        raise ValueError("checkpoint layer count mismatch")
    return LayeredModel(layers, meta["input_shape"])
