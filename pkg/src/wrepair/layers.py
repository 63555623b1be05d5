"""Layers, model assembly, SGD with momentum, and the step learning-rate schedule."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


class BatchTooSmallError(ValueError):
    pass


class MethodInapplicableError(ValueError):
    pass


TRAIN = "train"
INFERENCE = "inference"
WEIGHTED_TRAIN = "weighted-train"


class DenseLayer:
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        limit = np.sqrt(6.0 / in_dim)  # He-uniform for ReLU nets
        w = rng.uniform(-limit, limit, size=(in_dim, out_dim))
        self.weight = Tensor(w.astype(np.float32), requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim, dtype=np.float32), requires_grad=True)

    @property
    def in_dim(self):
        return self.weight.shape[0]

    @property
    def out_dim(self):
        return self.weight.shape[1]

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x: Tensor) -> Tensor:
        return T.add(T.matmul(x, self.weight), self.bias)

    def forward_plain(self, x: np.ndarray) -> np.ndarray:
        return x @ self.weight.data + self.bias.data


class ReluLayer:
    def params(self):
        return []

    def forward(self, x: Tensor) -> Tensor:
        return T.relu(x)

    def forward_plain(self, x: np.ndarray) -> np.ndarray:
        return np.maximum(x, 0)


class BatchNormLayer:
    """Per-channel batch normalization with an optional weighted-statistics mode.

    In weighted-train mode the batch mean/variance are a rho-blend of the
    regular batch's moments and a companion target batch's moments; the
    companion contributes constants only, so gradients flow exclusively
    through the regular batch.
    """

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(channels, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)
        self.momentum = momentum
        self.eps = eps

    @property
    def channels(self):
        return self.gamma.shape[0]

    def params(self):
        return [self.gamma, self.beta]

    def forward(self, x: Tensor, mode: str = TRAIN, x_target: np.ndarray | None = None,
                rho: float = 1.0):
        """Returns the normalized batch; in weighted-train mode also the
        normalized companion batch (a plain array)."""
        if mode == INFERENCE:
            dt = x.dtype
            inv = (1.0 / np.sqrt(self.running_var.astype(dt) + dt.type(self.eps)))
            y = T.add(T.mul(T.sub(x, Tensor(self.running_mean.astype(dt))),
                            T.mul(self.gamma, Tensor(inv))), self.beta)
            return y
        n = x.shape[0]
        if n < 2:
            raise BatchTooSmallError(f"batchnorm training needs n >= 2, got {n}")
        if mode == WEIGHTED_TRAIN:
            if x_target is None or x_target.shape[0] < 2:
                raise BatchTooSmallError("weighted-train needs a companion batch with m >= 2")
            if not 0.0 <= rho <= 1.0:
                raise ValueError(f"rho must be in [0,1], got {rho}")
            mt = np.mean(x_target, axis=0, dtype=np.float64).astype(x.dtype)
            m2t = np.mean(x_target.astype(np.float64) ** 2, axis=0).astype(x.dtype)
        elif mode == TRAIN:
            rho = 1.0
            mt = np.zeros(self.channels, dtype=x.dtype.type)
            m2t = np.zeros(self.channels, dtype=x.dtype.type)
        else:
            raise ValueError(f"unknown batchnorm mode {mode!r}")

        # blended first and second moments; companion terms are constants
        mean = T.add(T.scale(T.mean0(x), rho), Tensor(mt * (1.0 - rho)))
        m2 = T.add(T.scale(T.mean0(T.mul(x, x)), rho), Tensor(m2t * (1.0 - rho)))
        var = T.relu(T.sub(m2, T.mul(mean, mean)))  # clamp numerical negatives at 0
        inv = T.rsqrt(T.add(var, Tensor(np.full(self.channels, self.eps, dtype=x.dtype))))
        y = T.add(T.mul(T.sub(x, mean), T.mul(self.gamma, inv)), self.beta)

        m = self.momentum
        self.running_mean = ((1 - m) * self.running_mean + m * mean.data).astype(np.float32)
        self.running_var = ((1 - m) * self.running_var + m * var.data).astype(np.float32)

        if mode == WEIGHTED_TRAIN:
            yt = (x_target - mean.data) * (self.gamma.data * inv.data) + self.beta.data
            return y, yt
        return y

    def forward_plain(self, x: np.ndarray) -> np.ndarray:
        inv = 1.0 / np.sqrt(self.running_var + self.eps)
        return (x - self.running_mean) * (self.gamma.data * inv) + self.beta.data


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 0.1
    momentum: float = 0.9
    seed: int = 0
    milestones: tuple = (0.5, 0.75)

    def __post_init__(self):
        if self.epochs <= 0:
            raise ValueError("epochs must be > 0")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be > 0")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Base lr scaled by 0.1 per passed milestone (fractions of total epochs)."""
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    passed = sum(epoch >= m * cfg.epochs for m in cfg.milestones)
    return cfg.lr * 0.1 ** passed


SINGLE_LABEL = "single-label"
MULTI_LABEL = "multi-label"


class Model:
    """Ordered layer list ending in a dense layer producing C logits.

    ``rep_tap`` is the layer index whose *input* is the representation used
    by centroid-based repairs; it defaults to the final dense layer.
    """

    def __init__(self, layers: list, task: str = SINGLE_LABEL, rep_tap: int | None = None):
        if task not in (SINGLE_LABEL, MULTI_LABEL):
            raise ValueError(f"unknown task kind {task!r}")
        if not layers or not isinstance(layers[-1], DenseLayer):
            raise ValueError("model must end with a dense layer")
        dims_ok = True
        cur = None
        for layer in layers:
            if isinstance(layer, DenseLayer):
                if cur is not None and cur != layer.in_dim:
                    dims_ok = False
                cur = layer.out_dim
            elif isinstance(layer, BatchNormLayer):
                if cur is not None and cur != layer.channels:
                    dims_ok = False
        if not dims_ok:
            raise ValueError("layer dimensions do not chain")
        self.layers = layers
        self.task = task
        self.rep_tap = rep_tap if rep_tap is not None else len(layers) - 1

    @property
    def num_classes(self):
        return self.layers[-1].out_dim

    @property
    def in_dim(self):
        for layer in self.layers:
            if isinstance(layer, DenseLayer):
                return layer.in_dim
        raise ValueError("model has no dense layer")

    def params(self):
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def has_batchnorm(self):
        return any(isinstance(l, BatchNormLayer) for l in self.layers)

    def forward(self, x, mode: str = INFERENCE, companion: np.ndarray | None = None,
                rho: float = 1.0, companion_cache: list | None = None):
        """Forward pass returning (logits, representation).

        In weighted-train mode the companion batch is pushed through every
        layer as constants so each batch-norm layer sees it. A precomputed
        ``companion_cache`` (one array per batch-norm layer) pins the
        companion activations instead, matching their stop-gradient role.
        """
        h = x if isinstance(x, Tensor) else Tensor(x)
        if h.data.ndim != 2 or h.shape[1] != self.in_dim:
            raise T.DimensionError(
                f"input shape {h.shape} incompatible with model input dim {self.in_dim}"
            )
        ht = companion
        rep = None
        bn_seen = 0
        for i, layer in enumerate(self.layers):
            if i == self.rep_tap:
                rep = h
            if isinstance(layer, BatchNormLayer):
                if mode == WEIGHTED_TRAIN:
                    xt = companion_cache[bn_seen] if companion_cache is not None else ht
                    h, ht = layer.forward(h, WEIGHTED_TRAIN, x_target=xt, rho=rho)
                    bn_seen += 1
                else:
                    h = layer.forward(h, mode)
            else:
                h = layer.forward(h)
                if ht is not None:
                    ht = layer.forward_plain(ht)
        if rep is None:
            rep = h
        return h, rep

    def companion_bn_inputs(self, x, companion: np.ndarray, rho: float) -> list:
        """The companion batch's input to each batch-norm layer, captured in
        one weighted-train forward with the current parameters."""
        with T.no_grad():
            cache = []
            h = Tensor(x)
            ht = companion
            for layer in self.layers:
                if isinstance(layer, BatchNormLayer):
                    cache.append(ht)
                    h, ht = layer.forward(h, WEIGHTED_TRAIN, x_target=ht, rho=rho)
                else:
                    h = layer.forward(h)
                    ht = layer.forward_plain(ht)
        return cache

    def predict_logits(self, x: np.ndarray) -> np.ndarray:
        with T.no_grad():
            logits, _ = self.forward(x, INFERENCE)
        return logits.data

    def clone(self) -> "Model":
        raw = save_model_bytes(self)
        return load_model_bytes(raw)


def mlp(in_dim: int, hidden_dims: list[int], num_classes: int, *, batchnorm=True,
        task=SINGLE_LABEL, seed=0) -> Model:
    rng = np.random.default_rng(seed)
    layers = []
    cur = in_dim
    for h in hidden_dims:
        layers.append(DenseLayer(cur, h, rng))
        if batchnorm:
            layers.append(BatchNormLayer(h))
        layers.append(ReluLayer())
        cur = h
    layers.append(DenseLayer(cur, num_classes, rng))
    return Model(layers, task=task)


class SGD:
    """SGD with momentum: v <- mu*v + g; theta <- theta - lr*v."""

    def __init__(self, params, momentum: float = 0.9):
        self.params = list(params)
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr: float):
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad
            p.data = p.data - (lr * v).astype(p.dtype)


MAGIC = b"WRNET001"


def save_model_bytes(model: Model) -> bytes:
    arch = []
    tensors = []
    for layer in model.layers:
        if isinstance(layer, DenseLayer):
            arch.append({"kind": "dense", "in": layer.in_dim, "out": layer.out_dim})
            tensors += [layer.weight.data, layer.bias.data]
        elif isinstance(layer, BatchNormLayer):
            arch.append({"kind": "batchnorm", "channels": layer.channels,
                         "momentum": layer.momentum, "eps": layer.eps})
            tensors += [layer.gamma.data, layer.beta.data,
                        layer.running_mean, layer.running_var]
        elif isinstance(layer, ReluLayer):
            arch.append({"kind": "relu"})
        else:
            raise ValueError(f"unknown layer type {type(layer).__name__}")
    manifest = [list(t.shape) for t in tensors]
    header = json.dumps({"arch": arch, "task": model.task, "rep_tap": model.rep_tap,
                         "manifest": manifest}).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(t, dtype="<f4").tobytes() for t in tensors)
    return MAGIC + struct.pack("<I", len(header)) + header + payload


def load_model_bytes(raw: bytes) -> Model:
    if raw[:8] != MAGIC:
        raise ValueError(f"bad checkpoint magic {raw[:8]!r}, expected {MAGIC!r}")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    offset = 12 + hlen
    tensors = []
    for shape in header["manifest"]:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
        tensors.append(arr.reshape(shape).copy())
        offset += 4 * count
    it = iter(tensors)
    rng = np.random.default_rng(0)
    layers = []
    for spec in header["arch"]:
        if spec["kind"] == "dense":
            layer = DenseLayer(spec["in"], spec["out"], rng)
            layer.weight = Tensor(next(it), requires_grad=True)
            layer.bias = Tensor(next(it), requires_grad=True)
        elif spec["kind"] == "batchnorm":
            layer = BatchNormLayer(spec["channels"], spec["momentum"], spec["eps"])
            layer.gamma = Tensor(next(it), requires_grad=True)
            layer.beta = Tensor(next(it), requires_grad=True)
            layer.running_mean = next(it)
            layer.running_var = next(it)
        elif spec["kind"] == "relu":
            layer = ReluLayer()
        else:
            raise ValueError(f"unknown layer kind {spec['kind']!r}")
        layers.append(layer)
    return Model(layers, task=header["task"], rep_tap=header["rep_tap"])


def save_model(model: Model, path) -> None:
    with open(path, "wb") as fh:
        fh.write(save_model_bytes(model))


def load_model(path) -> Model:
    with open(path, "rb") as fh:
        return load_model_bytes(fh.read())


def model_grad_check(model: Model, x: np.ndarray, y, eps=1e-4, tol=1e-3,
                     mode: str = TRAIN, companion: np.ndarray | None = None,
                     rho: float = 1.0):
    """Finite-difference check of every parameter gradient for one batch.

    In weighted-train mode the companion activations are captured once and
    pinned, since the analytic gradient treats them as constants.
    """
    from .tensor import grad_check, softmax_cross_entropy, sigmoid_bce

    cache = None
    if mode == WEIGHTED_TRAIN:
        cache = model.companion_bn_inputs(x, companion, rho)

    def loss_fn():
        logits, _ = model.forward(x, mode, companion=companion, rho=rho,
                                  companion_cache=cache)
        if model.task == SINGLE_LABEL:
            return softmax_cross_entropy(logits, y)
        return sigmoid_bce(logits, y)

    return grad_check(loss_fn, model.params(), eps=eps, tol=tol)
