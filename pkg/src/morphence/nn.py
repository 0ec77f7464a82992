"""Small fully connected network engine.

Weights are stored as float32 by default; every forward/backward pass is
carried out in float64 so losses and gradients accumulate in double
precision.  Models are treated as immutable values: ``sgd_step``,
``train`` and ``perturb_weights`` all return new models.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

ACTIVATIONS = ("relu", "tanh", "linear")

_MAGIC = b"MPHM"
_FORMAT_VERSION = 1


class ShapeError(ValueError):
    """Array shapes do not match the model."""


class ValidationError(ValueError):
    """Input values are outside what an operation accepts."""


@dataclass
class Layer:
    weight: np.ndarray  # (fan_in, fan_out)
    bias: np.ndarray  # (fan_out,)
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValidationError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ShapeError(
                f"layer weight {self.weight.shape} and bias {self.bias.shape} disagree"
            )

    def copy(self) -> "Layer":
        return Layer(self.weight.copy(), self.bias.copy(), self.activation)


@dataclass
class Model:
    """Feed-forward classifier; the last layer emits logits fed to softmax."""

    layers: list[Layer]
    arch_id: str = "mlp"

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("a model needs at least one layer")
        for i in range(len(self.layers) - 1):
            out_w = self.layers[i].weight.shape[1]
            in_w = self.layers[i + 1].weight.shape[0]
            if out_w != in_w:
                raise ShapeError(f"layer {i} outputs {out_w} but layer {i + 1} expects {in_w}")

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def num_classes(self) -> int:
        return self.layers[-1].weight.shape[1]

    @property
    def sizes(self) -> list[int]:
        return [self.input_dim] + [layer.weight.shape[1] for layer in self.layers]

    @property
    def hidden_activation(self) -> str:
        return self.layers[0].activation if len(self.layers) > 1 else "linear"

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def flat_params(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    def copy(self) -> "Model":
        return Model([layer.copy() for layer in self.layers], self.arch_id)

    def astype(self, dtype) -> "Model":
        return Model(
            [Layer(l.weight.astype(dtype), l.bias.astype(dtype), l.activation) for l in self.layers],
            self.arch_id,
        )

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return forward(self, x)


@dataclass
class Batch:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=np.float64))
        self.y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        if len(self.x) != len(self.y):
            raise ShapeError(f"{len(self.x)} inputs but {len(self.y)} labels")

    def __len__(self):
        return len(self.y)


@dataclass
class GradientSet:
    weight_grads: list[tuple[np.ndarray, np.ndarray]]
    input_grads: np.ndarray = field(default=None)

    def flat(self) -> np.ndarray:
        return np.concatenate([g.ravel() for pair in self.weight_grads for g in pair])


def init_model(
    sizes: Sequence[int],
    activation: str = "relu",
    seed: int = 0,
    arch_id: str | None = None,
    dtype=np.float32,
) -> Model:
    """He/Glorot-initialised MLP with layer widths ``sizes``."""
    if len(sizes) < 2 or any(int(s) < 1 for s in sizes):
        raise ValidationError(f"invalid layer sizes {sizes}")
    rng = np.random.default_rng(seed)
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == len(sizes) - 2
        gain = 2.0 if activation == "relu" and not last else 1.0
        w = rng.normal(0.0, np.sqrt(gain / fan_in), size=(fan_in, fan_out))
        layers.append(
            Layer(w.astype(dtype), np.zeros(fan_out, dtype=dtype), "linear" if last else activation)
        )
    if arch_id is None:
        arch_id = f"mlp-{'x'.join(str(s) for s in sizes)}-{activation}"
    return Model(layers, arch_id)


def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _act_grad(name, z, a):
    if name == "relu":
        return (z > 0).astype(np.float64)
    if name == "tanh":
        return 1.0 - a * a
    return np.ones_like(z)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_inputs(model: Model, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ShapeError(f"expected inputs of width {model.input_dim}, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValidationError("inputs contain non-finite values")
    return x


def _forward_cache(model: Model, x: np.ndarray):
    acts = [x]
    pre = []
    a = x
    for layer in model.layers:
        z = a @ layer.weight.astype(np.float64) + layer.bias.astype(np.float64)
        a = _act(layer.activation, z)
        pre.append(z)
        acts.append(a)
    return pre, acts


def logits(model: Model, x) -> np.ndarray:
    x = _check_inputs(model, x)
    return _forward_cache(model, x)[1][-1]


def forward(model: Model, x) -> np.ndarray:
    """Class-probability matrix, one row per input."""
    return softmax(logits(model, x))


def predict(model: Model, x) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. lowest index on ties
    return np.argmax(logits(model, x), axis=1)


def _backprop(model: Model, pre, acts, dlogits):
    weight_grads = []
    delta = dlogits
    for li in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[li]
        delta = delta * _act_grad(layer.activation, pre[li], acts[li + 1])
        weight_grads.append((acts[li].T @ delta, delta.sum(axis=0)))
        delta = delta @ layer.weight.astype(np.float64).T
    weight_grads.reverse()
    return weight_grads, delta


def input_gradient(model: Model, x, dlogits: np.ndarray) -> np.ndarray:
    """Back-propagate an arbitrary upstream gradient on the logits to the inputs."""
    x = _check_inputs(model, x)
    pre, acts = _forward_cache(model, x)
    dlogits = np.asarray(dlogits, dtype=np.float64)
    if dlogits.shape != acts[-1].shape:
        raise ShapeError(f"logit gradient shape {dlogits.shape} != {acts[-1].shape}")
    return _backprop(model, pre, acts, dlogits)[1]


def _check_batch(model: Model, batch) -> tuple[np.ndarray, np.ndarray]:
    x = _check_inputs(model, batch.x)
    y = np.asarray(batch.y, dtype=np.int64).reshape(-1)
    if len(y) == 0:
        raise ValidationError("empty batch")
    if len(y) != len(x):
        raise ShapeError(f"{len(x)} inputs but {len(y)} labels")
    if y.min() < 0 or y.max() >= model.num_classes:
        raise ValidationError("labels outside [0, num_classes)")
    return x, y


def per_example_loss(model: Model, batch) -> np.ndarray:
    x, y = _check_batch(model, batch)
    z = logits(model, x)
    z = z - z.max(axis=1, keepdims=True)
    log_p = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return -log_p[np.arange(len(y)), y]


def loss(model: Model, batch) -> float:
    """Mean cross-entropy of ``batch`` under ``model``."""
    return float(per_example_loss(model, batch).mean())


def backward(model: Model, batch) -> GradientSet:
    """Gradients of the mean cross-entropy w.r.t. weights, biases and inputs."""
    x, y = _check_batch(model, batch)
    pre, acts = _forward_cache(model, x)
    dz = softmax(acts[-1])
    dz[np.arange(len(y)), y] -= 1.0
    dz /= len(y)
    weight_grads, dx = _backprop(model, pre, acts, dz)
    return GradientSet(weight_grads, dx)


def sgd_step(model: Model, grads: GradientSet, lr: float) -> Model:
    """One plain SGD update: every parameter becomes ``theta - lr * g``."""
    if len(grads.weight_grads) != len(model.layers):
        raise ShapeError("gradient set does not match model depth")
    layers = []
    for layer, (gw, gb) in zip(model.layers, grads.weight_grads):
        if gw.shape != layer.weight.shape or gb.shape != layer.bias.shape:
            raise ShapeError("gradient shapes do not match model parameters")
        dtype = layer.weight.dtype
        w = (layer.weight.astype(np.float64) - lr * gw).astype(dtype)
        b = (layer.bias.astype(np.float64) - lr * gb).astype(dtype)
        layers.append(Layer(w, b, layer.activation))
    return Model(layers, model.arch_id)


def train(
    model: Model,
    data,
    lr: float = 0.1,
    batch_size: int = 32,
    epochs: int = 1,
    rng_seed: int = 0,
) -> Model:
    """Mini-batch SGD on ``data`` (anything exposing ``x`` and ``y``).

    Deterministic for a given ``rng_seed``.
    """
    if epochs < 1:
        raise ValidationError("epochs must be >= 1")
    if batch_size < 1 or lr <= 0:
        raise ValidationError("batch_size and lr must be positive")
    x, y = _check_batch(model, data)
    rng = np.random.default_rng(rng_seed)
    dtype = model.layers[0].weight.dtype
    work = model.astype(np.float64)
    n = len(y)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            xb, yb = x[idx], y[idx]
            pre, acts = _forward_cache(work, xb)
            dz = softmax(acts[-1])
            dz[np.arange(len(yb)), yb] -= 1.0
            dz /= len(yb)
            weight_grads, _ = _backprop(work, pre, acts, dz)
            for layer, (gw, gb) in zip(work.layers, weight_grads):
                layer.weight -= lr * gw
                layer.bias -= lr * gb
    return work.astype(dtype)


def sample_laplace(shape, mu: float = 0.0, lam: float = 1.0, rng_seed=0) -> np.ndarray:
    """I.i.d. Laplace(mu, lam) draws with density exp(-|t - mu| / lam) / (2 lam)."""
    if not lam > 0:
        raise ValidationError(f"Laplace scale must be positive, got {lam}")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    return rng.laplace(mu, lam, size=shape)


def perturb_weights(base: Model, lam: float, rng_seed=0) -> Model:
    """Add independent Laplace(0, lam) noise to every weight and bias.

    ``lam == 0`` yields an exact copy.
    """
    if lam < 0:
        raise ValidationError(f"noise scale must be >= 0, got {lam}")
    if lam == 0:
        return base.copy()
    rng = np.random.default_rng(rng_seed)
    layers = []
    for layer in base.layers:
        w = layer.weight + sample_laplace(layer.weight.shape, 0.0, lam, rng)
        b = layer.bias + sample_laplace(layer.bias.shape, 0.0, lam, rng)
        layers.append(Layer(w.astype(layer.weight.dtype), b.astype(layer.bias.dtype), layer.activation))
    return Model(layers, base.arch_id)


def accuracy(model: Model, data) -> float:
    x, y = _check_batch(model, data)
    return float(np.mean(predict(model, x) == y))


def save_model(model: Model, path) -> None:
    """Write ``model`` to a versioned binary container (bit-exact round trip)."""
    header = {
        "arch_id": model.arch_id,
        "layers": [
            {
                "shape": list(layer.weight.shape),
                "activation": layer.activation,
                "dtype": layer.weight.dtype.str.lstrip("<>|="),
            }
            for layer in model.layers
        ],
    }
    raw = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _FORMAT_VERSION, len(raw)))
        fh.write(raw)
        for layer in model.layers:
            for arr in (layer.weight, layer.bias):
                fh.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())


def load_model(path) -> Model:
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise ValidationError(f"{path}: not a model container")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != _FORMAT_VERSION:
        raise ValidationError(f"{path}: unsupported container version {version}")
    header = json.loads(data[12 : 12 + hlen])
    offset = 12 + hlen
    layers = []
    for spec in header["layers"]:
        dtype = np.dtype("<" + spec["dtype"])
        fan_in, fan_out = spec["shape"]
        arrays = []
        for count, shape in ((fan_in * fan_out, (fan_in, fan_out)), (fan_out, (fan_out,))):
            nbytes = count * dtype.itemsize
            if offset + nbytes > len(data):
                raise ValidationError(f"{path}: truncated model container")
            arrays.append(np.frombuffer(data, dtype, count, offset).reshape(shape).astype(dtype.newbyteorder("=")))
            offset += nbytes
        layers.append(Layer(arrays[0], arrays[1], spec["activation"]))
    return Model(layers, header["arch_id"])
