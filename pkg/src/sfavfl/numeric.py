"""Dense neural-network kernel: layers, activations, loss, backprop and SGD.

Batch convention: rows are samples. A layer with weight ``W`` of shape
``(out_features, in_features)`` maps a batch ``X`` of shape
``(batch, in_features)`` to ``X @ W.T + bias``.

Everything here is float64 and side-effect free; ``sgd_step`` returns a new
model rather than mutating the old one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

ACTIVATIONS = ("relu", "identity", "sigmoid")


class ShapeError(ValueError):
    """Raised when matrix dimensions do not line up."""


class InputError(ValueError):
    """Raised for out-of-domain inputs such as invalid class labels."""


class StateError(RuntimeError):
    """Raised when a cached forward pass does not belong to the model."""


def as_matrix(a) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    if not np.isfinite(m).all():
        raise InputError("matrix has NaN or infinite entries")
    return m


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


@dataclass
class DenseLayer:
    weight: np.ndarray
    bias: Optional[np.ndarray] = None

    def __post_init__(self):
        self.weight = as_matrix(self.weight)
        if self.bias is not None:
            self.bias = as_matrix(self.bias)
            if self.bias.shape != (1, self.weight.shape[0]):
                raise ShapeError(
                    f"bias shape {self.bias.shape} does not match "
                    f"out_features={self.weight.shape[0]}"
                )

    @property
    def use_bias(self) -> bool:
        return self.bias is not None

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    def copy(self) -> "DenseLayer":
        return DenseLayer(
            self.weight.copy(), None if self.bias is None else self.bias.copy()
        )


@dataclass
class Mlp:
    layers: list
    activations: list
    _token: object = field(default_factory=object, repr=False, compare=False)

    def __post_init__(self):
        if len(self.layers) != len(self.activations):
            raise ShapeError("one activation is required per layer")
        for act in self.activations:
            if act not in ACTIVATIONS:
                raise InputError(f"unknown activation {act!r}")
        for k in range(len(self.layers) - 1):
            if self.layers[k].out_features != self.layers[k + 1].in_features:
                raise ShapeError(
                    f"layer {k} emits {self.layers[k].out_features} features "
                    f"but layer {k + 1} expects {self.layers[k + 1].in_features}"
                )

    @property
    def in_features(self) -> int:
        return self.layers[0].in_features

    @property
    def out_features(self) -> int:
        return self.layers[-1].out_features

    def __len__(self) -> int:
        return len(self.layers)

    def copy(self) -> "Mlp":
        return Mlp([layer.copy() for layer in self.layers], list(self.activations))


@dataclass
class LayerGrad:
    weight: np.ndarray
    bias: Optional[np.ndarray] = None


@dataclass
class ForwardCache:
    """Per-layer inputs and pre-activations kept for the backward pass."""

    token: object
    inputs: list
    pre: list
    post: list


def init_bound(in_features: int) -> float:
    return 2.0 / np.sqrt(in_features)


def init_dense(
    rng: np.random.Generator, in_features: int, out_features: int, use_bias: bool = True
) -> DenseLayer:
    """Uniform(-b, b) initialisation with b = 2/sqrt(in_features)."""
    b = init_bound(in_features)
    weight = rng.uniform(-b, b, size=(out_features, in_features))
    bias = rng.uniform(-b, b, size=(1, out_features)) if use_bias else None
    return DenseLayer(weight, bias)


def build_mlp(
    widths: Sequence[int],
    rng: np.random.Generator,
    activations: Optional[Sequence[str]] = None,
    biases: Optional[Sequence[bool]] = None,
) -> Mlp:
    """Chain of dense layers ``widths[0] -> widths[1] -> ... -> widths[-1]``.

    Defaults to ReLU between layers and an identity output, with biases on
    every layer.
    """
    n = len(widths) - 1
    if n < 1:
        raise ShapeError("an MLP needs at least one layer")
    if activations is None:
        activations = ["relu"] * (n - 1) + ["identity"]
    if biases is None:
        biases = [True] * n
    layers = [
        init_dense(rng, widths[k], widths[k + 1], biases[k]) for k in range(n)
    ]
    return Mlp(layers, list(activations))


def _activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "sigmoid":
        return 0.5 * (1.0 + np.tanh(0.5 * z))
    return z


def _activate_grad(name: str, z: np.ndarray, out: np.ndarray, grad: np.ndarray):
    if name == "relu":
        return grad * (z > 0)
    if name == "sigmoid":
        return grad * out * (1.0 - out)
    return grad


def dense_forward(layer: DenseLayer, x) -> np.ndarray:
    x = as_matrix(x)
    if x.shape[1] != layer.in_features:
        raise ShapeError(
            f"input has {x.shape[1]} features, layer expects {layer.in_features}"
        )
    z = x @ layer.weight.T
    if layer.bias is not None:
        z = z + layer.bias
    return z


def mlp_forward(model: Mlp, x) -> tuple[np.ndarray, ForwardCache]:
    h = as_matrix(x)
    if h.shape[1] != model.in_features:
        raise ShapeError(
            f"input has {h.shape[1]} features, model expects {model.in_features}"
        )
    inputs, pre, post = [], [], []
    for layer, act in zip(model.layers, model.activations):
        inputs.append(h)
        z = dense_forward(layer, h)
        h = _activate(act, z)
        pre.append(z)
        post.append(h)
    return h, ForwardCache(model._token, inputs, pre, post)


def mlp_backward(
    model: Mlp, cache: ForwardCache, grad_output
) -> tuple[np.ndarray, list]:
    """Backpropagate ``grad_output`` (dL/d output) through the model.

    Returns the gradient with respect to the model input and one
    :class:`LayerGrad` per layer, in layer order.
    """
    if cache.token is not model._token or len(cache.inputs) != len(model.layers):
        raise StateError("forward cache does not belong to this model")
    g = as_matrix(grad_output)
    if g.shape != cache.post[-1].shape:
        raise ShapeError(
            f"grad_output shape {g.shape} != output shape {cache.post[-1].shape}"
        )
    grads = [None] * len(model.layers)
    for k in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[k]
        g = _activate_grad(model.activations[k], cache.pre[k], cache.post[k], g)
        gw = g.T @ cache.inputs[k]
        gb = g.sum(axis=0, keepdims=True) if layer.bias is not None else None
        grads[k] = LayerGrad(gw, gb)
        g = g @ layer.weight
    return g, grads


def softmax_cross_entropy(logits, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of softmax(logits) and its gradient w.r.t. logits."""
    logits = as_matrix(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    batch, classes = logits.shape
    if labels.shape[0] != batch:
        raise ShapeError(f"{labels.shape[0]} labels for a batch of {batch}")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise InputError(f"labels must lie in [0, {classes})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    rows = np.arange(batch)
    loss = float(-log_probs[rows, labels].mean())
    grad = np.exp(log_probs)
    grad[rows, labels] -= 1.0
    return loss, grad / batch


def mse_loss(pred, target) -> tuple[float, np.ndarray]:
    """Mean squared error over all entries and its gradient w.r.t. ``pred``."""
    pred = as_matrix(pred)
    target = as_matrix(target)
    if pred.shape != target.shape:
        raise ShapeError(f"shape mismatch {pred.shape} vs {target.shape}")
    diff = pred - target
    return float(np.mean(diff**2)), 2.0 * diff / diff.size


def sgd_step(model: Mlp, grads: Sequence[LayerGrad], learning_rate: float) -> Mlp:
    if len(grads) != len(model.layers):
        raise ShapeError(f"{len(grads)} gradients for {len(model.layers)} layers")
    layers = []
    for layer, g in zip(model.layers, grads):
        if g.weight.shape != layer.weight.shape:
            raise ShapeError(
                f"weight grad {g.weight.shape} != weight {layer.weight.shape}"
            )
        weight = layer.weight - learning_rate * g.weight
        bias = None
        if layer.bias is not None:
            if g.bias is None or g.bias.shape != layer.bias.shape:
                raise ShapeError("bias gradient missing or mis-shaped")
            bias = layer.bias - learning_rate * g.bias
        layers.append(DenseLayer(weight, bias))
    return Mlp(layers, list(model.activations))


def predict(model: Mlp, x) -> np.ndarray:
    out, _ = mlp_forward(model, x)
    return out


def accuracy(logits, labels) -> float:
    labels = np.asarray(labels).reshape(-1)
    if labels.size == 0:
        return 0.0
    return float(np.mean(np.argmax(logits, axis=1) == labels))
