"""Fully connected network with softmax cross-entropy, exact backprop and plain SGD.

All arithmetic is float64. Weight matrices are stored ``[fan_out, fan_in]`` so a
layer computes ``z = x @ W.T + b``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterator, List, Sequence, Tuple

import numpy as np

from errors import InvalidArchitectureError, InvalidInputError, NumericError, ShapeError

if TYPE_CHECKING:
    from data import Split

ACTIVATIONS = ("relu", "identity")
EVAL_BATCH_SIZE = 1000


@dataclass
class Layer:
    weights: np.ndarray
    biases: np.ndarray
    activation: str = "relu"

    @property
    def fan_in(self) -> int:
        return self.weights.shape[1]

    @property
    def fan_out(self) -> int:
        return self.weights.shape[0]

    def activate(self, z: np.ndarray) -> np.ndarray:
        if self.activation == "relu":
            return np.maximum(z, 0.0)
        return z


@dataclass
class Network:
    """Ordered dense layers; the last one emits logits."""

    layers: List[Layer]

    def __post_init__(self):
        if not self.layers:
            raise InvalidArchitectureError("Network needs at least one layer")
        for k, layer in enumerate(self.layers):
            if layer.activation not in ACTIVATIONS:
                raise InvalidArchitectureError(f"Layer {k}: unknown activation {layer.activation!r}")
            if layer.weights.ndim != 2 or layer.biases.shape != (layer.fan_out,):
                raise InvalidArchitectureError(
                    f"Layer {k}: weights {layer.weights.shape} and biases {layer.biases.shape} do not match"
                )
            if k > 0 and layer.fan_in != self.layers[k - 1].fan_out:
                raise InvalidArchitectureError(
                    f"Layer {k} fan_in {layer.fan_in} != layer {k - 1} fan_out {self.layers[k - 1].fan_out}"
                )

    @property
    def layer_sizes(self) -> List[int]:
        return [self.layers[0].fan_in] + [layer.fan_out for layer in self.layers]

    @property
    def num_classes(self) -> int:
        return self.layers[-1].fan_out

    @property
    def num_weights(self) -> int:
        return sum(layer.weights.size for layer in self.layers)

    @property
    def num_biases(self) -> int:
        return sum(layer.biases.size for layer in self.layers)

    def parameters(self) -> Iterator[Tuple[str, np.ndarray]]:
        """Yield ``(location, array)`` for every weight matrix and bias vector, in layer order."""
        for k, layer in enumerate(self.layers):
            yield f"layer {k} weights", layer.weights
            yield f"layer {k} biases", layer.biases

    def copy(self) -> "Network":
        return Network([Layer(layer.weights.copy(), layer.biases.copy(), layer.activation) for layer in self.layers])

    def load_parameters(self, weights: Sequence[np.ndarray], biases: Sequence[np.ndarray]) -> None:
        """Overwrite parameters in place from congruent arrays (e.g. a checkpoint)."""
        if len(weights) != len(self.layers) or len(biases) != len(self.layers):
            raise ShapeError("Parameter count does not match the network")
        for layer, w, b in zip(self.layers, weights, biases):
            if w.shape != layer.weights.shape or b.shape != layer.biases.shape:
                raise ShapeError(f"Parameter shapes {w.shape}/{b.shape} do not match the network")
            layer.weights[...] = w
            layer.biases[...] = b


@dataclass
class ForwardCache:
    """Per-layer input signal ``x``, pre-activation ``z`` and activation ``y`` for one batch."""

    inputs: List[np.ndarray] = field(default_factory=list)
    pre_activations: List[np.ndarray] = field(default_factory=list)
    outputs: List[np.ndarray] = field(default_factory=list)

    @property
    def logits(self) -> np.ndarray:
        return self.outputs[-1]


@dataclass
class Gradients:
    weights: List[np.ndarray]
    biases: List[np.ndarray]

    def arrays(self) -> Iterator[Tuple[str, np.ndarray]]:
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            yield f"layer {k} weights", w
            yield f"layer {k} biases", b

    def __add__(self, other: "Gradients") -> "Gradients":
        check_congruent(self.weights, self.biases, other.weights, other.biases)
        return Gradients(
            [a + b for a, b in zip(self.weights, other.weights)],
            [a + b for a, b in zip(self.biases, other.biases)],
        )


@dataclass
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.inputs.ndim != 2 or self.labels.ndim != 1:
            raise ShapeError("Batch inputs must be 2-D and labels 1-D")
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ShapeError(
                f"Batch has {self.inputs.shape[0]} input rows but {self.labels.shape[0]} labels"
            )


def check_congruent(weights_a, biases_a, weights_b, biases_b) -> None:
    """Raise ``ShapeError`` unless two per-layer parameter lists have identical shapes."""
    if len(weights_a) != len(weights_b) or len(biases_a) != len(biases_b):
        raise ShapeError(f"Layer count mismatch: {len(weights_a)} vs {len(weights_b)}")
    for k, (wa, wb, ba, bb) in enumerate(zip(weights_a, weights_b, biases_a, biases_b)):
        if wa.shape != wb.shape or ba.shape != bb.shape:
            raise ShapeError(
                f"Layer {k}: shapes {wa.shape}/{ba.shape} and {wb.shape}/{bb.shape} differ"
            )


def init_network(layer_sizes: Sequence[int], seed: int, hidden_activation: str = "relu") -> Network:
    """He-initialized network: weights ~ N(0, 2/fan_in), zero biases, identity output layer."""
    if len(layer_sizes) < 2:
        raise InvalidArchitectureError(f"layer_sizes needs at least 2 entries, got {list(layer_sizes)}")
    if any(int(n) <= 0 for n in layer_sizes):
        raise InvalidArchitectureError(f"layer sizes must be positive, got {list(layer_sizes)}")
    rng = np.random.Generator(np.random.PCG64(seed))
    layers = []
    for k, (fan_in, fan_out) in enumerate(zip(layer_sizes[:-1], layer_sizes[1:])):
        weights = rng.standard_normal((fan_out, fan_in)) * np.sqrt(2.0 / fan_in)
        last = k == len(layer_sizes) - 2
        layers.append(Layer(weights, np.zeros(fan_out), "identity" if last else hidden_activation))
    return Network(layers)


def forward(net: Network, batch: Batch | np.ndarray) -> Tuple[np.ndarray, ForwardCache]:
    x = batch.inputs if isinstance(batch, Batch) else batch
    if x.ndim != 2 or x.shape[1] != net.layers[0].fan_in:
        raise ShapeError(f"Input shape {x.shape} does not fit first-layer fan_in {net.layers[0].fan_in}")
    cache = ForwardCache()
    for layer in net.layers:
        z = x @ layer.weights.T + layer.biases
        y = layer.activate(z)
        cache.inputs.append(x)
        cache.pre_activations.append(z)
        cache.outputs.append(y)
        x = y
    return x, cache


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def _check_labels(logits: np.ndarray, labels: np.ndarray) -> None:
    if logits.ndim != 2 or labels.ndim != 1 or logits.shape[0] != labels.shape[0]:
        raise ShapeError(f"Logits {logits.shape} and labels {labels.shape} do not match")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise InvalidInputError(f"Labels must lie in [0, {logits.shape[1]})")


def loss_softmax_xent(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean negative log-likelihood of the true class (log-sum-exp stabilized)."""
    _check_labels(logits, labels)
    logp = log_softmax(logits)
    return float(-logp[np.arange(labels.shape[0]), labels].mean())


def backprop_deltas(net: Network, cache: ForwardCache, dlogits: np.ndarray) -> List[np.ndarray]:
    """Propagate ``dL/dlogits`` back; returns ``dL/dz`` per layer, one row per example."""
    if len(cache.inputs) != len(net.layers):
        raise ShapeError(f"Cache has {len(cache.inputs)} layers, network has {len(net.layers)}")
    for k, layer in enumerate(net.layers):
        if cache.inputs[k].shape[1] != layer.fan_in or cache.outputs[k].shape[1] != layer.fan_out:
            raise ShapeError(f"Cache layer {k} does not match the network (stale cache)")
    if dlogits.shape != cache.logits.shape:
        raise ShapeError(f"Output gradient {dlogits.shape} does not match logits {cache.logits.shape}")

    deltas = [None] * len(net.layers)
    delta = dlogits
    for k in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[k]
        if layer.activation == "relu":
            delta = delta * (cache.pre_activations[k] > 0)
        deltas[k] = delta
        if k > 0:
            delta = delta @ layer.weights
    return deltas


def backward(net: Network, cache: ForwardCache, labels: np.ndarray) -> Gradients:
    """Exact gradient of ``loss_softmax_xent`` (batch mean) w.r.t. every weight and bias."""
    logits = cache.logits
    _check_labels(logits, labels)
    n = labels.shape[0]
    dlogits = softmax(logits)
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    deltas = backprop_deltas(net, cache, dlogits)
    return Gradients(
        [d.T @ x for d, x in zip(deltas, cache.inputs)],
        [d.sum(axis=0) for d in deltas],
    )


def check_finite(grads: Gradients) -> None:
    for location, g in grads.arrays():
        bad = ~np.isfinite(g)
        if bad.any():
            index = tuple(int(i) for i in np.argwhere(bad)[0])
            raise NumericError("Non-finite gradient", f"{location}{list(index)}")


def sgd_step(net: Network, grads: Gradients, lr: float) -> Network:
    """In place: ``p <- p - lr * g`` for every parameter."""
    check_congruent(
        [layer.weights for layer in net.layers], [layer.biases for layer in net.layers], grads.weights, grads.biases
    )
    check_finite(grads)
    for layer, gw, gb in zip(net.layers, grads.weights, grads.biases):
        layer.weights -= lr * gw
        layer.biases -= lr * gb
    return net


def predict(net: Network, inputs: np.ndarray, batch_size: int = EVAL_BATCH_SIZE) -> np.ndarray:
    """Argmax class per row; ties go to the lowest class index."""
    out = np.empty(inputs.shape[0], dtype=np.int64)
    for start in range(0, inputs.shape[0], batch_size):
        logits, _ = forward(net, inputs[start:start + batch_size])
        out[start:start + batch_size] = logits.argmax(axis=1)
    return out


def evaluate_accuracy(net: Network, data: "Split", batch_size: int = EVAL_BATCH_SIZE) -> float:
    if len(data.labels) == 0:
        raise InvalidInputError("Cannot evaluate accuracy on an empty dataset")
    return float((predict(net, data.inputs, batch_size) == data.labels).mean())
