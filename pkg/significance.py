"""Per-parameter significance by total absolute signal (S) or Fisher diagonal (F), plus anchors.

Signal significance of connection ``i`` into neuron ``j``: mean over the training
examples of ``|x_i * w_ji|``. Signal significance of bias ``j``: mean of ``|y_j|``,
the neuron's activation. Fisher significance: mean over examples of the squared
gradient of ``log p(y_hat | x)`` where ``y_hat`` is drawn from the model itself.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from data import Split
from errors import InvalidInputError, InvariantViolationError, NumericError, ShapeError
from network import EVAL_BATCH_SIZE, Network, backprop_deltas, check_congruent, forward, softmax
from schemas import AnchorDocument, FisherLabels, SignificanceDocument, SignificanceKind

logger = logging.getLogger(__name__)


@dataclass
class SignificanceStore:
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    kind: SignificanceKind
    source_tasks: Tuple[int, ...] = ()
    n_examples: int = 0

    def __post_init__(self):
        self.kind = SignificanceKind(self.kind)
        self.validate()

    def validate(self) -> None:
        for location, values in self.arrays():
            if not np.all(np.isfinite(values)):
                raise InvariantViolationError(f"Non-finite significance in {location}")
            if np.any(values < 0):
                raise InvariantViolationError(f"Negative significance in {location}")

    def arrays(self):
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            yield f"layer {k} weights", w
            yield f"layer {k} biases", b

    def max(self) -> float:
        return max(float(values.max(initial=0.0)) for _, values in self.arrays())

    def check_against(self, net: Network) -> None:
        check_congruent(
            [layer.weights for layer in net.layers], [layer.biases for layer in net.layers],
            self.weights, self.biases,
        )

    @classmethod
    def zeros_like(cls, net: Network, kind: SignificanceKind) -> "SignificanceStore":
        return cls(
            [np.zeros_like(layer.weights) for layer in net.layers],
            [np.zeros_like(layer.biases) for layer in net.layers],
            kind,
        )

    def to_document(self) -> SignificanceDocument:
        return SignificanceDocument(
            kind=self.kind,
            source_tasks=list(self.source_tasks),
            n_examples=self.n_examples,
            weights=[w.tolist() for w in self.weights],
            biases=[b.tolist() for b in self.biases],
        )

    @classmethod
    def from_document(cls, doc: SignificanceDocument) -> "SignificanceStore":
        return cls(
            [np.asarray(w, dtype=np.float64) for w in doc.weights],
            [np.asarray(b, dtype=np.float64) for b in doc.biases],
            doc.kind,
            tuple(doc.source_tasks),
            doc.n_examples,
        )


@dataclass(frozen=True)
class Anchor:
    """Read-only parameter snapshot taken when a task finishes."""

    weights: Tuple[np.ndarray, ...]
    biases: Tuple[np.ndarray, ...]
    source_task: Optional[int] = field(default=None, compare=False)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Anchor) or len(self.weights) != len(other.weights):
            return False
        return all(np.array_equal(a, b) for a, b in zip(self.weights + self.biases, other.weights + other.biases))

    def to_document(self) -> AnchorDocument:
        return AnchorDocument(
            source_task=self.source_task,
            weights=[w.tolist() for w in self.weights],
            biases=[b.tolist() for b in self.biases],
        )

    @classmethod
    def from_document(cls, doc: AnchorDocument) -> "Anchor":
        return _frozen_anchor(
            [np.asarray(w, dtype=np.float64) for w in doc.weights],
            [np.asarray(b, dtype=np.float64) for b in doc.biases],
            doc.source_task,
        )


def _frozen_anchor(weights, biases, source_task) -> Anchor:
    frozen_w, frozen_b = [], []
    for w, b in zip(weights, biases):
        w, b = np.array(w, dtype=np.float64), np.array(b, dtype=np.float64)
        w.setflags(write=False)
        b.setflags(write=False)
        frozen_w.append(w)
        frozen_b.append(b)
    return Anchor(tuple(frozen_w), tuple(frozen_b), source_task)


def take_anchor(net: Network, source_task: Optional[int] = None) -> Anchor:
    return _frozen_anchor(
        [layer.weights for layer in net.layers], [layer.biases for layer in net.layers], source_task
    )


def _check_finite(weights, biases, what: str) -> None:
    for k, (w, b) in enumerate(zip(weights, biases)):
        for name, values in (("weights", w), ("biases", b)):
            bad = ~np.isfinite(values)
            if bad.any():
                index = [int(i) for i in np.argwhere(bad)[0]]
                raise NumericError(f"Non-finite {what} significance", f"layer {k} {name}{index}")


def _batches(split: Split, batch_size: int):
    for start in range(0, len(split), batch_size):
        yield split.inputs[start:start + batch_size], split.labels[start:start + batch_size]


def accumulate_signal(net: Network, data: Split, batch_size: int = EVAL_BATCH_SIZE,
                      source_task: Optional[int] = None) -> SignificanceStore:
    """One read-only pass over ``data``; mean |input * weight| per connection, mean |activation| per bias."""
    if len(data) == 0:
        raise InvalidInputError("Cannot accumulate signal over an empty dataset")
    abs_inputs = [np.zeros(layer.fan_in) for layer in net.layers]
    abs_outputs = [np.zeros(layer.fan_out) for layer in net.layers]
    n = 0
    for inputs, _ in _batches(data, batch_size):
        _, cache = forward(net, inputs)
        for k in range(len(net.layers)):
            abs_inputs[k] += np.abs(cache.inputs[k]).sum(axis=0)
            abs_outputs[k] += np.abs(cache.outputs[k]).sum(axis=0)
        n += inputs.shape[0]
    weights = [np.abs(layer.weights) * (s / n)[None, :] for layer, s in zip(net.layers, abs_inputs)]
    biases = [s / n for s in abs_outputs]
    _check_finite(weights, biases, "signal")
    store = SignificanceStore(
        weights,
        biases,
        SignificanceKind.signal,
        () if source_task is None else (source_task,),
        n,
    )
    logger.debug("Signal significance over %d examples, max %.4g", n, store.max())
    return store


def sample_labels(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One categorical draw per row of ``probs`` (inverse CDF on one uniform per row)."""
    u = rng.random(probs.shape[0])
    cdf = np.cumsum(probs, axis=1)
    return np.minimum((cdf < u[:, None]).sum(axis=1), probs.shape[1] - 1)


def draw_fisher_labels(net: Network, data: Split, seed: int, batch_size: int = EVAL_BATCH_SIZE,
                       label_mode: FisherLabels = FisherLabels.sampled) -> np.ndarray:
    """The labels ``estimate_fisher_diag`` differentiates against, for the same seed."""
    if FisherLabels(label_mode) is FisherLabels.true:
        return data.labels.copy()
    rng = np.random.Generator(np.random.PCG64(seed))
    out = []
    for inputs, _ in _batches(data, batch_size):
        logits, _ = forward(net, inputs)
        out.append(sample_labels(softmax(logits), rng))
    return np.concatenate(out) if out else np.empty(0, dtype=np.int64)


def estimate_fisher_diag(net: Network, data: Split, seed: int, batch_size: int = EVAL_BATCH_SIZE,
                         label_mode: FisherLabels = FisherLabels.sampled,
                         source_task: Optional[int] = None) -> SignificanceStore:
    """Diagonal Fisher: mean over examples of the squared per-example log-likelihood gradient.

    Per example the weight gradient is the outer product ``delta x^T``, so its
    elementwise square summed over a batch is ``(delta**2)^T @ (x**2)``.
    """
    if len(data) == 0:
        raise InvalidInputError("Cannot estimate Fisher information over an empty dataset")
    label_mode = FisherLabels(label_mode)
    rng = np.random.Generator(np.random.PCG64(seed))
    fisher_w = [np.zeros_like(layer.weights) for layer in net.layers]
    fisher_b = [np.zeros_like(layer.biases) for layer in net.layers]
    n = 0
    for inputs, true_labels in _batches(data, batch_size):
        logits, cache = forward(net, inputs)
        probs = softmax(logits)
        labels = true_labels if label_mode is FisherLabels.true else sample_labels(probs, rng)
        # d(-log p(label))/d(logits), one row per example
        dlogits = probs
        dlogits[np.arange(labels.shape[0]), labels] -= 1.0
        deltas = backprop_deltas(net, cache, dlogits)
        for k, (delta, x) in enumerate(zip(deltas, cache.inputs)):
            sq = delta * delta
            fisher_w[k] += sq.T @ (x * x)
            fisher_b[k] += sq.sum(axis=0)
        n += inputs.shape[0]
    weights, biases = [f / n for f in fisher_w], [f / n for f in fisher_b]
    _check_finite(weights, biases, "Fisher")
    store = SignificanceStore(
        weights,
        biases,
        SignificanceKind.fisher,
        () if source_task is None else (source_task,),
        n,
    )
    logger.debug("Fisher significance over %d examples (%s labels), max %.4g", n, label_mode.value, store.max())
    return store


def merge(a: SignificanceStore, b: SignificanceStore) -> SignificanceStore:
    """Elementwise sum; significance accumulates across sequential tasks."""
    if a.kind != b.kind:
        raise InvalidInputError(f"Cannot merge {a.kind.value} significance with {b.kind.value}")
    try:
        check_congruent(a.weights, a.biases, b.weights, b.biases)
    except ShapeError as e:
        raise InvalidInputError(f"Cannot merge significance stores: {e}") from e
    return SignificanceStore(
        [x + y for x, y in zip(a.weights, b.weights)],
        [x + y for x, y in zip(a.biases, b.biases)],
        a.kind,
        a.source_tasks + b.source_tasks,
        a.n_examples + b.n_examples,
    )


def save_document(doc, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(doc.model_dump_json(indent=1))
    return path


def load_significance(path) -> SignificanceStore:
    return SignificanceStore.from_document(SignificanceDocument.model_validate_json(Path(path).read_text()))


def load_anchor(path) -> Anchor:
    return Anchor.from_document(AnchorDocument.model_validate_json(Path(path).read_text()))
