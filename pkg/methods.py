"""Training regimes: plain SGD, elastic weight consolidation (EWC) and weight velocity attenuation (WVA).

EWC adds ``lambda * s * (p - p_anchor)`` to every task gradient. WVA leaves the
loss alone and scales each parameter's step by ``1 / (1 + lambda * s)``. Both
take ``s`` from the significance accumulated over all previous tasks.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from data import Split, TaskDataset
from errors import ConfigurationError, InvalidInputError, InvariantViolationError, NumericError, ShapeError
from network import (
    Gradients,
    Network,
    backward,
    check_congruent,
    check_finite,
    forward,
    loss_softmax_xent,
    sgd_step,
)
from schemas import Method, MethodConfig
from significance import Anchor, SignificanceStore

logger = logging.getLogger(__name__)

StepCallback = Callable[[int, Network], Optional[bool]]


@dataclass(frozen=True)
class TrainSchedule:
    epochs: int = 5
    batch_size: int = 100
    seed: int = 0  # batch order
    task_index: int = 0
    start_step: int = 0


def _params(net: Network):
    return [layer.weights for layer in net.layers], [layer.biases for layer in net.layers]


def _check_shapes(net: Network, *others) -> None:
    weights, biases = _params(net)
    try:
        for other in others:
            check_congruent(weights, biases, other.weights, other.biases)
    except ShapeError as e:
        raise InvalidInputError(str(e)) from e


def ewc_penalty(net: Network, anchor: Anchor, sig: SignificanceStore, lambda_: float) -> float:
    """``(lambda / 2) * sum(s * (p - p_anchor)**2)`` over all weights and biases."""
    _check_shapes(net, anchor, sig)
    weights, biases = _params(net)
    total = 0.0
    for p, a, s in zip(weights + biases, anchor.weights + anchor.biases, sig.weights + sig.biases):
        d = p - a
        total += float((s * d * d).sum())
    return 0.5 * lambda_ * total


def ewc_gradient(net: Network, anchor: Anchor, sig: SignificanceStore, lambda_: float) -> Gradients:
    _check_shapes(net, anchor, sig)
    return Gradients(
        [lambda_ * s * (layer.weights - a) for layer, a, s in zip(net.layers, anchor.weights, sig.weights)],
        [lambda_ * s * (layer.biases - a) for layer, a, s in zip(net.layers, anchor.biases, sig.biases)],
    )


def attenuation(sig_values: np.ndarray, lambda_: float) -> np.ndarray:
    """Per-parameter step factor ``1 / (1 + lambda * s)``; lies in (0, 1] for s >= 0."""
    return 1.0 / (1.0 + lambda_ * sig_values)


def wva_step(net: Network, grads: Gradients, sig: SignificanceStore, lambda_: float, lr: float) -> Network:
    """In place: ``p <- p - lr / (1 + lambda * s) * g``."""
    _check_shapes(net, grads, sig)
    if lambda_ < 0:
        raise InvariantViolationError(f"lambda must be >= 0, got {lambda_}")
    for location, values in sig.arrays():
        if np.any(values < 0):
            raise InvariantViolationError(f"Negative significance in {location}")
    check_finite(grads)
    for layer, gw, gb, sw, sb in zip(net.layers, grads.weights, grads.biases, sig.weights, sig.biases):
        layer.weights -= lr * attenuation(sw, lambda_) * gw
        layer.biases -= lr * attenuation(sb, lambda_) * gb
    return net


def _resolve_regularizer(config: MethodConfig, anchor: Optional[Anchor], sig: Optional[SignificanceStore],
                         schedule: TrainSchedule):
    if config.method is Method.sgd:
        return None, None
    needs_anchor = config.method is Method.ewc
    missing = sig is None or (needs_anchor and anchor is None)
    if missing:
        if schedule.task_index > 0:
            raise ConfigurationError(
                f"{config.label} on task {schedule.task_index} needs the previous "
                f"{'anchor and ' if needs_anchor else ''}significance"
            )
        return None, None
    if sig.kind != config.significance_kind:
        raise ConfigurationError(f"{config.label} got {sig.kind.value} significance")
    return anchor, sig


def train_task(net: Network, data: Union[TaskDataset, Split], method_config: MethodConfig,
               prev_anchor: Optional[Anchor] = None, prev_sig: Optional[SignificanceStore] = None,
               schedule: TrainSchedule = TrainSchedule(), on_step: Optional[StepCallback] = None) -> Network:
    """Mini-batch training on one task under the configured regime.

    Without previous anchor/significance (first task, or sgd) every regime is
    plain SGD. ``on_step(global_step, net)`` runs after each update; returning
    True stops the task early.
    """
    train = data.train if isinstance(data, TaskDataset) else data
    if len(train) == 0:
        raise InvalidInputError("Cannot train on an empty dataset")
    anchor, sig = _resolve_regularizer(method_config, prev_anchor, prev_sig, schedule)
    lr, lambda_ = method_config.learning_rate, method_config.lambda_
    if sig is not None:
        sig.check_against(net)
        stiffness = lr * lambda_ * sig.max()
        if method_config.method is Method.ewc and stiffness > 2.0:
            logger.warning(
                "%s: lr*lambda*max(significance) = %.3g > 2, explicit EWC steps may diverge",
                method_config.label, stiffness,
            )

    rng = np.random.Generator(np.random.PCG64(schedule.seed))
    n = len(train)
    step = schedule.start_step
    for epoch in range(schedule.epochs):
        order = rng.permutation(n)
        for start in range(0, n, schedule.batch_size):
            idx = order[start:start + schedule.batch_size]
            logits, cache = forward(net, train.inputs[idx])
            labels = train.labels[idx]
            loss = loss_softmax_xent(logits, labels)
            if not np.isfinite(loss):
                raise NumericError("Non-finite loss", f"task {schedule.task_index} step {step + 1}")
            grads = backward(net, cache, labels)
            if sig is None:
                sgd_step(net, grads, lr)
            elif method_config.method is Method.ewc:
                sgd_step(net, grads + ewc_gradient(net, anchor, sig, lambda_), lr)
            else:
                wva_step(net, grads, sig, lambda_, lr)
            step += 1
            logger.debug("task %d epoch %d step %d loss %.5f", schedule.task_index, epoch, step, loss)
            if on_step is not None and on_step(step, net):
                logger.info("Task %d stopped at step %d", schedule.task_index, step)
                return net
    return net
