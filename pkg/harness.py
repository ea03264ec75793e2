"""Sequential-training experiments: every (pass, method) unit trains one network through all tasks.

Within a pass all methods start from the same initial network and see the same
batch order on every task, so their task-1 curves coincide exactly.
"""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from data import MnistBase, TaskDataset, load_mnist_base, make_permuted_task, make_split_task, subsample
from errors import ConfigurationError, NumericError
from methods import TrainSchedule, train_task
from network import Network, evaluate_accuracy, init_network
from schemas import (
    EvalRow,
    EvalSplit,
    ExperimentConfig,
    ExperimentKind,
    Method,
    MethodConfig,
    RunRecord,
    RunSeeds,
    SignificanceKind,
)
from significance import (
    SignificanceStore,
    accumulate_signal,
    estimate_fisher_diag,
    merge,
    save_document,
    take_anchor,
)

logger = logging.getLogger(__name__)

SEED_INIT, SEED_PERMUTATION, SEED_BATCHES, SEED_FISHER, SEED_SUBSAMPLE = range(5)

EWC_LAMBDA_GRID = (1.0, 10.0, 100.0, 1000.0)
WVA_LAMBDA_GRID = (0.1, 1.0, 10.0, 100.0)


def derive_seed(base: int, pass_id: int, purpose: int, task: int = 0) -> int:
    return int(np.random.SeedSequence([base, pass_id, purpose, task]).generate_state(1)[0])


def prepare_base(config: ExperimentConfig, base: Optional[MnistBase] = None) -> MnistBase:
    base = base if base is not None else load_mnist_base(config.data_dir)
    if config.subsample or config.subsample_test:
        base = subsample(base, config.subsample, derive_seed(config.seed, 0, SEED_SUBSAMPLE),
                         config.subsample_test)
        logger.info("Subsampled to %d train / %d test examples", len(base.train), len(base.test))
    return base


def pass_seeds(config: ExperimentConfig, pass_id: int) -> RunSeeds:
    tasks = range(config.tasks)
    if config.experiment is ExperimentKind.permuted:
        permutations = [
            None if (t == 0 and config.identity_first_task) else derive_seed(config.seed, pass_id, SEED_PERMUTATION, t)
            for t in tasks
        ]
    else:
        permutations = [None for _ in tasks]
    return RunSeeds(
        init=derive_seed(config.seed, pass_id, SEED_INIT),
        permutations=permutations,
        batch_order=[derive_seed(config.seed, pass_id, SEED_BATCHES, t) for t in tasks],
        fisher=[derive_seed(config.seed, pass_id, SEED_FISHER, t) for t in tasks],
    )


def build_tasks(config: ExperimentConfig, base: MnistBase, seeds: RunSeeds) -> List[TaskDataset]:
    if config.experiment is ExperimentKind.split:
        return [make_split_task(base, classes) for classes in config.split_classes]
    return [make_permuted_task(base, seed) for seed in seeds.permutations]


class _Evaluator:
    def __init__(self, tasks: Sequence[TaskDataset], eval_split: EvalSplit):
        self.tasks = tasks
        self.eval_split = eval_split

    def __call__(self, net: Network) -> Tuple[List[float], Optional[List[float]]]:
        primary = "train" if self.eval_split is EvalSplit.train else "test"
        accs = [evaluate_accuracy(net, getattr(task, primary)) for task in self.tasks]
        train_accs = None
        if self.eval_split is EvalSplit.both:
            train_accs = [evaluate_accuracy(net, task.train) for task in self.tasks]
        return accs, train_accs


def compute_significance(net: Network, task: TaskDataset, kind: SignificanceKind, config: ExperimentConfig,
                         seed: int, task_index: int) -> SignificanceStore:
    if kind is SignificanceKind.signal:
        return accumulate_signal(net, task.train, config.significance_batch_size, source_task=task_index)
    return estimate_fisher_diag(net, task.train, seed, config.significance_batch_size,
                                config.fisher_labels, source_task=task_index)


def run_unit(config: ExperimentConfig, tasks: Sequence[TaskDataset], layer_sizes: Sequence[int], pass_id: int,
             method_config: MethodConfig, seeds: RunSeeds) -> RunRecord:
    """Train one fresh network through every task under one method; never raises NumericError."""
    record = RunRecord(
        pass_id=pass_id,
        method=method_config.label,
        lambda_=method_config.lambda_,
        learning_rate=method_config.learning_rate,
        seeds=seeds,
        task_descriptors=[task.descriptor.to_dict() for task in tasks],
    )
    try:
        _train_sequence(config, tasks, layer_sizes, method_config, seeds, record)
    except NumericError as e:
        record.failed = True
        record.failure = str(e)
        logger.warning("Pass %d %s aborted: %s", pass_id, method_config.label, e)
    return record


def _train_sequence(config: ExperimentConfig, tasks: Sequence[TaskDataset], layer_sizes: Sequence[int],
                    method_config: MethodConfig, seeds: RunSeeds, record: RunRecord) -> None:
    evaluate = _Evaluator(tasks, config.eval_split)
    net = init_network(layer_sizes, seeds.init)
    label = method_config.label

    def add_row(training_task: int, step: int) -> EvalRow:
        accs, train_accs = evaluate(net)
        row = EvalRow(
            pass_id=record.pass_id,
            method=label,
            training_task=training_task,
            global_step=step,
            accuracies=accs,
            mean_accuracy=float(np.mean(accs[:training_task + 1])),
            train_accuracies=train_accs,
        )
        record.rows.append(row)
        return row

    add_row(0, 0)
    step = 0
    anchor, accumulated = None, None
    artifacts = Path(config.output_dir) / "artifacts" / f"pass{record.pass_id}" / label

    for t, task in enumerate(tasks):
        early = config.early_stop.enabled and t > 0
        best = {"row": None, "params": None, "stale": 0}

        def consider(row: EvalRow) -> bool:
            if best["row"] is None or row.mean_accuracy > best["row"].mean_accuracy:
                best.update(row=row, stale=0, params=(
                    [layer.weights.copy() for layer in net.layers],
                    [layer.biases.copy() for layer in net.layers],
                ))
                return False
            best["stale"] += 1
            patience = config.early_stop.patience
            return patience is not None and best["stale"] >= patience

        def on_step(global_step: int, _net: Network) -> bool:
            nonlocal step
            step = global_step
            if global_step % config.eval_interval:
                return False
            row = add_row(t, global_step)
            return early and consider(row)

        schedule = TrainSchedule(
            epochs=config.epochs,
            batch_size=config.batch_size,
            seed=seeds.batch_order[t],
            task_index=t,
            start_step=step,
        )
        logger.info("Pass %d %s: training task %d (%d examples)", record.pass_id, label, t, len(task.train))
        train_task(net, task, method_config, anchor, accumulated, schedule, on_step)

        current = record.rows[-1]
        if current.global_step != step:
            current = add_row(t, step)
            if early:
                consider(current)
        if early and best["row"] is not None:
            net.load_parameters(*best["params"])
            current = best["row"]
            current.selected = True
            record.early_stop_steps[t] = current.global_step
            logger.info("Pass %d %s: task %d early-stopped at step %d (mean accuracy %.4f)",
                        record.pass_id, label, t, current.global_step, current.mean_accuracy)
        record.post_task_accuracy.append(current.accuracies[t])
        record.final_accuracy = list(current.accuracies)

        if method_config.method is Method.sgd or t == len(tasks) - 1:
            continue
        anchor = take_anchor(net, source_task=t)
        store = compute_significance(net, task, method_config.significance_kind, config, seeds.fisher[t], t)
        accumulated = store if accumulated is None else merge(accumulated, store)
        if config.persist_artifacts:
            save_document(anchor.to_document(), artifacts / f"task{t}_anchor.json")
            save_document(store.to_document(), artifacts / f"task{t}_significance.json")
            save_document(accumulated.to_document(), artifacts / f"task{t}_accumulated.json")


def run_sequential(config: ExperimentConfig, base: Optional[MnistBase] = None) -> List[RunRecord]:
    """All passes x methods, ordered by (pass, method) as listed in the config."""
    base = prepare_base(config, base)
    layer_sizes = [base.input_dim, *config.hidden_sizes, 10]
    method_configs = config.method_configs()
    records: List[RunRecord] = []
    for pass_id in range(config.passes):
        seeds = pass_seeds(config, pass_id)
        tasks = build_tasks(config, base, seeds)
        for method_config in method_configs:
            records.append(run_unit(config, tasks, layer_sizes, pass_id, method_config, seeds))
    failed = sum(r.failed for r in records)
    logger.info("Finished %d runs (%d failed)", len(records), failed)
    return records


def run_split_early_stop(config: ExperimentConfig, base: Optional[MnistBase] = None) -> List[RunRecord]:
    """Split experiment with combined early stopping on the second task."""
    if config.experiment is not ExperimentKind.split or config.tasks != 2:
        raise ConfigurationError("Early-stopped split runs need a split experiment with exactly 2 tasks")
    config = config.model_copy(update={"early_stop": config.early_stop.model_copy(update={"enabled": True})})
    return run_sequential(config, base)


def final_mean_accuracy(record: RunRecord) -> float:
    return float(np.mean(record.final_accuracy))


def run_lambda_sweep(config: ExperimentConfig, base: Optional[MnistBase] = None,
                     ewc_grid: Iterable[float] = EWC_LAMBDA_GRID,
                     wva_grid: Iterable[float] = WVA_LAMBDA_GRID) -> List[Tuple[str, float, List[RunRecord]]]:
    """Coarse lambda grid per regularized method in ``config.methods``; sgd runs once as the baseline."""
    base = prepare_base(config, base)
    bare = config.model_copy(update={"subsample": None, "subsample_test": None})
    grids = {"ewc": tuple(ewc_grid), "wva": tuple(wva_grid)}
    results = []
    for label in config.methods:
        lambdas = (0.0,) if label == "sgd" else grids[label.split("-")[0]]
        for lam in lambdas:
            point = bare.model_copy(update={"methods": [label], "lambdas": {label: lam} if label != "sgd" else {}})
            logger.info("Sweep: %s lambda=%g", label, lam)
            results.append((label, lam, run_sequential(point, base)))
    return results
