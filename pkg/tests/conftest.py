import gzip
import os
import struct
import sys

import numpy as np
import pytest

# allow importing project modules by adding project root to sys.path
ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if ROOT not in sys.path:
    sys.path.insert(0, ROOT)

from data import IMAGE_MAGIC, LABEL_MAGIC, MnistBase, Split  # noqa: E402
from network import Layer, Network  # noqa: E402
from schemas import EvalRow, RunRecord, RunSeeds  # noqa: E402


def write_idx(path, array, magic, gz=False):
    """Write ``array`` (uint8) as an IDX file with the given magic number."""
    array = np.asarray(array, dtype=np.uint8)
    header = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape)
    payload = header + array.tobytes()
    opener = gzip.open if gz else open
    with opener(path, "wb") as fh:
        fh.write(payload)
    return path


def synthetic_images(n, rng, side=28):
    """Digit-like uint8 images: each class lights its own band of rows."""
    labels = np.arange(n) % 10
    rng.shuffle(labels)
    images = rng.integers(0, 40, size=(n, side, side), dtype=np.uint8)
    band = max(side // 10, 1)
    for i, label in enumerate(labels):
        images[i, label * band:(label + 1) * band, :] = rng.integers(180, 256, size=(band, side), dtype=np.uint8)
    return images, labels.astype(np.uint8)


@pytest.fixture
def mnist_dir(tmp_path):
    """Directory with the four canonical (gzipped) IDX files, 300 train and 100 test examples."""
    rng = np.random.default_rng(5)
    root = tmp_path / "mnist"
    root.mkdir()
    for prefix, n in (("train", 300), ("t10k", 100)):
        images, labels = synthetic_images(n, rng)
        write_idx(root / f"{prefix}-images-idx3-ubyte.gz", images, IMAGE_MAGIC, gz=True)
        write_idx(root / f"{prefix}-labels-idx1-ubyte.gz", labels, LABEL_MAGIC, gz=True)
    return root


def make_base(n_train=200, n_test=100, dim=20, seed=0):
    """Small separable 10-class problem with inputs in [0, 1]."""
    rng = np.random.default_rng(seed)
    prototypes = rng.random((10, dim))

    def split(n):
        labels = np.arange(n) % 10
        rng.shuffle(labels)
        inputs = np.clip(prototypes[labels] + 0.1 * rng.standard_normal((n, dim)), 0.0, 1.0)
        return Split(inputs, labels.astype(np.int64))

    return MnistBase(split(n_train), split(n_test))


@pytest.fixture
def tiny_base():
    return make_base()


def random_network(layer_sizes, rng, activation="relu"):
    layers = []
    for k, (fan_in, fan_out) in enumerate(zip(layer_sizes[:-1], layer_sizes[1:])):
        last = k == len(layer_sizes) - 2
        layers.append(Layer(
            rng.standard_normal((fan_out, fan_in)) / np.sqrt(fan_in),
            0.1 * rng.standard_normal(fan_out),
            "identity" if last else activation,
        ))
    return Network(layers)


def make_record(pass_id, method, points, failed=False):
    """``points`` is a list of (training_task, global_step, accuracies)."""
    rows = [
        EvalRow(pass_id=pass_id, method=method, training_task=t, global_step=s, accuracies=accs,
                mean_accuracy=sum(accs[:t + 1]) / (t + 1))
        for t, s, accs in points
    ]
    return RunRecord(
        pass_id=pass_id,
        method=method,
        lambda_=0.0 if method == "sgd" else 10.0,
        learning_rate=0.1,
        seeds=RunSeeds(init=pass_id, permutations=[None, 7], batch_order=[1, 2], fisher=[3, 4]),
        task_descriptors=[{"kind": "permuted", "permutation_seed": None, "classes": None},
                          {"kind": "permuted", "permutation_seed": 7, "classes": None}],
        rows=rows,
        post_task_accuracy=[points[1][2][0], points[-1][2][1]],
        final_accuracy=list(points[-1][2]),
        failed=failed,
        failure="Non-finite loss at task 1 step 3" if failed else None,
    )
