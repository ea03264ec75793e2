"""MNIST ingestion (IDX format) and task construction for sequential training.

Permuted tasks apply one fixed pixel permutation to every train and test image.
Split tasks keep only the examples of a class subset; labels keep their 0-9 values
so the network always has 10 outputs.
"""
from __future__ import annotations

import gzip
import hashlib
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import FrozenSet, Iterable, Optional, Tuple

import numpy as np
import requests
from dotenv import load_dotenv

from errors import (
    DataConsistencyError,
    DataFormatError,
    DataIOError,
    DataNotFoundError,
    InvalidInputError,
)

load_dotenv()

logger = logging.getLogger(__name__)

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
NUM_CLASSES = 10

DEFAULT_DATA_DIR = os.getenv("WVA_DATA_DIR", "./data/mnist")
DEFAULT_MIRROR = "https://ossci-datasets.s3.amazonaws.com/mnist/"

# canonical file name -> published MD5 of the gzipped file
MNIST_FILES = {
    "train_images": ("train-images-idx3-ubyte.gz", "f68b3c2dcbeaaa9fbdd348bbdeb94873"),
    "train_labels": ("train-labels-idx1-ubyte.gz", "d53e105ee54ea40749a09fcbcd1e9432"),
    "test_images": ("t10k-images-idx3-ubyte.gz", "9fb629c4189551a2d022fa330f9573f3"),
    "test_labels": ("t10k-labels-idx1-ubyte.gz", "ec29112dd5afa0611ce80d1b7f02629c"),
}


@dataclass
class Split:
    inputs: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def take(self, indices: np.ndarray) -> "Split":
        return Split(self.inputs[indices], self.labels[indices])


@dataclass
class MnistBase:
    train: Split
    test: Split

    @property
    def input_dim(self) -> int:
        return int(self.train.inputs.shape[1])


@dataclass(frozen=True)
class Permutation:
    indices: np.ndarray
    seed: Optional[int]

    def is_bijection(self) -> bool:
        return bool(np.array_equal(np.sort(self.indices), np.arange(self.indices.size)))

    def apply(self, inputs: np.ndarray) -> np.ndarray:
        return inputs[:, self.indices]


@dataclass
class TaskDescriptor:
    kind: str
    permutation_seed: Optional[int] = None
    classes: Optional[Tuple[int, ...]] = None

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "permutation_seed": self.permutation_seed,
            "classes": list(self.classes) if self.classes is not None else None,
        }


@dataclass
class TaskDataset:
    train: Split
    test: Split
    descriptor: TaskDescriptor
    num_classes: int = NUM_CLASSES
    permutation: Optional[Permutation] = field(default=None, repr=False)


def _open_idx(path: Path):
    with open(path, "rb") as fh:
        head = fh.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def read_idx(path, expected_magic: int) -> np.ndarray:
    """Read an unsigned-byte IDX file (raw or gzipped) into an array of its declared shape."""
    path = Path(path)
    if not path.is_file():
        raise DataNotFoundError(path)
    try:
        with _open_idx(path) as fh:
            raw = fh.read()
    except (OSError, EOFError) as e:
        raise DataIOError(f"Could not read {path}: {e}") from e

    if len(raw) < 4:
        raise DataIOError(f"{path}: truncated header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise DataFormatError(path, f"magic number 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise DataIOError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header_len])
    expected = int(np.prod(dims))
    payload = raw[header_len:]
    if len(payload) < expected:
        raise DataIOError(f"{path}: truncated, expected {expected} bytes of data but found {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8, count=expected).reshape(dims)


def load_mnist(images_path, labels_path) -> Tuple[np.ndarray, np.ndarray]:
    """Return ``(inputs, labels)``: inputs float64 ``[n, rows*cols]`` in [0, 1], labels int64."""
    images = read_idx(images_path, IMAGE_MAGIC)
    labels = read_idx(labels_path, LABEL_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise DataConsistencyError(
            f"{images_path} holds {images.shape[0]} images but {labels_path} holds {labels.shape[0]} labels"
        )
    if labels.size and labels.max() >= NUM_CLASSES:
        raise DataConsistencyError(f"{labels_path}: label {int(labels.max())} out of range")
    inputs = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    logger.debug("Loaded %d examples of width %d from %s", inputs.shape[0], inputs.shape[1], images_path)
    return inputs, labels.astype(np.int64)


def _locate(data_dir: Path, name: str) -> Path:
    gz = data_dir / name
    if gz.is_file():
        return gz
    plain = data_dir / name[: -len(".gz")]
    if plain.is_file():
        return plain
    raise DataNotFoundError(gz)


def load_mnist_base(data_dir=None) -> MnistBase:
    """Load the official train/test split from a directory holding the four IDX files."""
    data_dir = Path(data_dir or DEFAULT_DATA_DIR)
    paths = {key: _locate(data_dir, name) for key, (name, _) in MNIST_FILES.items()}
    train = Split(*load_mnist(paths["train_images"], paths["train_labels"]))
    test = Split(*load_mnist(paths["test_images"], paths["test_labels"]))
    logger.info("MNIST loaded from %s: %d train, %d test", data_dir, len(train), len(test))
    return MnistBase(train, test)


def subsample(base: MnistBase, n_train: Optional[int], seed: int, n_test: Optional[int] = None) -> MnistBase:
    """Desk-scale subset; kept examples stay in their original order."""
    rng = np.random.Generator(np.random.PCG64(seed))

    def pick(split: Split, n: Optional[int]) -> Split:
        if n is None or n >= len(split):
            return split
        if n <= 0:
            raise InvalidInputError(f"Subsample size must be positive, got {n}")
        return split.take(np.sort(rng.choice(len(split), size=n, replace=False)))

    return MnistBase(pick(base.train, n_train), pick(base.test, n_test))


def make_permutation(size: int, seed: Optional[int]) -> Permutation:
    """Seeded PCG64 permutation of ``range(size)``; ``seed=None`` gives the identity."""
    if seed is None:
        return Permutation(np.arange(size), None)
    rng = np.random.Generator(np.random.PCG64(seed))
    return Permutation(rng.permutation(size), seed)


def make_permuted_task(base: MnistBase, seed: Optional[int]) -> TaskDataset:
    perm = make_permutation(base.input_dim, seed)
    return TaskDataset(
        train=Split(perm.apply(base.train.inputs), base.train.labels),
        test=Split(perm.apply(base.test.inputs), base.test.labels),
        descriptor=TaskDescriptor(kind="permuted", permutation_seed=seed),
        permutation=perm,
    )


def make_split_task(base: MnistBase, classes: Iterable[int]) -> TaskDataset:
    chosen: FrozenSet[int] = frozenset(int(c) for c in classes)
    if not chosen:
        raise InvalidInputError("Split task needs at least one class")
    if not chosen <= set(range(NUM_CLASSES)):
        raise InvalidInputError(f"Classes {sorted(chosen)} are not a subset of 0..{NUM_CLASSES - 1}")
    keep = np.array(sorted(chosen))

    def select(split: Split) -> Split:
        return split.take(np.flatnonzero(np.isin(split.labels, keep)))

    return TaskDataset(
        train=select(base.train),
        test=select(base.test),
        descriptor=TaskDescriptor(kind="split", classes=tuple(int(c) for c in keep)),
    )


def _digest(path: Path, algorithm: str) -> str:
    h = hashlib.new(algorithm)
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def fetch_mnist(dest=None, mirror: str = DEFAULT_MIRROR, session: Optional[requests.Session] = None,
                timeout: float = 60.0) -> Path:
    """Download the four gzipped IDX files, verify their MD5 and write ``SHA256SUMS``.

    Files already present with the right digest are not downloaded again.
    """
    dest = Path(dest or DEFAULT_DATA_DIR)
    dest.mkdir(parents=True, exist_ok=True)
    session = session or requests.Session()
    sums = []
    for name, md5 in MNIST_FILES.values():
        target = dest / name
        if target.is_file() and _digest(target, "md5") == md5:
            logger.info("%s already present", target)
        else:
            url = mirror.rstrip("/") + "/" + name
            logger.info("Downloading %s", url)
            try:
                resp = session.get(url, timeout=timeout)
                resp.raise_for_status()
            except requests.RequestException as e:
                raise DataIOError(f"Download of {url} failed: {e}") from e
            target.write_bytes(resp.content)
            got = _digest(target, "md5")
            if got != md5:
                target.unlink()
                raise DataConsistencyError(f"{name}: MD5 {got} does not match published {md5}")
        sums.append(f"{_digest(target, 'sha256')}  {name}\n")
    (dest / "SHA256SUMS").write_text("".join(sums))
    return dest
