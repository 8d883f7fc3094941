"""
FLEXFL - Dataset Service
========================
Example stores, IDX ingestion and i.i.d. client partitioning.

- IDX reader/writer (big-endian header, optional gzip)
- MNIST loader with pixel scaling to [0, 1]
- Disjoint i.i.d. partitions with drawn or given per-client sizes
- With-replacement minibatch sampling

Usage:
    from flexfl.services.datasets import load_mnist, partition_iid
    train = load_mnist("data/mnist", split="train")
    partition = partition_iid(train, num_clients=10, size_range=(300, 500), seed=0)
"""

import gzip
import os
import struct
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from flexfl.logger import get_logger

log = get_logger('datasets')

# IDX type byte -> big-endian numpy dtype
IDX_DTYPES = {
    0x08: np.dtype('>u1'),
    0x09: np.dtype('>i1'),
    0x0B: np.dtype('>i2'),
    0x0C: np.dtype('>i4'),
    0x0D: np.dtype('>f4'),
    0x0E: np.dtype('>f8'),
}

MNIST_FILES = {
    'train': ('train-images-idx3-ubyte', 'train-labels-idx1-ubyte'),
    'test': ('t10k-images-idx3-ubyte', 't10k-labels-idx1-ubyte'),
}


class IdxFormatError(ValueError):
    """Malformed IDX content; ``offset`` is the byte where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class PartitionError(ValueError):
    """Not enough examples for the requested client sizes."""

    def __init__(self, required: int, available: int):
        super().__init__(f"partition needs {required} examples, store has {available}")
        self.required = required
        self.available = available


class DatasetMissingError(FileNotFoundError):
    """Dataset files absent from the configured root."""


# =============================================================================
# DOMAIN TYPES
# =============================================================================

@dataclass(frozen=True)
class ExampleStore:
    """Immutable feature matrix (n x d) with one label per row."""
    features: np.ndarray
    labels: np.ndarray
    shape: Tuple[int, ...] = ()      # per-example shape before flattening

    def __post_init__(self):
        features = np.asarray(self.features)
        if features.ndim != 2:
            raise ValueError("features must be an n x d matrix")
        labels = np.asarray(self.labels)
        if labels.shape[0] != features.shape[0]:
            raise ValueError(
                f"{features.shape[0]} examples but {labels.shape[0]} labels"
            )
        features.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, 'features', features)
        object.__setattr__(self, 'labels', labels)
        if not self.shape:
            object.__setattr__(self, 'shape', (features.shape[1],))

    def __len__(self) -> int:
        return int(self.features.shape[0])

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    def take(self, indices: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return self.features[indices], self.labels[indices]

    def subset(self, indices: np.ndarray) -> "ExampleStore":
        return ExampleStore(self.features[indices], self.labels[indices], self.shape)


@dataclass(frozen=True)
class ClientPartition:
    """Disjoint per-client index blocks into one ExampleStore."""
    indices: Tuple[np.ndarray, ...]
    store_size: int

    def __post_init__(self):
        blocks = tuple(np.asarray(block, dtype=np.int64) for block in self.indices)
        object.__setattr__(self, 'indices', blocks)

    @property
    def num_clients(self) -> int:
        return len(self.indices)

    @property
    def sizes(self) -> np.ndarray:
        """D_m per client."""
        return np.array([len(block) for block in self.indices], dtype=int)

    @property
    def total(self) -> int:
        """D = sum of D_m."""
        return int(self.sizes.sum())

    @property
    def all_indices(self) -> np.ndarray:
        if not self.indices:
            return np.empty(0, dtype=np.int64)
        return np.concatenate(self.indices)

    def is_disjoint(self) -> bool:
        merged = self.all_indices
        return len(np.unique(merged)) == len(merged)


class Batch(NamedTuple):
    features: np.ndarray
    labels: np.ndarray
    indices: np.ndarray


# =============================================================================
# IDX FORMAT
# =============================================================================

def _open(path: str, mode: str):
    if path.endswith('.gz'):
        return gzip.open(path, mode)
    return open(path, mode)


def parse_idx(data: bytes) -> np.ndarray:
    """
    Decode an IDX byte string.

    Layout: two zero bytes, a type byte, a dimension count, one big-endian
    uint32 per dimension, then the raw payload.

    Raises:
        IdxFormatError: Bad magic, unknown type, truncated header or payload.
    """
    if len(data) < 4:
        raise IdxFormatError("truncated IDX magic number", len(data))
    if data[0] != 0 or data[1] != 0:
        raise IdxFormatError("bad IDX magic number", 0)
    dtype = IDX_DTYPES.get(data[2])
    if dtype is None:
        raise IdxFormatError(f"unknown IDX type byte 0x{data[2]:02x}", 2)
    ndim = data[3]
    if ndim < 1:
        raise IdxFormatError("IDX file declares zero dimensions", 3)

    header_end = 4 + 4 * ndim
    if len(data) < header_end:
        raise IdxFormatError("truncated IDX dimension sizes", len(data))
    dims = struct.unpack('>' + 'I' * ndim, data[4:header_end])

    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    payload = len(data) - header_end
    if payload != expected:
        raise IdxFormatError(
            f"IDX payload has {payload} bytes, header announces {expected}",
            header_end + min(payload, expected),
        )
    return np.frombuffer(data, dtype=dtype, offset=header_end).reshape(dims)


def read_idx(path: str) -> np.ndarray:
    """Read one IDX file (``.gz`` is decompressed transparently)."""
    with _open(path, 'rb') as f:
        return parse_idx(f.read())


def write_idx(path: str, array: np.ndarray) -> None:
    """Write an array as IDX, keeping its dtype."""
    array = np.asarray(array)
    codes = {dt.newbyteorder('='): code for code, dt in IDX_DTYPES.items()}
    code = codes.get(array.dtype.newbyteorder('='))
    if code is None:
        raise ValueError(f"dtype {array.dtype} has no IDX type code")
    if array.ndim < 1:
        raise ValueError("IDX needs at least one dimension")
    header = bytes([0, 0, code, array.ndim]) + struct.pack('>' + 'I' * array.ndim, *array.shape)
    payload = array.astype(IDX_DTYPES[code], copy=False).tobytes()
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with _open(path, 'wb') as f:
        f.write(header + payload)


def load_idx(images_path: str, labels_path: str) -> ExampleStore:
    """
    Build an ExampleStore from an IDX image file and an IDX label file.

    uint8 pixels are scaled to [0, 1]; every image is flattened.
    """
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(
            f"{images.shape[0]} images but {labels.shape[0]} labels", 4
        )
    shape = tuple(int(s) for s in images.shape[1:]) or (1,)
    features = images.reshape(images.shape[0], -1).astype(np.float64)
    if images.dtype.kind == 'u' and images.dtype.itemsize == 1:
        features /= 255.0
    store = ExampleStore(features, labels.astype(np.int64), shape)
    log.debug(f"loaded {len(store)} examples of shape {shape} from {images_path}")
    return store


def _find(root: str, name: str) -> Optional[str]:
    for candidate in (name, name + '.gz'):
        path = os.path.join(root, candidate)
        if os.path.exists(path):
            return path
    return None


def mnist_available(root: str) -> bool:
    return all(_find(root, name) for pair in MNIST_FILES.values() for name in pair)


def load_mnist(root: str, split: str = "train") -> ExampleStore:
    """
    Load the MNIST train or test split from ``root``.

    Raises:
        DatasetMissingError: A file is absent; the message names the path
            and how to fetch it.
    """
    if split not in MNIST_FILES:
        raise ValueError(f"split must be one of {sorted(MNIST_FILES)}")
    paths = []
    for name in MNIST_FILES[split]:
        path = _find(root, name)
        if path is None:
            expected = os.path.abspath(os.path.join(root, name))
            raise DatasetMissingError(
                f"MNIST file not found: {expected}[.gz]. "
                f"Run 'python scripts/download_mnist.py --root {root}' "
                f"or set FLEXFL_DATA_ROOT."
            )
        paths.append(path)
    return load_idx(*paths)


# =============================================================================
# PARTITIONING & SAMPLING
# =============================================================================

def _store_size(store: Union[ExampleStore, int]) -> int:
    return store if isinstance(store, int) else len(store)


def partition_with_sizes(
    store: Union[ExampleStore, int],
    sizes: Iterable[int],
    seed: int,
) -> ClientPartition:
    """
    Assign disjoint uniformly shuffled blocks of the given sizes.

    Raises:
        PartitionError: sum(sizes) exceeds the store size.
    """
    sizes = [int(s) for s in sizes]
    if any(s < 0 for s in sizes):
        raise ValueError("client sizes must be nonnegative")
    available = _store_size(store)
    required = sum(sizes)
    if required > available:
        raise PartitionError(required, available)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xDA7A]))
    order = rng.permutation(available)
    cuts = np.cumsum([0] + sizes)
    blocks = tuple(order[cuts[m]:cuts[m + 1]] for m in range(len(sizes)))
    return ClientPartition(indices=blocks, store_size=available)


def partition_iid(
    store: Union[ExampleStore, int],
    num_clients: int,
    size_range: Sequence[int],
    seed: int,
) -> ClientPartition:
    """
    Draw D_m ~ U{lo..hi} per client, then split the store i.i.d.

    Args:
        store: ExampleStore (or its size).
        num_clients: M.
        size_range: Inclusive (lo, hi).
        seed: Partition seed.

    Raises:
        PartitionError: Drawn sizes need more examples than available.
    """
    lo, hi = int(size_range[0]), int(size_range[1])
    if lo < 0 or hi < lo:
        raise ValueError(f"invalid size range {size_range}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5123]))
    sizes = rng.integers(lo, hi + 1, size=num_clients)
    return partition_with_sizes(store, sizes, seed)


def sample_minibatch(
    store: ExampleStore,
    partition: ClientPartition,
    m: int,
    batch_size: int,
    rng: np.random.Generator,
    full_batch: bool = False,
) -> Batch:
    """
    Uniform with-replacement minibatch from client m.

    ``full_batch`` returns the client's whole dataset in partition order.

    Raises:
        ValueError: Empty client, or batch_size outside [1, D_m].
    """
    block = partition.indices[m]
    if len(block) == 0:
        raise ValueError(f"client {m} has no examples")
    if full_batch:
        chosen = block
    else:
        if batch_size < 1 or batch_size > len(block):
            raise ValueError(f"batch_size {batch_size} outside [1, {len(block)}] for client {m}")
        chosen = block[rng.integers(0, len(block), size=batch_size)]
    features, labels = store.take(chosen)
    return Batch(features, labels, chosen)
