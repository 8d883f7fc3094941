"""
FLEXFL - Learning Tasks
=======================
Loss models on flat parameter vectors and the per-client training task.

- QuadraticLoss: F = 1/2 ||X w - y||^2 / n
- LogisticLoss: L2-regularized binary cross-entropy, labels in {0, 1}
- MLPClassifier: one ReLU hidden layer, softmax cross-entropy
- LossModel: the interface TrainTask calls
- TrainTask: data, partition, SGD hyperparameters and the known optimum

Usage:
    from flexfl.services.tasks import MLPClassifier, TrainTask
    model = MLPClassifier(784, 128, 10)
    print(model.dim)   # 101770
"""

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Protocol, Tuple, runtime_checkable

import numpy as np
from scipy.special import expit, log_softmax, logsumexp

from flexfl.services.datasets import Batch, ClientPartition, ExampleStore, sample_minibatch


# =============================================================================
# LOSS MODELS
# =============================================================================

@runtime_checkable
class LossModel(Protocol):
    """Loss on a flat parameter vector, as TrainTask uses it."""

    kind: str
    dim: int

    def loss(self, w: np.ndarray, X: np.ndarray, y: np.ndarray) -> float: ...

    def grad(self, w: np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray: ...

    def accuracy(self, w: np.ndarray, X: np.ndarray, y: np.ndarray) -> float: ...

    def init_params(self, rng: np.random.Generator) -> np.ndarray: ...


class QuadraticLoss:
    """Least squares 1/2 ||X w - y||^2 / n; labels are real targets."""

    kind = "quadratic"

    def __init__(self, dim: int):
        self.dim = int(dim)

    def loss(self, w: np.ndarray, X: np.ndarray, y: np.ndarray) -> float:
        r = X @ w - y
        return 0.5 * float(r @ r) / len(y)

    def grad(self, w: np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray:
        return X.T @ (X @ w - y) / len(y)

    def accuracy(self, w: np.ndarray, X: np.ndarray, y: np.ndarray) -> float:
        return math.nan

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        return rng.standard_normal(self.dim)


class LogisticLoss:
    """Mean logistic loss plus (reg/2) ||w||^2."""

    kind = "logistic"

    def __init__(self, dim: int, regularization: float = 1e-2):
        if regularization < 0:
            raise ValueError("regularization must be >= 0")
        self.dim = int(dim)
        self.regularization = float(regularization)

    def loss(self, w: np.ndarray, X: np.ndarray, y: np.ndarray) -> float:
        z = X @ w
        data = float(np.mean(np.logaddexp(0.0, z) - y * z))
        return data + 0.5 * self.regularization * float(w @ w)

    def grad(self, w: np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray:
        return X.T @ (expit(X @ w) - y) / len(y) + self.regularization * w

    def hessian(self, w: np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray:
        s = expit(X @ w)
        return (X.T * (s * (1.0 - s))) @ X / len(y) + self.regularization * np.eye(self.dim)

    def accuracy(self, w: np.ndarray, X: np.ndarray, y: np.ndarray) -> float:
        return float(np.mean((X @ w > 0) == (y > 0.5)))

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        return 0.1 * rng.standard_normal(self.dim)


class MLPClassifier:
    """
    Two-layer perceptron n_in -> hidden (ReLU) -> n_out (softmax).

    Parameters are one flat vector laid out as W1, b1, W2, b2.
    """

    kind = "mlp"

    def __init__(self, n_in: int = 784, hidden: int = 128, n_out: int = 10):
        self.n_in, self.hidden, self.n_out = int(n_in), int(hidden), int(n_out)
        self.shapes = ((self.n_in, self.hidden), (self.hidden,), (self.hidden, self.n_out), (self.n_out,))
        self.dim = sum(int(np.prod(s)) for s in self.shapes)

    def unpack(self, w: np.ndarray) -> Tuple[np.ndarray, ...]:
        parts = []
        start = 0
        for shape in self.shapes:
            size = int(np.prod(shape))
            parts.append(w[start:start + size].reshape(shape))
            start += size
        return tuple(parts)

    def _forward(self, w: np.ndarray, X: np.ndarray):
        W1, b1, W2, b2 = self.unpack(w)
        pre = X @ W1 + b1
        hidden = np.maximum(pre, 0.0)
        logits = hidden @ W2 + b2
        return pre, hidden, logits

    def loss(self, w: np.ndarray, X: np.ndarray, y: np.ndarray) -> float:
        _, _, logits = self._forward(w, X)
        picked = logits[np.arange(len(y)), y.astype(int)]
        return float(np.mean(logsumexp(logits, axis=1) - picked))

    def grad(self, w: np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray:
        W1, _, W2, _ = self.unpack(w)
        pre, hidden, logits = self._forward(w, X)
        n = len(y)
        delta = np.exp(log_softmax(logits, axis=1))
        delta[np.arange(n), y.astype(int)] -= 1.0
        delta /= n
        gW2 = hidden.T @ delta
        gb2 = delta.sum(axis=0)
        back = (delta @ W2.T) * (pre > 0)
        gW1 = X.T @ back
        gb1 = back.sum(axis=0)
        return np.concatenate([gW1.ravel(), gb1, gW2.ravel(), gb2])

    def accuracy(self, w: np.ndarray, X: np.ndarray, y: np.ndarray) -> float:
        _, _, logits = self._forward(w, X)
        return float(np.mean(np.argmax(logits, axis=1) == y))

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        # He initialization, zero biases
        W1 = rng.standard_normal((self.n_in, self.hidden)) * math.sqrt(2.0 / self.n_in)
        W2 = rng.standard_normal((self.hidden, self.n_out)) * math.sqrt(2.0 / self.hidden)
        return np.concatenate([W1.ravel(), np.zeros(self.hidden), W2.ravel(), np.zeros(self.n_out)])


# =============================================================================
# TRAIN TASK
# =============================================================================

@dataclass(frozen=True)
class TrainTask:
    """
    Everything local training needs besides the schedule.

    ``optimum`` is the reference minimizer w* when known (synthetic tasks);
    gaps and bounds are only available with it.
    """
    model: LossModel
    store: ExampleStore
    partition: ClientPartition
    batch_size: int = 32
    learning_rate: float = 0.1
    clip_norm: float = 10.0
    initial_params: Optional[np.ndarray] = None
    test_store: Optional[ExampleStore] = None
    optimum: Optional[np.ndarray] = None
    full_batch: bool = False
    _optimum_loss: list = field(default_factory=list, init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @property
    def kind(self) -> str:
        return self.model.kind

    @property
    def dim(self) -> int:
        return self.model.dim

    @property
    def num_clients(self) -> int:
        return self.partition.num_clients

    @property
    def dataset_sizes(self) -> np.ndarray:
        return self.partition.sizes

    def initial(self, seed: int = 0) -> np.ndarray:
        if self.initial_params is not None:
            return np.array(self.initial_params, dtype=float)
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x1A17]))
        return self.model.init_params(rng)

    def with_hyperparameters(self, **changes) -> "TrainTask":
        return replace(self, **changes)

    # -- losses and gradients ------------------------------------------------

    def _global_data(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.store.take(self.partition.all_indices)

    def global_loss(self, w: np.ndarray) -> float:
        """F(w) = sum_m D_m F_m(w) / D over the partitioned examples."""
        X, y = self._global_data()
        return self.model.loss(w, X, y)

    def global_grad(self, w: np.ndarray) -> np.ndarray:
        X, y = self._global_data()
        return self.model.grad(w, X, y)

    def local_loss(self, w: np.ndarray, m: int) -> float:
        X, y = self.store.take(self.partition.indices[m])
        return self.model.loss(w, X, y)

    def local_grad(self, w: np.ndarray, m: int) -> np.ndarray:
        X, y = self.store.take(self.partition.indices[m])
        return self.model.grad(w, X, y)

    def batch(self, m: int, rng: np.random.Generator) -> Batch:
        size = min(self.batch_size, len(self.partition.indices[m]))
        return sample_minibatch(self.store, self.partition, m, size, rng, full_batch=self.full_batch)

    def batch_grad(self, w: np.ndarray, batch: Batch) -> np.ndarray:
        return self.model.grad(w, batch.features, batch.labels)

    # -- evaluation -------------------------------------------------------------

    @property
    def optimum_loss(self) -> Optional[float]:
        if self.optimum is None:
            return None
        if not self._optimum_loss:
            self._optimum_loss.append(self.global_loss(self.optimum))
        return self._optimum_loss[0]

    def gap(self, w: np.ndarray) -> Optional[float]:
        """F(w) - F(w*), None without a known optimum."""
        best = self.optimum_loss
        return None if best is None else self.global_loss(w) - best

    def evaluate(self, w: np.ndarray) -> Tuple[float, float]:
        """(loss, accuracy) on the test store, or on the training union."""
        if self.test_store is not None and len(self.test_store):
            X, y = self.test_store.features, self.test_store.labels
        else:
            X, y = self._global_data()
        return (
            self.model.loss(w, X, y),
            self.model.accuracy(w, X, y),
        )
