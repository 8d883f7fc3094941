"""
FLEXFL - Synthetic Tasks
========================
Convex tasks with a known optimum, used to check convergence bounds.

- Quadratic least squares with a constructed eigenvalue spread
  (L_c / rho equals the requested conditioning exactly)
- L2-regularized logistic regression with a high-precision reference optimum

Usage:
    from flexfl.services.synthetic import synth_task
    task = synth_task("quadratic", dim=10, conditioning=10.0, seed=0)
    print(task.gap(task.initial()))
"""

import math
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import eigvalsh
from scipy.optimize import minimize
from scipy.special import expit

from flexfl.logger import get_logger
from flexfl.services.datasets import ExampleStore, partition_with_sizes
from flexfl.services.tasks import LogisticLoss, QuadraticLoss, TrainTask

log = get_logger('synthetic')

OPTIMUM_GRAD_TOL = 1e-10


class SingularProblemError(ValueError):
    """Quadratic task without a unique minimizer."""


def _draw_sizes(rng: np.random.Generator, num_clients: int, size_range: Sequence[int]) -> np.ndarray:
    lo, hi = int(size_range[0]), int(size_range[1])
    return rng.integers(lo, hi + 1, size=num_clients)


def _partition(n: int, sizes: Optional[Sequence[int]], seed: int):
    sizes = [n] if sizes is None else [int(s) for s in sizes]
    if sum(sizes) != n:
        raise ValueError(f"client sizes sum to {sum(sizes)}, task has {n} examples")
    return partition_with_sizes(n, sizes, seed)


def quadratic_task(
    features: np.ndarray,
    targets: np.ndarray,
    sizes: Optional[Sequence[int]] = None,
    seed: int = 0,
    batch_size: int = 32,
    learning_rate: Optional[float] = None,
    clip_norm: float = math.inf,
    initial_params: Optional[np.ndarray] = None,
    full_batch: bool = False,
) -> TrainTask:
    """
    Least-squares task on explicit data; w* is the least-squares solution.

    Raises:
        SingularProblemError: X^T X is singular.
    """
    X = np.asarray(features, dtype=float)
    y = np.asarray(targets, dtype=float)
    n, d = X.shape
    if np.linalg.matrix_rank(X) < d:
        raise SingularProblemError(f"X has rank below {d}; quadratic optimum is not unique")
    optimum = np.linalg.lstsq(X, y, rcond=None)[0]
    if learning_rate is None:
        learning_rate = 1.0 / float(eigvalsh(X.T @ X / n)[-1])
    return TrainTask(
        model=QuadraticLoss(d),
        store=ExampleStore(X, y),
        partition=_partition(n, sizes, seed),
        batch_size=batch_size,
        learning_rate=learning_rate,
        clip_norm=clip_norm,
        initial_params=initial_params,
        optimum=optimum,
        full_batch=full_batch,
    )


def logistic_optimum(model: LogisticLoss, X: np.ndarray, y: np.ndarray,
                     start: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Reference minimizer: Newton-CG, then exact Newton steps until the
    gradient norm drops below 1e-10.
    """
    x0 = np.zeros(model.dim) if start is None else np.asarray(start, dtype=float)
    result = minimize(
        lambda w: model.loss(w, X, y),
        x0,
        jac=lambda w: model.grad(w, X, y),
        hess=lambda w: model.hessian(w, X, y),
        method='Newton-CG',
        options={'xtol': 1e-14, 'maxiter': 500},
    )
    w = result.x
    for _ in range(50):
        g = model.grad(w, X, y)
        if np.linalg.norm(g) < OPTIMUM_GRAD_TOL:
            break
        w = w - np.linalg.solve(model.hessian(w, X, y), g)
    norm = float(np.linalg.norm(model.grad(w, X, y)))
    if norm >= OPTIMUM_GRAD_TOL:
        log.warning(f"logistic optimum gradient norm {norm:.2e} above {OPTIMUM_GRAD_TOL:.0e}")
    return w


def logistic_task(
    features: np.ndarray,
    labels: np.ndarray,
    regularization: float = 1e-2,
    sizes: Optional[Sequence[int]] = None,
    seed: int = 0,
    batch_size: int = 32,
    learning_rate: Optional[float] = None,
    clip_norm: float = math.inf,
    initial_params: Optional[np.ndarray] = None,
    full_batch: bool = False,
) -> TrainTask:
    """L2-regularized logistic task on explicit data, labels in {0, 1}."""
    X = np.asarray(features, dtype=float)
    y = np.asarray(labels, dtype=float)
    n, d = X.shape
    if regularization == 0 and np.linalg.matrix_rank(X) < d:
        raise SingularProblemError("unregularized logistic task with rank-deficient X")
    model = LogisticLoss(d, regularization)
    if learning_rate is None:
        learning_rate = 1.0 / (float(eigvalsh(X.T @ X / n)[-1]) / 4.0 + regularization)
    return TrainTask(
        model=model,
        store=ExampleStore(X, y),
        partition=_partition(n, sizes, seed),
        batch_size=batch_size,
        learning_rate=learning_rate,
        clip_norm=clip_norm,
        initial_params=initial_params,
        optimum=logistic_optimum(model, X, y),
        full_batch=full_batch,
    )


def synth_task(
    kind: str,
    dim: int = 10,
    conditioning: float = 10.0,
    seed: int = 0,
    sizes: Optional[Sequence[int]] = None,
    num_clients: int = 10,
    size_range: Sequence[int] = (300, 500),
    noise: float = 0.1,
    regularization: float = 1e-2,
    batch_size: int = 32,
    learning_rate: Optional[float] = None,
    clip_norm: float = math.inf,
    full_batch: bool = False,
) -> TrainTask:
    """
    Random convex task with a known optimum.

    quadratic: X = sqrt(n) U diag(sqrt(lambda)) V^T with lambda evenly spaced
    in [1, conditioning], so X^T X / n has exactly that spectrum.
    logistic: Gaussian features scaled by the same spectrum, Bernoulli labels
    from a random planted model.

    Args:
        kind: 'quadratic' or 'logistic'.
        dim: Parameter dimension (>= 2 for the spread to apply).
        conditioning: Target eigenvalue ratio (>= 1).
        seed: Data seed.
        sizes: Client sizes D_m; drawn from ``size_range`` when None.
        learning_rate: Defaults to 1 / L_c.

    Returns:
        TrainTask whose ``optimum`` is set.
    """
    if dim < 1:
        raise ValueError("dim must be >= 1")
    if conditioning < 1:
        raise ValueError("conditioning must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5E7]))
    if sizes is None:
        sizes = _draw_sizes(rng, num_clients, size_range)
    sizes = [int(s) for s in sizes]
    n = sum(sizes)
    if n < dim:
        raise SingularProblemError(f"{n} examples cannot determine {dim} parameters")

    spectrum = np.linspace(1.0, conditioning, dim) if dim > 1 else np.array([1.0])
    initial = rng.standard_normal(dim)
    planted = rng.standard_normal(dim)

    if kind == "quadratic":
        U, _ = np.linalg.qr(rng.standard_normal((n, dim)))
        V, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
        X = math.sqrt(n) * (U * np.sqrt(spectrum)) @ V.T
        y = X @ planted + noise * rng.standard_normal(n)
        task = quadratic_task(X, y, sizes, seed, batch_size, learning_rate, clip_norm, initial, full_batch)
    elif kind == "logistic":
        X = rng.standard_normal((n, dim)) * np.sqrt(spectrum)
        labels = (rng.random(n) < expit(X @ planted)).astype(float)
        task = logistic_task(X, labels, regularization, sizes, seed, batch_size,
                             learning_rate, clip_norm, initial, full_batch)
    else:
        raise ValueError(f"unknown synthetic task kind '{kind}'")

    log.debug(f"synthetic {kind} task: n={n}, d={dim}, cond={conditioning}")
    return task
