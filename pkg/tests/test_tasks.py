"""
Unit tests for flexfl/services/tasks.py and flexfl/services/synthetic.py.

Tests cover:
- Loss gradients against central finite differences
- MLP parameter layout
- Train task evaluation and validation
- Synthetic tasks: spectrum, optimum, singular data
"""

import math

import numpy as np
import pytest
from scipy.linalg import eigvalsh

from flexfl.services.synthetic import SingularProblemError, logistic_optimum, quadratic_task, synth_task
from flexfl.services.tasks import LogisticLoss, LossModel, MLPClassifier, QuadraticLoss


def _numeric_grad(f, w, h=1e-6):
    grad = np.zeros_like(w)
    for i in range(len(w)):
        e = np.zeros_like(w)
        e[i] = h
        grad[i] = (f(w + e) - f(w - e)) / (2 * h)
    return grad


# =============================================================================
# LOSS MODELS
# =============================================================================

class TestGradients:
    """Analytic gradients match finite differences."""

    def test_quadratic(self):
        rng = np.random.default_rng(0)
        X, y, w = rng.standard_normal((12, 4)), rng.standard_normal(12), rng.standard_normal(4)
        model = QuadraticLoss(4)
        numeric = _numeric_grad(lambda v: model.loss(v, X, y), w)
        assert np.allclose(model.grad(w, X, y), numeric, rtol=1e-5, atol=1e-7)

    def test_logistic(self):
        rng = np.random.default_rng(1)
        X = rng.standard_normal((20, 5))
        y = (rng.random(20) < 0.5).astype(float)
        w = rng.standard_normal(5)
        model = LogisticLoss(5, regularization=0.05)
        numeric = _numeric_grad(lambda v: model.loss(v, X, y), w)
        assert np.allclose(model.grad(w, X, y), numeric, rtol=1e-5, atol=1e-7)

    def test_logistic_hessian(self):
        rng = np.random.default_rng(2)
        X = rng.standard_normal((15, 3))
        y = (rng.random(15) < 0.5).astype(float)
        w = rng.standard_normal(3)
        model = LogisticLoss(3)
        columns = [_numeric_grad(lambda v: model.grad(v, X, y)[i], w) for i in range(3)]
        assert np.allclose(model.hessian(w, X, y), np.array(columns), rtol=1e-4, atol=1e-6)

    def test_mlp(self):
        rng = np.random.default_rng(3)
        model = MLPClassifier(4, 5, 3)
        X = rng.standard_normal((6, 4))
        y = rng.integers(0, 3, size=6)
        w = model.init_params(rng) + 0.1 * rng.standard_normal(model.dim)
        numeric = _numeric_grad(lambda v: model.loss(v, X, y), w)
        assert np.allclose(model.grad(w, X, y), numeric, rtol=1e-4, atol=1e-6)


class TestLossModel:
    """Every loss model fits the interface TrainTask calls."""

    @pytest.mark.parametrize("model", [QuadraticLoss(3), LogisticLoss(3), MLPClassifier(4, 5, 3)])
    def test_models_fit_interface(self, model):
        assert isinstance(model, LossModel)
        w = model.init_params(np.random.default_rng(0))
        assert w.shape == (model.dim,)
        assert model.kind in ("quadratic", "logistic", "mlp")


class TestMLPClassifier:
    """Tests for MLPClassifier layout and outputs."""

    def test_reference_size(self):
        assert MLPClassifier().dim == 101_770

    def test_unpack_shapes(self):
        model = MLPClassifier(4, 5, 3)
        parts = model.unpack(np.arange(model.dim, dtype=float))
        assert [p.shape for p in parts] == [(4, 5), (5,), (5, 3), (3,)]
        assert parts[3].tolist() == [model.dim - 3, model.dim - 2, model.dim - 1]

    def test_uniform_logits_loss(self):
        """Test that zero weights give loss log(n_out) and a valid accuracy."""
        model = MLPClassifier(4, 5, 3)
        X = np.ones((2, 4))
        y = np.array([0, 2])
        assert model.loss(np.zeros(model.dim), X, y) == pytest.approx(math.log(3))
        assert model.accuracy(np.zeros(model.dim), X, y) == 0.5


# =============================================================================
# TRAIN TASKS
# =============================================================================

class TestTrainTask:
    """Tests for TrainTask evaluation helpers."""

    def test_identity_task(self, identity_task):
        """Test that the identity task has F(w) = 1/2 ||w||^2."""
        w = np.array([1.0, -2.0, 0.5])
        assert identity_task.global_loss(w) == pytest.approx(0.5 * float(w @ w))
        assert identity_task.global_grad(w) == pytest.approx(w)
        assert identity_task.gap(identity_task.initial()) == pytest.approx(1.5)
        assert identity_task.optimum == pytest.approx(np.zeros(3))

    def test_quadratic_has_no_accuracy(self, identity_task):
        loss, accuracy = identity_task.evaluate(np.zeros(3))
        assert loss == 0.0
        assert math.isnan(accuracy)

    def test_local_losses_average_to_global(self, small_quadratic):
        w = np.ones(small_quadratic.dim)
        sizes = small_quadratic.dataset_sizes
        local = [small_quadratic.local_loss(w, m) for m in range(small_quadratic.num_clients)]
        assert float(np.dot(sizes, local) / sizes.sum()) == pytest.approx(small_quadratic.global_loss(w))

    def test_minibatch_gradient_is_unbiased(self, small_quadratic):
        """Test that the mean minibatch gradient approaches the local gradient."""
        w = small_quadratic.initial(0) + 1.0
        rng = np.random.default_rng(11)
        draws = [small_quadratic.batch_grad(w, small_quadratic.batch(0, rng)) for _ in range(4000)]
        exact = small_quadratic.local_grad(w, 0)
        assert np.linalg.norm(np.mean(draws, axis=0) - exact) <= 0.1 * np.linalg.norm(exact)

    def test_initial_is_a_copy(self, identity_task):
        w = identity_task.initial()
        w[0] = 99.0
        assert identity_task.initial()[0] == 1.0

    def test_invalid_hyperparameters(self, identity_task):
        with pytest.raises(ValueError):
            identity_task.with_hyperparameters(learning_rate=0.0)
        with pytest.raises(ValueError):
            identity_task.with_hyperparameters(batch_size=0)


class TestSynthTask:
    """Tests for synth_task() and quadratic_task()."""

    def test_quadratic_spectrum(self, small_quadratic):
        X, _ = small_quadratic.store.features, small_quadratic.store.labels
        spectrum = eigvalsh(X.T @ X / len(X))
        assert spectrum == pytest.approx(np.linspace(1.0, 4.0, 5), rel=1e-9)
        assert small_quadratic.learning_rate == pytest.approx(0.25)

    def test_quadratic_optimum(self, small_quadratic):
        assert np.linalg.norm(small_quadratic.global_grad(small_quadratic.optimum)) < 1e-9
        assert small_quadratic.gap(small_quadratic.initial()) > 0

    def test_partition_sizes(self, small_quadratic):
        assert small_quadratic.dataset_sizes.tolist() == [40, 50, 60, 70]
        assert small_quadratic.partition.is_disjoint()

    def test_logistic_optimum(self):
        task = synth_task("logistic", dim=4, conditioning=3.0, seed=1, sizes=[30, 30, 40])
        assert np.linalg.norm(task.global_grad(task.optimum)) < 1e-8
        assert 0.0 <= task.evaluate(task.optimum)[1] <= 1.0

    def test_logistic_optimum_independent_of_start(self):
        task = synth_task("logistic", dim=4, conditioning=3.0, seed=1, sizes=[30, 30, 40])
        X, y = task.store.features, task.store.labels
        start = 3.0 * np.random.default_rng(8).standard_normal(task.dim)
        other = logistic_optimum(task.model, X, y, start=start)
        assert np.linalg.norm(other - task.optimum) < 1e-8

    def test_deterministic(self):
        a = synth_task("quadratic", dim=3, seed=7, sizes=[20, 20])
        b = synth_task("quadratic", dim=3, seed=7, sizes=[20, 20])
        assert np.array_equal(a.store.features, b.store.features)
        assert np.array_equal(a.initial(), b.initial())

    def test_singular_data(self):
        X = np.array([[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]])
        with pytest.raises(SingularProblemError):
            quadratic_task(X, np.zeros(3))

    def test_too_few_examples(self):
        with pytest.raises(SingularProblemError):
            synth_task("quadratic", dim=10, sizes=[3, 3])

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            synth_task("cubic", dim=3, sizes=[10])
