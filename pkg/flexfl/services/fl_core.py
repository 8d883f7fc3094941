"""
FLEXFL - Flexible Aggregation Training Loop
===========================================
Local SGD with clipping, weighted global aggregation and round orchestration.

- Each selected client runs its own number of local iterations I_m <= A
- Global model is the (A/I_m)(D_m/D)-weighted combination of local endpoints,
  optionally renormalized over the selected clients
- Every round: fresh channels, allocation, local training, aggregation,
  evaluation, and a check that every selected client finishes by T_th

Usage:
    from flexfl.services.fl_core import run_training
    trace = run_training(scenario, task, rounds=50, seed=0)
    print(trace.to_frame().tail())
"""

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from flexfl.config import SOLVER, SolverConfig
from flexfl.logger import get_logger, log_event
from flexfl.services.allocator import AllocatorReport, Assignment, InfeasibleScheduleError, allocate
from flexfl.services.phy import ChannelRealization, Scenario, delays, sample_channels
from flexfl.services.tasks import TrainTask

log = get_logger('fl_core')

AGGREGATION_MODES = ("normalized", "as_written")
DELAY_TOL = 1e-9


class NonFiniteGradientError(FloatingPointError):
    """Gradient with NaN/inf entries; ``step`` is the local iteration index."""

    def __init__(self, message: str, step: int, client: int = -1):
        super().__init__(message)
        self.step = step
        self.client = client


class EmptyAggregationError(RuntimeError):
    """Aggregation requested with no selected client."""

    def __init__(self, message: str = "empty aggregation round"):
        super().__init__(message)


class BudgetViolationError(RuntimeError):
    """A selected client's round delay exceeds T_th."""


# =============================================================================
# DOMAIN TYPES
# =============================================================================

@dataclass(frozen=True)
class ModelVector:
    """Flat model parameters and the round that produced them."""
    params: np.ndarray
    version: int = 0

    def __post_init__(self):
        params = np.array(self.params, dtype=float)
        if params.ndim != 1:
            raise ValueError("model parameters must be a flat vector")
        if not np.all(np.isfinite(params)):
            raise ValueError("model parameters must be finite")
        params.setflags(write=False)
        object.__setattr__(self, 'params', params)

    @property
    def dim(self) -> int:
        return int(self.params.shape[0])

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.params))


@dataclass(frozen=True)
class RoundSchedule:
    """
    Who trains this round and for how long.

    ``iterations`` is 0 exactly for unselected clients. Aggregation weights
    are rho_m = (A / I_m)(D_m / D) with D summed over all clients.
    """
    selected: np.ndarray
    iterations: np.ndarray
    dataset_sizes: np.ndarray
    max_iterations: int

    def __post_init__(self):
        selected = np.asarray(self.selected, dtype=bool)
        iterations = np.asarray(self.iterations, dtype=int)
        sizes = np.asarray(self.dataset_sizes, dtype=float)
        if not (selected.shape == iterations.shape == sizes.shape):
            raise ValueError("selected, iterations and dataset_sizes must have one entry per client")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        bad = selected & ((iterations < 1) | (iterations > self.max_iterations))
        if np.any(bad):
            raise ValueError(
                f"iterations of selected clients {np.flatnonzero(bad).tolist()} "
                f"outside [1, {self.max_iterations}]"
            )
        if np.any(~selected & (iterations != 0)):
            raise ValueError("unselected clients must have zero iterations")
        object.__setattr__(self, 'selected', selected)
        object.__setattr__(self, 'iterations', iterations)
        object.__setattr__(self, 'dataset_sizes', sizes)

    @classmethod
    def from_assignment(cls, assignment: Assignment, scenario: Scenario) -> "RoundSchedule":
        return cls(
            selected=assignment.zeta,
            iterations=np.where(assignment.zeta, assignment.iterations, 0),
            dataset_sizes=scenario.dataset_sizes,
            max_iterations=scenario.timing.max_local_iterations,
        )

    @classmethod
    def full_participation(
        cls,
        dataset_sizes: Sequence[float],
        max_iterations: int,
        iterations: Optional[Sequence[int]] = None,
    ) -> "RoundSchedule":
        """Every client selected; I_m = A unless given."""
        sizes = np.asarray(dataset_sizes, dtype=float)
        its = np.full(len(sizes), max_iterations) if iterations is None else np.asarray(iterations)
        return cls(np.ones(len(sizes), dtype=bool), its, sizes, max_iterations)

    @property
    def num_clients(self) -> int:
        return len(self.selected)

    @property
    def num_selected(self) -> int:
        return int(self.selected.sum())

    @property
    def total_data(self) -> float:
        return float(self.dataset_sizes.sum())

    @property
    def weights(self) -> np.ndarray:
        """rho_m zeta_m."""
        safe = np.where(self.selected, self.iterations, 1)
        rho = (self.max_iterations / safe) * (self.dataset_sizes / self.total_data)
        return np.where(self.selected, rho, 0.0)

    def normalized_weights(self) -> np.ndarray:
        w = self.weights
        total = w.sum()
        if total <= 0:
            raise EmptyAggregationError()
        return w / total

    @property
    def participation_sum(self) -> float:
        """sum_m D_m^2 zeta_m / (D^2 I_m)."""
        safe = np.where(self.selected, self.iterations, 1)
        terms = self.dataset_sizes ** 2 / (self.total_data ** 2 * safe)
        return float(np.sum(terms[self.selected]))


@dataclass(frozen=True)
class RoundMetrics:
    """Measurements of one aggregation round (round 0 is the initial model)."""
    round: int
    loss: float
    accuracy: float
    gap: Optional[float] = None
    objective: float = 0.0
    sum_rate: float = 0.0
    selected: Tuple[int, ...] = ()
    iterations: Tuple[int, ...] = ()
    rates: Tuple[float, ...] = ()
    round_delays: Tuple[float, ...] = ()
    error: Optional[str] = None

    @property
    def max_delay(self) -> float:
        return max(self.round_delays) if self.round_delays else 0.0

    def to_record(self) -> Dict[str, object]:
        record: Dict[str, object] = {
            'round': self.round,
            'loss': self.loss,
            'accuracy': self.accuracy,
            'gap': math.nan if self.gap is None else self.gap,
            'objective': self.objective,
            'sum_rate': self.sum_rate,
            'num_selected': int(sum(self.selected)),
            'max_delay': self.max_delay,
            'error': self.error or '',
        }
        for m, (z, i, r) in enumerate(zip(self.selected, self.iterations, self.rates)):
            record[f'zeta_{m}'] = int(z)
            record[f'iter_{m}'] = int(i)
            record[f'rate_{m}'] = float(r)
        return record


@dataclass(frozen=True)
class TrainingTrace:
    """Per-round metrics of one run plus the final model."""
    rounds: Tuple[RoundMetrics, ...]
    final: ModelVector
    meta: Dict[str, object] = field(default_factory=dict)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([r.to_record() for r in self.rounds])

    @property
    def losses(self) -> np.ndarray:
        return np.array([r.loss for r in self.rounds])

    @property
    def accuracies(self) -> np.ndarray:
        return np.array([r.accuracy for r in self.rounds])

    @property
    def gaps(self) -> np.ndarray:
        return np.array([math.nan if r.gap is None else r.gap for r in self.rounds])

    @property
    def errors(self) -> List[str]:
        return [f"round {r.round}: {r.error}" for r in self.rounds if r.error]


# =============================================================================
# LOCAL TRAINING & AGGREGATION
# =============================================================================

def clip(params: np.ndarray, clip_norm: float) -> np.ndarray:
    """w / max(1, ||w|| / C); never increases the norm."""
    if math.isinf(clip_norm):
        return params
    norm = float(np.linalg.norm(params))
    return params / max(1.0, norm / clip_norm)


def local_train(
    global_model: ModelVector,
    m: int,
    iterations: int,
    task: TrainTask,
    rng_seed: int,
    round_index: Optional[int] = None,
) -> ModelVector:
    """
    I_m clipped SGD steps from the broadcast model.

    Minibatches come from a stream keyed by (seed, round, client), so the
    result does not depend on the order clients are trained in.

    Raises:
        ValueError: iterations < 1.
        NonFiniteGradientError: A gradient contains NaN or inf.
    """
    if iterations < 1:
        raise ValueError(f"client {m}: local iterations must be >= 1, got {iterations}")
    rnd = global_model.version if round_index is None else round_index
    rng = np.random.default_rng(np.random.SeedSequence([int(rng_seed), int(rnd), int(m)]))
    w = np.array(global_model.params, dtype=float)
    eta, C = task.learning_rate, task.clip_norm
    for step in range(iterations):
        g = task.batch_grad(w, task.batch(m, rng))
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(
                f"client {m}: non-finite gradient at local step {step}", step=step, client=m
            )
        w = clip(w - eta * g, C)
    return ModelVector(w, global_model.version)


def aggregate(
    locals_: Sequence[Tuple[int, ModelVector]],
    schedule: RoundSchedule,
    mode: str = "normalized",
    version: Optional[int] = None,
) -> ModelVector:
    """
    Combine local endpoints into the next global model.

    as_written: sum_m rho_m zeta_m w_m. normalized: the same weights divided
    by their sum over the contributing clients. Clients are reduced in
    index order.

    Raises:
        EmptyAggregationError: No local model supplied.
        ValueError: Unknown mode, or a contribution from an unselected client.
    """
    if mode not in AGGREGATION_MODES:
        raise ValueError(f"aggregation mode must be one of {AGGREGATION_MODES}")
    if not locals_:
        raise EmptyAggregationError()
    ordered = sorted(locals_, key=lambda item: item[0])
    clients = [m for m, _ in ordered]
    if not np.all(schedule.selected[clients]):
        raise ValueError(f"contributions from unselected clients {clients}")
    weights = schedule.weights[clients]
    if mode == "normalized":
        weights = weights / weights.sum()
    stacked = np.stack([mv.params for _, mv in ordered])
    new_version = max(mv.version for _, mv in ordered) + 1 if version is None else version
    return ModelVector(weights @ stacked, new_version)


# =============================================================================
# ROUNDS
# =============================================================================

def _evaluate(task: TrainTask, model: ModelVector) -> Tuple[float, float, Optional[float]]:
    loss, accuracy = task.evaluate(model.params)
    return loss, accuracy, task.gap(model.params)


def initial_metrics(task: TrainTask, model: ModelVector, num_clients: int) -> RoundMetrics:
    loss, accuracy, gap = _evaluate(task, model)
    return RoundMetrics(
        round=0, loss=loss, accuracy=accuracy, gap=gap,
        selected=(0,) * num_clients, iterations=(0,) * num_clients, rates=(0.0,) * num_clients,
    )


def run_round(
    global_model: ModelVector,
    channels: ChannelRealization,
    scenario: Scenario,
    task: TrainTask,
    round_index: int,
    allocator: str = "optimal",
    solver: SolverConfig = SOLVER,
    mode: str = "normalized",
    seed: int = 0,
) -> Tuple[ModelVector, RoundMetrics]:
    """
    One round: allocate, train selected clients, aggregate, evaluate.

    An infeasible or empty allocation leaves the model unchanged and is
    recorded in ``RoundMetrics.error``.

    Raises:
        BudgetViolationError: A selected client's T_m exceeds T_th.
        NonFiniteGradientError: Propagated from local training.
    """
    M = scenario.num_clients
    report: Optional[AllocatorReport] = None
    try:
        report = allocate(allocator, channels, scenario, solver, seed=seed, round_index=round_index)
        schedule = RoundSchedule.from_assignment(report.assignment, scenario)
        if schedule.num_selected == 0:
            raise EmptyAggregationError()
    except (InfeasibleScheduleError, EmptyAggregationError) as e:
        log.warning(f"round {round_index}: {e}; global model carried over")
        loss, accuracy, gap = _evaluate(task, global_model)
        carried = ModelVector(global_model.params, round_index)
        metrics = RoundMetrics(
            round=round_index, loss=loss, accuracy=accuracy, gap=gap,
            objective=report.objective if report else 0.0,
            selected=(0,) * M, iterations=(0,) * M, rates=(0.0,) * M,
            error=str(e),
        )
        return carried, metrics

    assignment = report.assignment
    T_th = scenario.timing.round_duration
    round_delays = []
    for m in np.flatnonzero(schedule.selected):
        breakdown = delays(scenario.clients[m], assignment.rates[m], scenario.model_bits,
                           scenario.timing, int(schedule.iterations[m]))
        if breakdown.total > T_th * (1 + DELAY_TOL):
            raise BudgetViolationError(
                f"round {round_index}: client {m} needs {breakdown.total:.4f} s > T_th = {T_th} s"
            )
        round_delays.append(breakdown.total)

    broadcast = ModelVector(global_model.params, round_index)
    locals_ = [
        (int(m), local_train(broadcast, int(m), int(schedule.iterations[m]), task, seed, round_index))
        for m in np.flatnonzero(schedule.selected)
    ]
    new_model = aggregate(locals_, schedule, mode, version=round_index)
    loss, accuracy, gap = _evaluate(task, new_model)

    metrics = RoundMetrics(
        round=round_index,
        loss=loss,
        accuracy=accuracy,
        gap=gap,
        objective=report.objective,
        sum_rate=report.sum_rate,
        selected=tuple(int(z) for z in schedule.selected),
        iterations=tuple(int(i) for i in schedule.iterations),
        rates=tuple(float(r) for r in assignment.rates),
        round_delays=tuple(round_delays),
    )
    log_event(
        'fl_core',
        f"round {round_index}: loss={loss:.4f} acc={accuracy:.4f} "
        f"selected={schedule.num_selected}/{M} objective={report.objective:.4g}",
        round=round_index, loss=loss, accuracy=accuracy,
        num_selected=schedule.num_selected, objective=report.objective, sum_rate=report.sum_rate,
    )
    return new_model, metrics


def run_training(
    scenario: Scenario,
    task: TrainTask,
    rounds: int,
    seed: int,
    allocator: str = "optimal",
    solver: SolverConfig = SOLVER,
    mode: str = "normalized",
    progress: bool = False,
) -> TrainingTrace:
    """
    G rounds with fresh block-fading channels each round.

    Round 0 records the initial model only. Deterministic in (scenario,
    task, seed, allocator, solver, mode).
    """
    if rounds < 0:
        raise ValueError("rounds must be >= 0")
    model = ModelVector(task.initial(seed), 0)
    history = [initial_metrics(task, model, scenario.num_clients)]
    for tau in tqdm(range(1, rounds + 1), desc=f"{allocator} seed={seed}", disable=not progress, leave=False):
        channels = sample_channels(scenario, seed, tau)
        model, metrics = run_round(model, channels, scenario, task, tau, allocator, solver, mode, seed)
        history.append(metrics)
    return TrainingTrace(
        rounds=tuple(history),
        final=model,
        meta={'seed': seed, 'allocator': allocator, 'mode': mode, 'rounds': rounds},
    )


def run_schedule(
    task: TrainTask,
    schedule: RoundSchedule,
    rounds: int,
    seed: int,
    mode: str = "as_written",
) -> TrainingTrace:
    """Train with a fixed schedule and no radio (convergence experiments)."""
    if schedule.num_selected == 0:
        raise EmptyAggregationError()
    model = ModelVector(task.initial(seed), 0)
    history = [initial_metrics(task, model, schedule.num_clients)]
    selected = np.flatnonzero(schedule.selected)
    for tau in range(1, rounds + 1):
        locals_ = [
            (int(m), local_train(model, int(m), int(schedule.iterations[m]), task, seed, tau))
            for m in selected
        ]
        model = aggregate(locals_, schedule, mode, version=tau)
        loss, accuracy, gap = _evaluate(task, model)
        history.append(RoundMetrics(
            round=tau, loss=loss, accuracy=accuracy, gap=gap,
            selected=tuple(int(z) for z in schedule.selected),
            iterations=tuple(int(i) for i in schedule.iterations),
            rates=(0.0,) * schedule.num_clients,
        ))
    return TrainingTrace(
        rounds=tuple(history),
        final=model,
        meta={'seed': seed, 'allocator': 'fixed', 'mode': mode, 'rounds': rounds},
    )
