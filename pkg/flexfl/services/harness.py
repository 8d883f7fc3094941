"""
FLEXFL - Experiment Harness
===========================
Seeded multi-run experiments, objective sweeps and plot-ready CSV output.

- ExperimentSpec: config + task + allocators + seeds + sweep axes, with a
  stable digest that keys every run
- ExperimentRunner: (allocator x K x seed) training runs on a thread pool,
  failures captured per run
- sweep_objective: seed-averaged weighted sum-rate objective and sum rate over K or L
- emit_plot_data: fixed-schema CSV files for every figure
- verify suites: oracle certification and bound check at reduced scale

Usage:
    from flexfl.services.harness import ExperimentSpec, run_experiment, emit_plot_data
    spec = ExperimentSpec.from_config(load_config("configs/defaults.toml"))
    bundle = run_experiment(spec)
    emit_plot_data(bundle, "results")
"""

import functools
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from flexfl.config import ALLOCATOR_KINDS, HARNESS, ConfigError, ExperimentConfig, SolverConfig
from flexfl.logger import get_logger, temporary_log_level
from flexfl.services.allocator import (
    InfeasibleScheduleError,
    OracleGuardError,
    allocate,
    brute_force_reference,
    solve,
)
from flexfl.services.convergence import (
    estimate_constants,
    gap_vs_bound,
    replicate_gaps,
)
from flexfl.services.datasets import load_mnist, partition_with_sizes
from flexfl.services.fl_core import RoundSchedule, run_training
from flexfl.services.phy import Scenario, build_scenario, sample_channels
from flexfl.services.synthetic import synth_task
from flexfl.services.tasks import MLPClassifier, TrainTask
from flexfl.utils import ensure_dir, is_writable_dir, load_json, save_json, stable_digest

log = get_logger('harness')

LOSS_COLUMNS = ['run_key', 'allocator', 'K', 'seed', 'round', 'loss']
ACCURACY_COLUMNS = ['run_key', 'allocator', 'K', 'seed', 'round', 'accuracy']
SWEEP_COLUMNS = ['allocator', 'mean_objective', 'mean_sum_rate', 'runs']
SELECTION_COLUMNS = ['run_key', 'allocator', 'K', 'seed', 'round', 'client', 'zeta', 'iterations']
SUMMARY_COLUMNS = ['allocator', 'K', 'runs', 'errors', 'final_loss', 'final_accuracy',
                   'mean_objective', 'mean_sum_rate']


class OutputError(OSError):
    """Output directory missing and not creatable, or not writable."""


def modulation_rates(num_modes: int) -> Tuple[float, ...]:
    """Idle plus L nonzero modes: (0, 2, 4, ..., 2L) bits/symbol."""
    if num_modes < 1:
        raise ValueError("need at least one nonzero mode")
    return tuple(2.0 * i for i in range(num_modes + 1))


# =============================================================================
# SPEC & RESULTS
# =============================================================================

@dataclass(frozen=True)
class ExperimentSpec:
    """What to run. Every (allocator, K, seed) point is keyed by the digest."""
    config: ExperimentConfig
    task: str = "mlp"
    allocators: Tuple[str, ...] = ALLOCATOR_KINDS
    rounds: int = 50
    seeds: Tuple[int, ...] = HARNESS.seeds
    k_values: Tuple[int, ...] = HARNESS.k_values
    l_values: Tuple[int, ...] = HARNESS.l_values

    def __post_init__(self):
        if self.rounds < 0:
            raise ConfigError("rounds must be >= 0")
        if self.task not in ("mlp", "quadratic", "logistic"):
            raise ConfigError(f"unknown task '{self.task}'")

    @classmethod
    def from_config(cls, config: ExperimentConfig, **overrides) -> "ExperimentSpec":
        values = dict(
            config=config,
            task=config.training.task,
            allocators=tuple(config.harness.allocators),
            rounds=config.training.rounds,
            seeds=tuple(config.harness.seeds),
            k_values=tuple(config.harness.k_values),
            l_values=tuple(config.harness.l_values),
        )
        values.update(overrides)
        return cls(**values)

    def to_dict(self) -> dict:
        return {
            'config': self.config.to_dict(),
            'task': self.task,
            'allocators': list(self.allocators),
            'rounds': self.rounds,
            'seeds': list(self.seeds),
            'k_values': list(self.k_values),
            'l_values': list(self.l_values),
        }

    @property
    def digest(self) -> str:
        return stable_digest(self.to_dict())

    def run_key(self, allocator: str, K: int, seed: int) -> str:
        return f"{self.digest}-{allocator}-K{K}-s{seed}"

    def points(self) -> List[Tuple[str, int, int]]:
        """(allocator, K, seed) in run-key order."""
        return [(a, k, s) for a in self.allocators for k in self.k_values for s in self.seeds]


@dataclass
class RunResult:
    """Outcome of one training run."""
    key: str
    allocator: str
    K: int
    seed: int
    frame: pd.DataFrame = field(default_factory=pd.DataFrame)
    error: Optional[str] = None
    elapsed: float = 0.0

    @property
    def success(self) -> bool:
        return self.error is None


@dataclass
class ResultBundle:
    """All runs of one spec plus the summary and optional sweeps."""
    spec: dict
    runs: List[RunResult] = field(default_factory=list)
    sweeps: Dict[str, pd.DataFrame] = field(default_factory=dict)

    @property
    def errors(self) -> List[str]:
        return [f"{r.key}: {r.error}" for r in self.runs if r.error]

    @property
    def exit_code(self) -> int:
        return 1 if self.errors else 0

    def summary(self) -> pd.DataFrame:
        """Final loss/accuracy and mean objective per (allocator, K)."""
        rows = []
        groups: Dict[Tuple[str, int], List[RunResult]] = {}
        for run in self.runs:
            groups.setdefault((run.allocator, run.K), []).append(run)
        for (allocator, K), runs in sorted(groups.items()):
            ok = [r for r in runs if r.success and not r.frame.empty]
            finals = [r.frame.iloc[-1] for r in ok]
            later = [r.frame[r.frame['round'] > 0] for r in ok]
            rows.append({
                'allocator': allocator,
                'K': K,
                'runs': len(runs),
                'errors': len(runs) - len(ok),
                'final_loss': float(np.mean([f['loss'] for f in finals])) if finals else math.nan,
                'final_accuracy': float(np.mean([f['accuracy'] for f in finals])) if finals else math.nan,
                'mean_objective': _mean_of(later, 'objective'),
                'mean_sum_rate': _mean_of(later, 'sum_rate'),
            })
        return pd.DataFrame(rows, columns=SUMMARY_COLUMNS)

    def save(self, out_dir: str) -> str:
        """traces/<run_key>.csv, summary.csv, sweep_<axis>.csv and manifest.json."""
        if not is_writable_dir(out_dir):
            raise OutputError(f"cannot write to {out_dir}")
        ensure_dir(os.path.join(out_dir, 'traces'))
        for run in self.runs:
            if run.success:
                _write_csv(run.frame, os.path.join(out_dir, 'traces', f"{run.key}.csv"))
        _write_csv(self.summary(), os.path.join(out_dir, 'summary.csv'))
        for axis, table in self.sweeps.items():
            _write_csv(table, os.path.join(out_dir, f"sweep_{axis}.csv"))
        manifest = {
            'spec': self.spec,
            'runs': [
                {'key': r.key, 'allocator': r.allocator, 'K': r.K, 'seed': r.seed,
                 'error': r.error, 'elapsed': round(r.elapsed, 3)}
                for r in self.runs
            ],
            'sweeps': sorted(self.sweeps),
        }
        if not save_json(os.path.join(out_dir, 'manifest.json'), manifest):
            raise OutputError(f"cannot write manifest in {out_dir}")
        return out_dir

    @classmethod
    def load(cls, out_dir: str) -> "ResultBundle":
        manifest = load_json(os.path.join(out_dir, 'manifest.json'), None)
        if manifest is None:
            raise FileNotFoundError(f"no result bundle in {out_dir} (manifest.json missing)")
        runs = []
        for entry in manifest['runs']:
            path = os.path.join(out_dir, 'traces', f"{entry['key']}.csv")
            frame = pd.read_csv(path) if entry['error'] is None and os.path.exists(path) else pd.DataFrame()
            runs.append(RunResult(entry['key'], entry['allocator'], int(entry['K']), int(entry['seed']),
                                  frame, entry['error'], float(entry.get('elapsed', 0.0))))
        sweeps = {axis: pd.read_csv(os.path.join(out_dir, f"sweep_{axis}.csv")) for axis in manifest['sweeps']}
        return cls(spec=manifest['spec'], runs=runs, sweeps=sweeps)


def _mean_of(frames: Sequence[pd.DataFrame], column: str) -> float:
    values = [float(f[column].mean()) for f in frames if not f.empty]
    return float(np.mean(values)) if values else math.nan


def _write_csv(frame: pd.DataFrame, path: str) -> None:
    frame.to_csv(path, index=False, lineterminator='\n', encoding='utf-8')


# =============================================================================
# TASKS
# =============================================================================

@functools.lru_cache(maxsize=4)
def _mnist(root: str, split: str):
    return load_mnist(root, split)


def build_task(config: ExperimentConfig, scenario: Scenario, seed: int, kind: Optional[str] = None) -> TrainTask:
    """
    Task whose client sizes match the scenario's D_m.

    Raises:
        DatasetMissingError: MLP task without MNIST under harness.dataset_root.
    """
    training = config.training
    kind = kind or training.task
    sizes = scenario.dataset_sizes.astype(int)
    if kind == "mlp":
        root = config.harness.dataset_root
        train = _mnist(root, 'train')
        test = _mnist(root, 'test')
        return TrainTask(
            model=MLPClassifier(train.dim, config.model.hidden_units, 10),
            store=train,
            partition=partition_with_sizes(train, sizes, seed),
            batch_size=training.batch_size,
            learning_rate=training.learning_rate,
            clip_norm=training.clip_norm,
            test_store=test,
        )
    return synth_task(
        kind,
        dim=training.synthetic_dim,
        conditioning=training.conditioning,
        seed=seed,
        sizes=sizes,
        noise=training.noise,
        regularization=training.regularization,
        batch_size=training.batch_size,
        learning_rate=training.learning_rate,
        clip_norm=training.clip_norm,
    )


# =============================================================================
# RUNNER
# =============================================================================

class ExperimentRunner:
    """
    Executes every (allocator, K, seed) point of a spec on a thread pool.

    Runs are independent and deterministic; results are reduced in run-key
    order so the bundle does not depend on completion order.
    """

    def __init__(self, spec: ExperimentSpec, workers: Optional[int] = None, progress: bool = False):
        self.spec = spec
        self.workers = workers or spec.config.harness.workers
        self.progress = progress
        self._item_callback: Optional[Callable[[RunResult], None]] = None

    def set_item_callback(self, callback: Callable[[RunResult], None]) -> None:
        self._item_callback = callback

    def run_one(self, allocator: str, K: int, seed: int) -> RunResult:
        key = self.spec.run_key(allocator, K, seed)
        start = time.time()
        try:
            config = self.spec.config
            scenario = build_scenario(config, seed).with_subchannels(K)
            task = build_task(config, scenario, seed, self.spec.task)
            # the uploaded model is the one being trained
            scenario = scenario.with_model_params(task.dim)
            trace = run_training(
                scenario, task, self.spec.rounds, seed,
                allocator=allocator, solver=config.solver, mode=config.training.aggregation,
            )
            return RunResult(key, allocator, K, seed, trace.to_frame(), elapsed=time.time() - start)
        except (FileNotFoundError, ValueError, RuntimeError, FloatingPointError) as e:
            log.error(f"run {key} failed: {e}")
            log.debug("run failure", exc_info=True)
            return RunResult(key, allocator, K, seed, error=str(e), elapsed=time.time() - start)

    def run(self) -> ResultBundle:
        points = self.spec.points()
        log.info(f"experiment {self.spec.digest}: {len(points)} run(s), workers={self.workers}")
        results: Dict[str, RunResult] = {}
        if points:
            with ThreadPoolExecutor(max_workers=self.workers) as executor:
                future_to_key = {
                    executor.submit(self.run_one, a, k, s): self.spec.run_key(a, k, s)
                    for a, k, s in points
                }
                bar = tqdm(total=len(points), desc="runs", disable=not self.progress)
                for future in as_completed(future_to_key):
                    key = future_to_key[future]
                    result = future.result()
                    results[key] = result
                    bar.update(1)
                    if self._item_callback:
                        self._item_callback(result)
                bar.close()
        ordered = [results[self.spec.run_key(a, k, s)] for a, k, s in points]
        bundle = ResultBundle(spec=self.spec.to_dict(), runs=ordered)
        log.info(f"experiment {self.spec.digest}: {len(ordered) - len(bundle.errors)}/{len(ordered)} runs ok")
        return bundle


def create_experiment_runner(spec: ExperimentSpec, workers: Optional[int] = None,
                             progress: bool = False) -> ExperimentRunner:
    return ExperimentRunner(spec, workers, progress)


def run_experiment(spec: ExperimentSpec, workers: Optional[int] = None, progress: bool = False) -> ResultBundle:
    """Run every point of ``spec``; errors are kept in the bundle, never raised."""
    return ExperimentRunner(spec, workers, progress).run()


# =============================================================================
# SWEEPS
# =============================================================================

def _sweep_scenario(config: ExperimentConfig, seed: int, axis: str, value: int) -> Scenario:
    scenario = build_scenario(config, seed)
    if axis == "K":
        return scenario.with_subchannels(int(value))
    return scenario.with_rates(modulation_rates(int(value)))


def sweep_objective(
    spec: ExperimentSpec,
    axis: str = "K",
    values: Optional[Sequence[int]] = None,
    draws: Optional[int] = None,
) -> pd.DataFrame:
    """
    Seed-averaged weighted sum-rate objective and uplink sum rate per axis value and allocator.

    Each (value, seed) averages ``draws`` channel realizations (rounds
    1..draws); an infeasible round counts as zero objective and zero rate.

    Returns:
        Columns: <axis>, allocator, mean_objective, mean_sum_rate, runs.
    """
    if axis not in ("K", "L"):
        raise ValueError("axis must be 'K' or 'L'")
    if values is None:
        values = spec.k_values if axis == "K" else spec.l_values
    if not values:
        raise ValueError(f"sweep over {axis} needs at least one value")
    draws = draws or spec.config.harness.sweep_draws
    solver: SolverConfig = spec.config.solver

    rows = []
    for value in values:
        for allocator in spec.allocators:
            objectives, rates = [], []
            for seed in spec.seeds:
                scenario = _sweep_scenario(spec.config, seed, axis, value)
                for tau in range(1, draws + 1):
                    channels = sample_channels(scenario, seed, tau)
                    try:
                        report = allocate(allocator, channels, scenario, solver, seed=seed)
                        objectives.append(report.objective)
                        rates.append(report.sum_rate)
                    except InfeasibleScheduleError:
                        objectives.append(0.0)
                        rates.append(0.0)
            rows.append({
                axis: int(value),
                'allocator': allocator,
                'mean_objective': float(np.mean(objectives)) if objectives else math.nan,
                'mean_sum_rate': float(np.mean(rates)) if rates else math.nan,
                'runs': len(objectives),
            })
        log.info(f"sweep {axis}={value} done")
    return pd.DataFrame(rows, columns=[axis] + SWEEP_COLUMNS)


# =============================================================================
# PLOT DATA
# =============================================================================

def _long_frames(bundle: ResultBundle) -> Tuple[pd.DataFrame, pd.DataFrame, pd.DataFrame]:
    loss_rows, acc_rows, sel_rows = [], [], []
    for run in bundle.runs:
        if not run.success or run.frame.empty:
            continue
        base = {'run_key': run.key, 'allocator': run.allocator, 'K': run.K, 'seed': run.seed}
        frame = run.frame
        clients = sorted(int(c.split('_')[1]) for c in frame.columns if c.startswith('zeta_'))
        for _, row in frame.iterrows():
            rnd = int(row['round'])
            loss_rows.append({**base, 'round': rnd, 'loss': row['loss']})
            acc_rows.append({**base, 'round': rnd, 'accuracy': row['accuracy']})
            if rnd == 0:
                continue
            for m in clients:
                sel_rows.append({**base, 'round': rnd, 'client': m,
                                 'zeta': int(row[f'zeta_{m}']), 'iterations': int(row[f'iter_{m}'])})
    return (
        pd.DataFrame(loss_rows, columns=LOSS_COLUMNS),
        pd.DataFrame(acc_rows, columns=ACCURACY_COLUMNS),
        pd.DataFrame(sel_rows, columns=SELECTION_COLUMNS),
    )


def emit_plot_data(bundle: ResultBundle, out_dir: str) -> List[str]:
    """
    Write the figure data files (UTF-8, LF, header row).

    loss_vs_round.csv      run_key, allocator, K, seed, round, loss
    accuracy_vs_round.csv  run_key, allocator, K, seed, round, accuracy
    objective_vs_K.csv     K, allocator, mean_objective, mean_sum_rate, runs
    objective_vs_L.csv     L, allocator, mean_objective, mean_sum_rate, runs
    selection_map.csv      run_key, allocator, K, seed, round, client, zeta, iterations

    Missing data gives header-only files.

    Raises:
        OutputError: ``out_dir`` cannot be created or written.
    """
    if not is_writable_dir(out_dir):
        raise OutputError(f"cannot write plot data to {out_dir}")
    loss, accuracy, selection = _long_frames(bundle)
    outputs = {
        'loss_vs_round.csv': loss,
        'accuracy_vs_round.csv': accuracy,
        'objective_vs_K.csv': bundle.sweeps.get('K', pd.DataFrame(columns=['K'] + SWEEP_COLUMNS)),
        'objective_vs_L.csv': bundle.sweeps.get('L', pd.DataFrame(columns=['L'] + SWEEP_COLUMNS)),
        'selection_map.csv': selection,
    }
    paths = []
    for name, frame in outputs.items():
        path = os.path.join(out_dir, name)
        _write_csv(frame, path)
        paths.append(path)
    log.info(f"plot data written to {out_dir}")
    return paths


# =============================================================================
# VERIFICATION SUITES
# =============================================================================

def verify_oracle(config: ExperimentConfig, instances: int = 100, seed: int = 0) -> pd.DataFrame:
    """
    Dual solver vs brute force on small random instances (M <= 4, K <= 3, L <= 3).

    Returns:
        One row per instance: M, K, L, solver, oracle, matched, within.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x0AC1]))
    rows = []
    for i in range(instances):
        M, K, L = int(rng.integers(1, 5)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
        cfg = config.replace(geometry=replace(config.geometry, num_clients=M))
        scenario = build_scenario(cfg, seed * 1000 + i).with_subchannels(K).with_rates(modulation_rates(L))
        channels = sample_channels(scenario, seed * 1000 + i, 1)
        with temporary_log_level('WARNING', 'allocator'):
            try:
                oracle = brute_force_reference(channels, scenario, cfg.solver).objective
            except OracleGuardError:
                continue
            try:
                value = solve(channels, scenario, cfg.solver).objective
            except InfeasibleScheduleError:
                value = 0.0
        tol = 1e-9 * max(1.0, abs(oracle))
        rows.append({'M': M, 'K': K, 'L': L, 'solver': value, 'oracle': oracle,
                     'matched': abs(value - oracle) <= tol, 'within': value <= oracle + tol})
    return pd.DataFrame(rows, columns=['M', 'K', 'L', 'solver', 'oracle', 'matched', 'within'])


def verify_bound(config: ExperimentConfig, rounds: int = 100, replicas: int = 20, seed: int = 0) -> pd.DataFrame:
    """Mean gap vs bound on a full-participation quadratic task: A = 2, eta = 1/L_c, no clipping."""
    training = config.training
    task = synth_task("quadratic", dim=training.synthetic_dim, conditioning=training.conditioning,
                      seed=seed, num_clients=config.geometry.num_clients,
                      batch_size=max(training.batch_size, 64))
    A = 2
    schedule = RoundSchedule.full_participation(task.dataset_sizes, A)
    consts = estimate_constants(task, seed=seed)
    task = task.with_hyperparameters(learning_rate=1.0 / consts.L_c)
    gaps = replicate_gaps(task, schedule, rounds, range(seed, seed + replicas))
    return gap_vs_bound(gaps, consts, schedule, task.learning_rate).table
