"""
FLEXFL - Convergence Analysis
=============================
Optimality-gap bound of flexible aggregation and its empirical check.

- phi constants and the closed-form gap bound with its contraction gate
- Iterated one-step recurrence, asymptote and the kappa2 threshold
- Harmonic-arithmetic chain over the participation terms D_m^2 / (D^2 I_m)
- Constant estimation (L_c, rho, kappa1, kappa2, Theta, gamma) on convex tasks
- Measured gap vs bound, per round, averaged over seeded replicas

Usage:
    from flexfl.services.convergence import estimate_constants, phi_constants, gap_bound
    consts = estimate_constants(task)
    phi1, phi2 = phi_constants(schedule, consts, eta=task.learning_rate)
    print(gap_bound(10, phi1, phi2, consts.rho, consts.theta))
"""

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.linalg import eigvalsh
from scipy.stats import linregress

from flexfl.logger import get_logger
from flexfl.services.fl_core import RoundSchedule, TrainingTrace, run_schedule
from flexfl.services.tasks import LogisticLoss, TrainTask

log = get_logger('convergence')

KAPPA_SAFETY = 1.2
ETA_TOL = 1e-12


class NonContractingBoundError(ValueError):
    """phi2 <= 0 (or 2 rho phi2 >= 2): the bound does not contract."""


class OptimumUnavailableError(ValueError):
    """Task without a known optimum or closed-form curvature."""


# =============================================================================
# DOMAIN TYPES
# =============================================================================

@dataclass(frozen=True)
class ConvergenceConstants:
    """Smoothness, PL and stochastic-gradient constants of a task."""
    L_c: float
    rho: float
    kappa1: float
    kappa2: float
    theta: float
    gamma_m: np.ndarray = field(default_factory=lambda: np.zeros(0))
    gamma: float = 0.0

    def __post_init__(self):
        if self.L_c <= 0:
            raise ValueError("L_c must be positive")
        if self.rho <= 0:
            raise ValueError("rho must be positive")
        if self.kappa1 < 0 or self.kappa2 < 0:
            raise ValueError("kappa1 and kappa2 must be >= 0")
        if self.theta < 0:
            raise ValueError("theta must be >= 0")
        object.__setattr__(self, 'gamma_m', np.asarray(self.gamma_m, dtype=float))

    def with_kappas(self, kappa1: Optional[float] = None, kappa2: Optional[float] = None) -> "ConvergenceConstants":
        return replace(
            self,
            kappa1=self.kappa1 if kappa1 is None else kappa1,
            kappa2=self.kappa2 if kappa2 is None else kappa2,
        )


@dataclass(frozen=True)
class ChainLevels:
    """Three levels of the participation chain; ``holds`` means a >= b >= c."""
    arithmetic: float
    harmonic: float
    relaxed: float
    holds: bool
    tight: bool          # arithmetic == harmonic
    equal_terms: bool


@dataclass(frozen=True)
class GapBoundReport:
    """Per-round table with columns round, gap, bound, holds, step_holds."""
    table: pd.DataFrame
    precondition_ok: bool
    note: str = ""

    @property
    def all_hold(self) -> bool:
        return self.precondition_ok and bool(self.table['holds'].all())


# =============================================================================
# BOUND ARITHMETIC
# =============================================================================

def participation_sum(schedule: RoundSchedule) -> float:
    """S = sum_m D_m^2 zeta_m / (D^2 I_m)."""
    return schedule.participation_sum


def phi_constants(
    schedule: RoundSchedule,
    consts: ConvergenceConstants,
    eta: float,
    A: Optional[int] = None,
) -> Tuple[float, float]:
    """
    phi1 = (eta^2 L_c / 2) A^2 kappa1 S and phi2 = eta - (eta^2 L_c / 2) A^2 kappa2 S.
    """
    A = schedule.max_iterations if A is None else A
    scale = 0.5 * eta ** 2 * consts.L_c * A ** 2 * participation_sum(schedule)
    return scale * consts.kappa1, eta - scale * consts.kappa2


def _contraction(phi2: float, rho: float) -> float:
    if phi2 <= 0:
        raise NonContractingBoundError("bound not contracting, check κ₂ condition")
    q = 1.0 - 2.0 * rho * phi2
    if q <= -1.0:
        raise NonContractingBoundError(f"bound not contracting: 1 - 2 rho phi2 = {q:.4g}")
    return q


def gap_bound(tau: int, phi1: float, phi2: float, rho: float, theta: float) -> float:
    """
    (1 - 2 rho phi2)^tau Theta + phi1 (1 - (1 - 2 rho phi2)^tau) / (2 rho phi2).

    Raises:
        NonContractingBoundError: phi2 <= 0.
    """
    q = _contraction(phi2, rho)
    if tau == 0:
        return float(theta)
    decay = q ** tau
    return decay * theta + phi1 * (1.0 - decay) / (2.0 * rho * phi2)


def bound_recurrence(rounds: int, phi1: float, phi2: float, rho: float, theta: float) -> np.ndarray:
    """b_0 = Theta, b_{t+1} = (1 - 2 rho phi2) b_t + phi1, for t < rounds."""
    q = _contraction(phi2, rho)
    out = np.empty(rounds + 1)
    out[0] = theta
    for t in range(rounds):
        out[t + 1] = q * out[t] + phi1
    return out


def asymptotic_bound(phi1: float, phi2: float, rho: float) -> float:
    """phi1 / (2 rho phi2), the limit of the bound."""
    _contraction(phi2, rho)
    return phi1 / (2.0 * rho * phi2)


def kappa2_condition(
    schedule: RoundSchedule,
    eta: float,
    L_c: float,
    kappa2: float = 0.0,
    A: Optional[int] = None,
) -> Tuple[float, bool]:
    """
    Largest kappa2 keeping phi2 > 0: 2 / (eta L_c A^2 S); +inf for an empty schedule.

    Returns:
        (threshold, kappa2 < threshold)
    """
    A = schedule.max_iterations if A is None else A
    S = participation_sum(schedule)
    threshold = math.inf if S == 0 else 2.0 / (eta * L_c * A ** 2 * S)
    return threshold, kappa2 < threshold


def continuous_budgets(compute_speeds: np.ndarray, round_duration: float,
                       downlink_delay: float, flops_per_iteration: float) -> np.ndarray:
    """Unrounded iterations with a zero-delay upload: (T_th - T^DL) beta / mu."""
    return (round_duration - downlink_delay) * np.asarray(compute_speeds, dtype=float) / flops_per_iteration


def inequality_chain(schedule: RoundSchedule, relaxed_iterations: Optional[np.ndarray] = None) -> ChainLevels:
    """
    Arithmetic vs harmonic mean of the participation terms a_m = D_m^2/(D^2 I_m).

    arithmetic = sum a_m >= harmonic = M'^2 / sum(1/a_m) >= relaxed, where
    relaxed repeats the harmonic level with iteration counts at least I_m
    (by default the same counts, so relaxed == harmonic).
    """
    sel = schedule.selected
    count = int(sel.sum())
    if count == 0:
        return ChainLevels(0.0, 0.0, 0.0, True, True, True)
    sizes = schedule.dataset_sizes[sel]
    D2 = schedule.total_data ** 2
    terms = sizes ** 2 / (D2 * schedule.iterations[sel])
    relaxed_its = schedule.iterations[sel] if relaxed_iterations is None else np.asarray(relaxed_iterations, dtype=float)[sel]
    if np.any(relaxed_its < schedule.iterations[sel]):
        raise ValueError("relaxed iteration counts must be >= the scheduled ones")
    relaxed_terms = sizes ** 2 / (D2 * relaxed_its)

    arithmetic = float(terms.sum())
    harmonic = count ** 2 / float(np.sum(1.0 / terms))
    relaxed = count ** 2 / float(np.sum(1.0 / relaxed_terms))
    tol = 1e-12 * max(arithmetic, 1e-300)
    equal_terms = bool(np.all(terms == terms[0]))
    return ChainLevels(
        arithmetic=arithmetic,
        harmonic=harmonic,
        relaxed=relaxed,
        holds=arithmetic >= harmonic - tol and harmonic >= relaxed - tol,
        tight=abs(arithmetic - harmonic) <= tol,
        equal_terms=equal_terms,
    )


# =============================================================================
# CONSTANT ESTIMATION
# =============================================================================

def _curvature(task: TrainTask) -> Tuple[float, float]:
    X, _ = task.store.take(task.partition.all_indices)
    n = X.shape[0]
    eigs = eigvalsh(X.T @ X / n)
    if task.kind == "quadratic":
        return float(eigs[-1]), float(eigs[0])
    if isinstance(task.model, LogisticLoss):
        reg = task.model.regularization
        L_c = float(eigs[-1]) / 4.0 + reg
        if reg > 0:
            return L_c, reg
        X_all, y_all = task.store.take(task.partition.all_indices)
        hess = task.model.hessian(task.optimum, X_all, y_all)
        return L_c, float(eigvalsh(hess)[0])
    raise OptimumUnavailableError(f"no curvature constants for '{task.kind}' tasks")


def estimate_constants(
    task: TrainTask,
    grid_size: int = 8,
    samples: int = 32,
    safety: float = KAPPA_SAFETY,
    seed: int = 0,
) -> ConvergenceConstants:
    """
    Constants of a quadratic or logistic task with a known optimum.

    L_c and rho come from the data spectrum. kappa1/kappa2 regress the
    worst-client mean squared minibatch gradient norm on ||grad F||^2 over
    points between w* and beyond w0 (plus random directions); the intercept
    is raised until every sampled point is covered, then both are inflated
    by ``safety``. gamma_m is the largest ||grad F_m - grad F|| seen.

    Raises:
        OptimumUnavailableError: No optimum, or an MLP task.
    """
    if task.optimum is None:
        raise OptimumUnavailableError("task has no reference optimum; rho and Theta unavailable")
    L_c, rho = _curvature(task)
    w0 = task.initial(seed)
    w_star = np.asarray(task.optimum, dtype=float)
    theta = max(0.0, task.global_loss(w0) - task.global_loss(w_star))

    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xC0A5]))
    radius = max(float(np.linalg.norm(w0 - w_star)), 1.0)
    points = [w_star + t * (w0 - w_star) for t in np.linspace(0.0, 1.5, grid_size)]
    for _ in range(grid_size):
        direction = rng.standard_normal(task.dim)
        points.append(w_star + radius * rng.uniform(0.1, 1.5) * direction / np.linalg.norm(direction))

    xs, ys = [], []
    gamma_m = np.zeros(task.num_clients)
    for w in points:
        full = task.global_grad(w)
        worst = 0.0
        for m in range(task.num_clients):
            sq = [float(np.sum(task.batch_grad(w, task.batch(m, rng)) ** 2)) for _ in range(samples)]
            worst = max(worst, float(np.mean(sq)))
            gamma_m[m] = max(gamma_m[m], float(np.linalg.norm(task.local_grad(w, m) - full)))
        xs.append(float(full @ full))
        ys.append(worst)

    x, y = np.array(xs), np.array(ys)
    fit = linregress(x, y)
    kappa2 = max(float(fit.slope), 0.0)
    kappa1 = max(0.0, float(np.max(y - kappa2 * x)))
    sizes = task.dataset_sizes
    gamma = float(np.sum(sizes * gamma_m) / sizes.sum())

    consts = ConvergenceConstants(
        L_c=L_c, rho=rho,
        kappa1=safety * kappa1, kappa2=safety * kappa2,
        theta=theta, gamma_m=gamma_m, gamma=gamma,
    )
    log.debug(
        f"constants: L_c={L_c:.4g} rho={rho:.4g} kappa1={consts.kappa1:.4g} "
        f"kappa2={consts.kappa2:.4g} theta={theta:.4g} (r^2={fit.rvalue ** 2:.3f})"
    )
    return consts


# =============================================================================
# EMPIRICAL CHECKS
# =============================================================================

def replicate_gaps(
    task: TrainTask,
    schedule: RoundSchedule,
    rounds: int,
    seeds: Sequence[int],
    mode: str = "as_written",
) -> np.ndarray:
    """Mean optimality gap per round over independent minibatch seeds."""
    if task.optimum is None:
        raise OptimumUnavailableError("replica gaps need a known optimum")
    runs = [run_schedule(task, schedule, rounds, seed, mode).gaps for seed in seeds]
    return np.mean(np.vstack(runs), axis=0)


def gap_vs_bound(
    gaps: Union[TrainingTrace, Sequence[float], np.ndarray],
    consts: ConvergenceConstants,
    schedule: RoundSchedule,
    eta: float,
    A: Optional[int] = None,
) -> GapBoundReport:
    """
    Compare measured gaps with the bound, round by round.

    ``step_holds`` checks the one-step recurrence
    gap_{t+1} <= (1 - 2 rho phi2) gap_t + phi1. With eta > 1/L_c no bound is
    claimed: the table carries NaN bounds and ``precondition_ok`` is False.
    """
    values = gaps.gaps if isinstance(gaps, TrainingTrace) else np.asarray(gaps, dtype=float)
    rounds = np.arange(len(values))
    if eta > (1.0 + ETA_TOL) / consts.L_c:
        note = f"eta = {eta:.4g} exceeds 1/L_c = {1.0 / consts.L_c:.4g}; no bound claim"
        log.warning(note)
        table = pd.DataFrame({
            'round': rounds, 'gap': values, 'bound': np.nan, 'holds': False, 'step_holds': False,
        })
        return GapBoundReport(table, precondition_ok=False, note=note)

    phi1, phi2 = phi_constants(schedule, consts, eta, A)
    q = _contraction(phi2, consts.rho)
    bounds = np.array([gap_bound(int(t), phi1, phi2, consts.rho, consts.theta) for t in rounds])
    slack = 1e-12 * np.maximum(1.0, np.abs(bounds))
    holds = values <= bounds + slack
    step = np.ones(len(values), dtype=bool)
    step[1:] = values[1:] <= q * values[:-1] + phi1 + slack[1:]
    table = pd.DataFrame({
        'round': rounds, 'gap': values, 'bound': bounds, 'holds': holds, 'step_holds': step,
    })
    return GapBoundReport(table, precondition_ok=True)
