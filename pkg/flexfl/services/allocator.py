"""
FLEXFL - Allocator Service
==========================
Per-round joint selection of clients, subchannels and modulations.

- Net reward of every (client, subchannel, mode) under the current dual prices
- Winner-takes-all per subchannel, ties broken by lowest client then lowest mode
- Projected subgradient updates of the power and rate-window multipliers
- Best-feasible primal recovery with a repair step and a single-move polish
- Dual-bounded branch and bound over subchannels to close the remaining gap
- Baselines: two modulations, random clients, Sync-FL (fixed A iterations)
- Brute-force enumeration oracle for certification on small instances

Usage:
    from flexfl.services.allocator import solve
    report = solve(channels, scenario)
    print(report.objective, report.assignment.zeta)
"""

import itertools
import json
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from flexfl.config import SOLVER, SolverConfig
from flexfl.logger import get_logger
from flexfl.services.phy import (
    ChannelRealization,
    Scenario,
    ScheduleError,
    iterations_from_budget,
    power_table,
    rate_window,
    sync_rate_floor,
)

log = get_logger('allocator')

REL_TOL = 1e-12
BOUND_SLACK = 1e-9
TWO_MODULATION_RATES: Tuple[float, ...] = (0.0, 4.0)


class InfeasibleScheduleError(RuntimeError):
    """No feasible selection found; ``certificate`` lists the last violations."""

    def __init__(self, message: str, certificate: Optional[List[str]] = None):
        super().__init__(message)
        self.certificate = list(certificate or [])


class OracleGuardError(ValueError):
    """Brute-force enumeration larger than the configured guard."""


# =============================================================================
# DOMAIN TYPES
# =============================================================================

@dataclass(frozen=True)
class Assignment:
    """
    Selection of one round.

    Stored per subchannel (``winners[k]`` is the client or -1 when idle,
    ``modes[k]`` the modulation index), which makes the one-client-per-
    subchannel rule hold by construction. ``lam`` expands it to the binary
    M x K x (L+1) tensor.
    """
    winners: np.ndarray
    modes: np.ndarray
    num_clients: int
    num_modes: int
    rates: np.ndarray        # R_m^UL, bits/s
    powers: np.ndarray       # P_m, W
    iterations: np.ndarray   # I_m, 0 when unselected

    @property
    def lam(self) -> np.ndarray:
        K = len(self.winners)
        lam = np.zeros((self.num_clients, K, self.num_modes), dtype=np.int8)
        active = np.flatnonzero(self.winners >= 0)
        lam[self.winners[active], active, self.modes[active]] = 1
        return lam

    @property
    def zeta(self) -> np.ndarray:
        zeta = np.zeros(self.num_clients, dtype=bool)
        zeta[self.winners[self.winners >= 0]] = True
        return zeta

    @property
    def selected(self) -> np.ndarray:
        return np.flatnonzero(self.zeta)

    @property
    def num_selected(self) -> int:
        return int(self.zeta.sum())

    def to_dict(self) -> dict:
        return {
            'winners': self.winners.tolist(),
            'modes': self.modes.tolist(),
            'zeta': self.zeta.astype(int).tolist(),
            'rates': self.rates.tolist(),
            'powers': self.powers.tolist(),
            'iterations': self.iterations.tolist(),
        }


@dataclass(frozen=True)
class DualState:
    """Nonnegative multipliers per client and the step-size state."""
    xi: np.ndarray      # power budget
    nu: np.ndarray      # lower rate bound
    iota: np.ndarray    # upper rate bound
    step: float = 0.01
    iteration: int = 0

    def __post_init__(self):
        for name in ('xi', 'nu', 'iota'):
            values = np.asarray(getattr(self, name), dtype=float)
            if np.any(values < 0):
                raise ValueError(f"dual multipliers '{name}' must be nonnegative")
            object.__setattr__(self, name, values)
        if self.step <= 0:
            raise ValueError("step must be positive")

    @classmethod
    def initial(cls, num_clients: int, value: float = 0.1, step: float = 0.01) -> "DualState":
        fill = np.full(num_clients, float(value))
        return cls(xi=fill.copy(), nu=fill.copy(), iota=fill.copy(), step=step)

    @classmethod
    def zeros(cls, num_clients: int, step: float = 0.01) -> "DualState":
        return cls.initial(num_clients, value=0.0, step=step)


@dataclass(frozen=True)
class AllocatorReport:
    """Outcome of one allocation."""
    assignment: Assignment
    objective: float                     # sum_m R_m D_m^2 / (beta_m D^2)
    lagrangian_trace: Tuple[float, ...] = ()
    converged: bool = True
    iterations_used: int = 0
    kind: str = "optimal"
    selection_score: float = 0.0         # sum_m D_m^2 zeta_m / D^2

    @property
    def sum_rate(self) -> float:
        return float(self.assignment.rates.sum())

    def to_record(self, round_index: int) -> Dict[str, object]:
        """Flat record, one per round, for CSV/JSON-lines output."""
        record: Dict[str, object] = {
            'round': int(round_index),
            'kind': self.kind,
            'objective': self.objective,
            'sum_rate': self.sum_rate,
            'selection_score': self.selection_score,
            'iterations_used': self.iterations_used,
            'converged': self.converged,
        }
        a = self.assignment
        for m in range(a.num_clients):
            record[f'zeta_{m}'] = int(a.zeta[m])
            record[f'rate_{m}'] = float(a.rates[m])
            record[f'power_{m}'] = float(a.powers[m])
            record[f'iter_{m}'] = int(a.iterations[m])
        return record

    def to_json_line(self, round_index: int) -> str:
        return json.dumps(self.to_record(round_index), sort_keys=False)


# =============================================================================
# SELECTION PROBLEM
# =============================================================================

class SelectionProblem:
    """
    Precomputed view of one (channels, scenario) instance.

    Solver units: rates in bits/symbol, weights divided by their maximum,
    per-client power divided by its budget. The symbol rate B_w/K is common
    to every term, so argmax decisions are unchanged; objectives are
    reported back in bits/s.

    Args:
        channels: Round gains.
        scenario: Scenario.
        solver: Solver settings (rate-window mode, step schedule).
        objective: 'weighted' (weighted sum rate) or 'sync' (Sync-FL selection score).
        candidates: Optional boolean mask of clients allowed to transmit.
    """

    def __init__(
        self,
        channels: ChannelRealization,
        scenario: Scenario,
        solver: SolverConfig = SOLVER,
        objective: str = "weighted",
        candidates: Optional[np.ndarray] = None,
    ):
        if objective not in ("weighted", "sync"):
            raise ValueError(f"unknown objective '{objective}'")
        M, K = channels.shape
        if M != scenario.num_clients or K != scenario.num_subchannels:
            raise ValueError(
                f"channel shape {channels.shape} does not match scenario "
                f"({scenario.num_clients}, {scenario.num_subchannels})"
            )
        self.channels = channels
        self.scenario = scenario
        self.solver = solver
        self.objective_kind = objective
        self.M, self.K = M, K
        self.num_modes = len(scenario.scheme.rates)
        self.rates = scenario.rates
        self.symbol_rate = scenario.symbol_rate
        self.pmax = scenario.power_budgets
        self.weights = scenario.weights
        self.share = scenario.dataset_sizes ** 2 / scenario.total_data ** 2

        self.ptable = power_table(channels, scenario)
        self.pnorm = self.ptable / self.pmax[:, None, None]

        lo, hi = rate_window(scenario)
        if objective == "sync":
            lower = sync_rate_floor(scenario)
            upper = np.full(M, np.inf)
        else:
            lower = lo
            upper = hi if solver.rate_window == "strict" else np.full(M, np.inf)
        self.lower_bps = lower
        self.upper_bps = upper
        self.lower = lower / self.symbol_rate
        self.upper = upper / self.symbol_rate
        self.schedulable = np.isfinite(self.lower)

        cand = np.ones(M, dtype=bool) if candidates is None else np.asarray(candidates, dtype=bool)
        if cand.shape != (M,):
            raise ValueError("candidates must be a boolean mask over clients")
        self.candidates = cand & self.schedulable

        # a positive mode is usable when its single-subchannel power fits the budget
        allowed = np.isfinite(self.ptable) & (self.pnorm <= 1.0 + REL_TOL)
        allowed &= self.candidates[:, None, None]
        allowed[:, :, 0] = True
        self.allowed = allowed

        if objective == "sync":
            share_norm = self.share / self.share.max()
            with np.errstate(divide='ignore'):
                coeff = np.where(self.schedulable, share_norm / np.where(self.lower > 0, self.lower, 1.0), 0.0)
            self.coeff = coeff
        else:
            self.coeff = self.weights / self.weights.max()

    # -- rewards & winners ------------------------------------------------------

    def rewards(self, duals: DualState) -> np.ndarray:
        """Net reward table M x K x (L+1); excluded modes are -inf."""
        gain = self.coeff + duals.nu - duals.iota
        table = -duals.xi[:, None, None] * self.pnorm + gain[:, None, None] * self.rates[None, None, :]
        table = np.where(self.allowed, table, -np.inf)
        table[:, :, 0] = 0.0
        return table

    def winners(self, rewards: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """
        Per-subchannel argmax over (client, mode).

        The flattened order is client-major, so ``argmax`` returning the
        first maximum gives the lowest client index, then the lowest mode.
        """
        flat = rewards.transpose(1, 0, 2).reshape(self.K, self.M * self.num_modes)
        idx = flat.argmax(axis=1)
        best = flat[np.arange(self.K), idx]
        winners = (idx // self.num_modes).astype(int)
        modes = (idx % self.num_modes).astype(int)
        idle = (modes == 0) | (best <= 0)
        winners[idle] = -1
        modes[idle] = 0
        return winners, modes, np.maximum(best, 0.0)

    # -- evaluation -------------------------------------------------------------

    def evaluate(self, winners: np.ndarray, modes: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Per-client bits/symbol and transmit power (W)."""
        active = np.flatnonzero(winners >= 0)
        clients = winners[active]
        bps = np.bincount(clients, weights=self.rates[modes[active]], minlength=self.M)
        power = np.bincount(clients, weights=self.ptable[clients, active, modes[active]], minlength=self.M)
        return bps, power

    def violations(self, winners: np.ndarray, modes: np.ndarray) -> List[str]:
        """Human-readable list of broken constraints (empty when feasible)."""
        problems: List[str] = []
        active = winners >= 0
        if np.any(modes[active] == 0) or np.any(modes[~active] != 0):
            problems.append("selection with mode 0 on an assigned subchannel")
        if np.any(active) and not np.all(self.allowed[winners[active], np.flatnonzero(active), modes[active]]):
            problems.append("excluded mode selected (deep fade, budget or candidate mask)")
        bps, power = self.evaluate(winners, modes)
        selected = bps > 0
        for m in np.flatnonzero(power > self.pmax * (1 + REL_TOL)):
            problems.append(f"client {m}: power {power[m]:.4g} W exceeds budget {self.pmax[m]:.4g} W")
        for m in np.flatnonzero(selected & (bps < self.lower * (1 - REL_TOL))):
            problems.append(
                f"client {m}: rate {bps[m] * self.symbol_rate:.4g} b/s below floor "
                f"{self.lower_bps[m]:.4g} b/s"
            )
        for m in np.flatnonzero(selected & (bps > self.upper * (1 + REL_TOL))):
            problems.append(
                f"client {m}: rate {bps[m] * self.symbol_rate:.4g} b/s above cap "
                f"{self.upper_bps[m]:.4g} b/s"
            )
        return problems

    def is_feasible(self, winners: np.ndarray, modes: np.ndarray) -> bool:
        bps, power = self.evaluate(winners, modes)
        selected = bps > 0
        return not (
            np.any(power > self.pmax * (1 + REL_TOL))
            or np.any(selected & (bps < self.lower * (1 - REL_TOL)))
            or np.any(selected & (bps > self.upper * (1 + REL_TOL)))
        )

    def weighted_objective(self, bps: np.ndarray) -> float:
        return float(np.sum(self.weights * bps * self.symbol_rate))

    def score(self, winners: np.ndarray, modes: np.ndarray) -> Tuple[float, float]:
        """(primary, secondary) objective; secondary breaks Sync-FL plateaus."""
        bps, _ = self.evaluate(winners, modes)
        weighted = self.weighted_objective(bps)
        if self.objective_kind == "sync":
            return float(np.sum(self.share[bps > 0])), weighted
        return weighted, 0.0

    # -- primal recovery -------------------------------------------------------

    def repair(self, winners: np.ndarray, modes: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """
        Turn a dual iterate's winners into a feasible selection.

        Power: repeatedly step down the mode with the largest power saved per
        bit lost. Strict cap: step down the most power-hungry mode. Floor:
        release every subchannel of a client still below it.
        """
        w, md = winners.copy(), modes.copy()
        bps, power = self.evaluate(w, md)

        for m in np.flatnonzero(power > self.pmax * (1 + REL_TOL)):
            while power[m] > self.pmax[m] * (1 + REL_TOL):
                ks = np.flatnonzero((w == m) & (md > 0))
                l = md[ks]
                saved = self.ptable[m, ks, l] - self.ptable[m, ks, l - 1]
                lost = self.rates[l] - self.rates[l - 1]
                k = ks[int(np.argmax(saved / lost))]
                md[k] -= 1
                if md[k] == 0:
                    w[k] = -1
                bps, power = self.evaluate(w, md)

        for m in np.flatnonzero(bps > self.upper * (1 + REL_TOL)):
            while bps[m] > self.upper[m] * (1 + REL_TOL):
                ks = np.flatnonzero((w == m) & (md > 0))
                k = ks[int(np.argmax(self.ptable[m, ks, md[ks]]))]
                md[k] -= 1
                if md[k] == 0:
                    w[k] = -1
                bps, power = self.evaluate(w, md)

        for m in np.flatnonzero((bps > 0) & (bps < self.lower * (1 - REL_TOL))):
            released = w == m
            w[released] = -1
            md[released] = 0

        return w, md

    def options(self, k: int) -> List[Tuple[int, int]]:
        """Every admissible (client, mode) on subchannel k, idle first."""
        opts = [(-1, 0)]
        for m in range(self.M):
            for l in range(1, self.num_modes):
                if self.allowed[m, k, l]:
                    opts.append((m, l))
        return opts

    def polish(self, winners: np.ndarray, modes: np.ndarray, max_passes: int = 50) -> Tuple[np.ndarray, np.ndarray]:
        """Single-subchannel local search: accept any feasible strict improvement."""
        w, md = winners.copy(), modes.copy()
        current = self.score(w, md)
        all_options = [self.options(k) for k in range(self.K)]
        for _ in range(max_passes):
            improved = False
            for k in range(self.K):
                for m, l in all_options[k]:
                    if m == w[k] and l == md[k]:
                        continue
                    old = (w[k], md[k])
                    w[k], md[k] = m, l
                    if self.is_feasible(w, md):
                        candidate = self.score(w, md)
                        if _better(candidate, current):
                            current = candidate
                            improved = True
                            continue
                    w[k], md[k] = old
            if not improved:
                break
        return w, md

    def search(
        self,
        winners: np.ndarray,
        modes: np.ndarray,
        xi: np.ndarray,
        max_nodes: int,
    ) -> Tuple[np.ndarray, np.ndarray, bool]:
        """
        Depth-first branch and bound over subchannels from a feasible incumbent.

        A partial assignment is cut when no completion can beat the incumbent
        under the tighter of two bounds: the best remaining value of every
        open subchannel, or the relaxation of the power budgets at prices
        ``xi``. For the Sync-FL objective the primary bound is the data share
        of every client still reachable. Leaves are judged with
        ``is_feasible`` and ``score``, the same test the brute-force
        reference applies.

        Returns:
            (winners, modes, certified); certified is False when the node
            budget ran out before the tree was exhausted.
        """
        best_w, best_m = winners.copy(), modes.copy()
        best = self.score(best_w, best_m) if self.is_feasible(best_w, best_m) else (-math.inf, -math.inf)
        if max_nodes <= 0:
            return best_w, best_m, False

        prices = float(self.weights.max() * self.symbol_rate) * np.maximum(np.asarray(xi, dtype=float), 0.0)
        value = np.broadcast_to(self.weights[:, None, None] * self.rates[None, None, :] * self.symbol_rate,
                                (self.M, self.K, self.rates.shape[0]))

        choices: List[List[Tuple[int, int]]] = []
        free_tail = np.zeros(self.K + 1)
        relaxed_tail = np.zeros(self.K + 1)
        reach = np.zeros((self.K + 1, self.M), dtype=bool)
        for k in range(self.K):
            opts = self.options(k)
            relaxed = {o: (value[o[0], k, o[1]] - prices[o[0]] * self.pnorm[o[0], k, o[1]]) if o[0] >= 0 else 0.0
                       for o in opts}
            choices.append(sorted(opts, key=lambda o: -relaxed[o]))
            free_tail[k] = max([0.0] + [value[m, k, l] for m, l in opts if m >= 0])
            relaxed_tail[k] = max(relaxed.values())
            reach[k] = self.allowed[:, k, 1:].any(axis=1)
        free_tail = np.cumsum(free_tail[::-1])[::-1]
        relaxed_tail = np.cumsum(relaxed_tail[::-1])[::-1]
        reach = np.logical_or.accumulate(reach[::-1], axis=0)[::-1]

        w, md = self.idle()
        power = np.zeros(self.M)
        bps = np.zeros(self.M)
        cap_power = self.pmax * (1 + REL_TOL)
        cap_bps = self.upper * (1 + REL_TOL)
        nodes = 0
        exhausted = False

        def bound(depth: int, gain: float) -> Tuple[float, float]:
            slack_left = float(np.sum(prices * np.maximum(0.0, 1.0 - power / self.pmax)))
            weighted = min(gain + free_tail[depth], gain + relaxed_tail[depth] + slack_left)
            weighted += BOUND_SLACK * max(1.0, abs(weighted))
            if self.objective_kind == "sync":
                share = float(np.sum(self.share[(bps > 0) | reach[depth]]))
                return share + BOUND_SLACK, weighted
            return weighted, 0.0

        def descend(depth: int, gain: float) -> None:
            nonlocal best, best_w, best_m, nodes, exhausted
            if nodes >= max_nodes:
                exhausted = True
                return
            nodes += 1
            if depth == self.K:
                if self.is_feasible(w, md):
                    candidate = self.score(w, md)
                    if _better(candidate, best):
                        best, best_w, best_m = candidate, w.copy(), md.copy()
                return
            if not _better(bound(depth, gain), best):
                return
            for m, l in choices[depth]:
                if m < 0:
                    descend(depth + 1, gain)
                else:
                    p, r = self.ptable[m, depth, l], self.rates[l]
                    if power[m] + p > cap_power[m] or bps[m] + r > cap_bps[m]:
                        continue
                    w[depth], md[depth] = m, l
                    power[m] += p
                    bps[m] += r
                    descend(depth + 1, gain + value[m, depth, l])
                    power[m] -= p
                    bps[m] -= r
                    w[depth], md[depth] = -1, 0
                if exhausted:
                    return

        descend(0, 0.0)
        log.debug(f"search: {nodes} nodes, exhausted={exhausted}, best={best[0]:.6g}")
        return best_w, best_m, not exhausted

    # -- dual machinery --------------------------------------------------------

    def dual_step(self, duals: DualState, winners: np.ndarray, modes: np.ndarray) -> DualState:
        bps, power = self.evaluate(winners, modes)
        return _dual_step(duals, bps, power / self.pmax, bps > 0, self.lower, self.upper,
                          self.solver.step_schedule)

    def lagrangian(self, duals: DualState, best: np.ndarray, winners: np.ndarray) -> float:
        """Lagrangian at the current (winners, duals) in solver units."""
        selected = np.zeros(self.M, dtype=bool)
        selected[winners[winners >= 0]] = True
        lower = np.where(np.isfinite(self.lower), self.lower, 0.0)
        upper = np.where(np.isfinite(self.upper), self.upper, 0.0)
        return float(
            best.sum() + duals.xi.sum()
            - np.sum(duals.nu[selected] * lower[selected])
            + np.sum(duals.iota[selected] * upper[selected])
        )

    # -- assembly ---------------------------------------------------------------

    def assignment(self, winners: np.ndarray, modes: np.ndarray, sync: bool = False) -> Assignment:
        bps, power = self.evaluate(winners, modes)
        rates = bps * self.symbol_rate
        iterations = np.zeros(self.M, dtype=int)
        A = self.scenario.timing.max_local_iterations
        for m in np.flatnonzero(bps > 0):
            if sync:
                iterations[m] = A
                continue
            try:
                iterations[m] = iterations_from_budget(
                    self.scenario.model_bits / rates[m], self.scenario.clients[m], self.scenario.timing
                )
            except ScheduleError:
                iterations[m] = 0
        return Assignment(
            winners=winners.copy(),
            modes=modes.copy(),
            num_clients=self.M,
            num_modes=self.num_modes,
            rates=rates,
            powers=power,
            iterations=iterations,
        )

    def report(
        self,
        winners: np.ndarray,
        modes: np.ndarray,
        kind: str,
        trace: Sequence[float] = (),
        converged: bool = True,
        iterations_used: int = 0,
    ) -> AllocatorReport:
        assignment = self.assignment(winners, modes, sync=self.objective_kind == "sync")
        bps = assignment.rates / self.symbol_rate
        return AllocatorReport(
            assignment=assignment,
            objective=self.weighted_objective(bps),
            lagrangian_trace=tuple(trace),
            converged=converged,
            iterations_used=iterations_used,
            kind=kind,
            selection_score=float(np.sum(self.share[assignment.zeta])),
        )

    def idle(self) -> Tuple[np.ndarray, np.ndarray]:
        return np.full(self.K, -1, dtype=int), np.zeros(self.K, dtype=int)


def _better(a: Tuple[float, float], b: Tuple[float, float]) -> bool:
    if not math.isfinite(b[0]):
        return a[0] > b[0]
    tol = REL_TOL * max(1.0, abs(b[0]))
    if a[0] > b[0] + tol:
        return True
    if a[0] < b[0] - tol:
        return False
    return a[1] > b[1] + REL_TOL * max(1.0, abs(b[1]))


def _dual_step(
    duals: DualState,
    bps: np.ndarray,
    power_norm: np.ndarray,
    selected: np.ndarray,
    lower: np.ndarray,
    upper: np.ndarray,
    schedule: str,
) -> DualState:
    step = duals.step if schedule == "constant" else duals.step / math.sqrt(duals.iteration + 1)
    xi = np.maximum(0.0, duals.xi + step * (power_norm - 1.0))
    # window multipliers move only for selected clients
    nu = duals.nu.copy()
    finite_lo = selected & np.isfinite(lower)
    nu[finite_lo] = np.maximum(0.0, nu[finite_lo] + step * (lower[finite_lo] - bps[finite_lo]))
    iota = np.where(np.isfinite(upper), duals.iota, 0.0)
    finite_hi = selected & np.isfinite(upper)
    iota[finite_hi] = np.maximum(0.0, iota[finite_hi] + step * (bps[finite_hi] - upper[finite_hi]))
    return DualState(xi=xi, nu=nu, iota=iota, step=duals.step, iteration=duals.iteration + 1)


# =============================================================================
# PUBLIC OPERATIONS
# =============================================================================

def net_reward(
    m: int,
    k: int,
    l: int,
    duals: DualState,
    channels: ChannelRealization,
    scenario: Scenario,
    solver: SolverConfig = SOLVER,
) -> float:
    """
    Net reward of giving subchannel k to client m with mode l.

    In solver units: -xi_m p/P_m^max + (w_m/max w + nu_m - iota_m) r_l.
    Mode 0 is worth 0; modes that cannot fit the power budget are -inf.
    """
    return float(SelectionProblem(channels, scenario, solver).rewards(duals)[m, k, l])


def select_winners(
    duals: DualState,
    channels: ChannelRealization,
    scenario: Scenario,
    solver: SolverConfig = SOLVER,
    candidates: Optional[np.ndarray] = None,
) -> Assignment:
    """Winner-takes-all selection for the given dual prices."""
    problem = SelectionProblem(channels, scenario, solver, candidates=candidates)
    winners, modes, _ = problem.winners(problem.rewards(duals))
    return problem.assignment(winners, modes)


def dual_update(
    duals: DualState,
    assignment: Assignment,
    scenario: Scenario,
    solver: SolverConfig = SOLVER,
) -> DualState:
    """
    One projected subgradient step.

    xi_m <- [xi_m + eps (P_m/P_m^max - 1)]+; for selected clients
    nu_m <- [nu_m + eps (lo_m - R_m)]+ and iota_m <- [iota_m + eps (R_m - hi_m)]+
    (rates in bits/symbol). Unselected clients keep nu and iota.
    """
    lo, hi = rate_window(scenario)
    upper = hi if solver.rate_window == "strict" else np.full(scenario.num_clients, np.inf)
    s = scenario.symbol_rate
    bps = assignment.rates / s
    return _dual_step(
        duals, bps, assignment.powers / scenario.power_budgets, assignment.zeta,
        lo / s, upper / s, solver.step_schedule,
    )


def _dual_ascent(problem: SelectionProblem, solver: SolverConfig):
    """
    Alternate winner selection and dual steps, tracking the best feasible primal.

    Returns:
        (winners, modes, trace, converged, iterations_used, last_certificate)
    """
    duals = DualState.initial(problem.M, solver.initial_dual, solver.step_size)
    best_w, best_m = problem.idle()
    best_score = (-math.inf, -math.inf)
    seen: Dict[bytes, bool] = {}
    trace: List[float] = []
    certificate: List[str] = []
    converged = False
    previous = None
    used = 0
    prices, lowest = duals.xi.copy(), math.inf

    for used in range(1, solver.max_iterations + 1):
        winners, modes, best = problem.winners(problem.rewards(duals))
        value = problem.lagrangian(duals, best, winners)
        trace.append(value)
        if value < lowest:
            prices, lowest = duals.xi.copy(), value

        key = winners.tobytes() + modes.tobytes()
        if key not in seen:
            seen[key] = True
            problems = problem.violations(winners, modes)
            if problems:
                certificate = problems
                winners_f, modes_f = problem.repair(winners, modes)
            else:
                winners_f, modes_f = winners, modes
            if problem.is_feasible(winners_f, modes_f):
                candidate = problem.score(winners_f, modes_f)
                if _better(candidate, best_score):
                    best_score = candidate
                    best_w, best_m = winners_f.copy(), modes_f.copy()

        duals = problem.dual_step(duals, winners, modes)

        if previous is not None and abs(value - previous) <= solver.tolerance * max(1.0, abs(value)):
            converged = True
            break
        previous = value

    if solver.polish:
        best_w, best_m = problem.polish(best_w, best_m)
    if solver.search_nodes > 0:
        best_w, best_m, certified = problem.search(best_w, best_m, prices, solver.search_nodes)
        if not certified:
            log.debug(f"search stopped at {solver.search_nodes} nodes; keeping the best selection found")

    return best_w, best_m, trace, converged, used, certificate


def solve(
    channels: ChannelRealization,
    scenario: Scenario,
    solver: SolverConfig = SOLVER,
    candidates: Optional[np.ndarray] = None,
    kind: str = "optimal",
) -> AllocatorReport:
    """
    Dual winner-takes-all allocation maximizing the weighted sum rate.

    Args:
        channels: Round gains.
        scenario: Scenario.
        solver: Step size, tolerance, iteration cap, rate-window mode.
        candidates: Optional client mask (random-client baseline).
        kind: Label stored in the report.

    Returns:
        AllocatorReport with the best feasible selection seen.

    Raises:
        InfeasibleScheduleError: No client could be feasibly selected.
    """
    problem = SelectionProblem(channels, scenario, solver, candidates=candidates)
    winners, modes, trace, converged, used, certificate = _dual_ascent(problem, solver)
    if not np.any(winners >= 0):
        if not certificate:
            certificate = ["no client can transmit on any subchannel within its budget"]
        raise InfeasibleScheduleError(
            f"no feasible selection after {used} dual iterations", certificate
        )
    report = problem.report(winners, modes, kind, trace, converged, used)
    log.debug(
        f"{kind}: objective={report.objective:.4g} selected={report.assignment.num_selected} "
        f"iters={used} converged={converged}"
    )
    return report


def sync_fl_allocate(
    channels: ChannelRealization,
    scenario: Scenario,
    solver: SolverConfig = SOLVER,
) -> AllocatorReport:
    """
    Sync-FL allocation: every selected client runs exactly A iterations.

    Maximizes sum_m D_m^2 zeta_m / D^2 subject to the upload finishing by
    T_th - T^DL - A mu / beta_m. Returns an all-idle report (sum rate 0)
    when no client can meet that deadline.
    """
    problem = SelectionProblem(channels, scenario, solver, objective="sync")
    if not np.any(problem.candidates):
        log.info("sync-fl: no client can finish A iterations in the round; all idle")
        winners, modes = problem.idle()
        return problem.report(winners, modes, "baseline3", converged=True, iterations_used=0)
    winners, modes, trace, converged, used, _ = _dual_ascent(problem, solver)
    return problem.report(winners, modes, "baseline3", trace, converged, used)


def random_client_subset(num_clients: int, seed: int, round_index: int) -> np.ndarray:
    """Each client joins with probability 1/2; redrawn until nonempty."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(round_index), 0xB2]))
    while True:
        mask = rng.random(num_clients) < 0.5
        if mask.any():
            return mask


def baseline_allocators(
    kind: str,
    channels: ChannelRealization,
    scenario: Scenario,
    solver: SolverConfig = SOLVER,
    seed: int = 0,
    round_index: Optional[int] = None,
    subset: Optional[Sequence[int]] = None,
) -> AllocatorReport:
    """
    Baseline allocations.

    Args:
        kind: 'two_modulation' (rates {0, 4}) or 'random_client'.
        channels: Round gains.
        scenario: Scenario.
        solver: Solver settings.
        seed: Seed of the random client draw.
        round_index: Round of the draw (defaults to the channel round).
        subset: Explicit client indices, bypassing the random draw.
    """
    if kind == "two_modulation":
        return solve(channels, scenario.with_rates(TWO_MODULATION_RATES), solver, kind="baseline1")
    if kind == "random_client":
        if subset is not None:
            mask = np.zeros(scenario.num_clients, dtype=bool)
            mask[list(subset)] = True
        else:
            rnd = channels.round_index if round_index is None else round_index
            mask = random_client_subset(scenario.num_clients, seed, rnd)
        return solve(channels, scenario, solver, candidates=mask, kind="baseline2")
    raise ValueError(f"unknown baseline kind '{kind}'")


def allocate(
    kind: str,
    channels: ChannelRealization,
    scenario: Scenario,
    solver: SolverConfig = SOLVER,
    seed: int = 0,
    round_index: Optional[int] = None,
) -> AllocatorReport:
    """Dispatch on the harness allocator names."""
    if kind == "optimal":
        return solve(channels, scenario, solver)
    if kind == "baseline1":
        return baseline_allocators("two_modulation", channels, scenario, solver)
    if kind == "baseline2":
        return baseline_allocators("random_client", channels, scenario, solver, seed=seed,
                                   round_index=round_index)
    if kind == "baseline3":
        return sync_fl_allocate(channels, scenario, solver)
    raise ValueError(f"unknown allocator kind '{kind}'")


# =============================================================================
# ORACLE
# =============================================================================

def brute_force_reference(
    channels: ChannelRealization,
    scenario: Scenario,
    solver: SolverConfig = SOLVER,
    objective: str = "weighted",
    candidates: Optional[np.ndarray] = None,
) -> AllocatorReport:
    """
    Exhaustive enumeration of per-subchannel (client, mode) choices.

    Returns the feasible maximizer (first found on ties in enumeration
    order). Exact by construction.

    Raises:
        OracleGuardError: (M (L+1))^K exceeds ``solver.oracle_guard``.
    """
    problem = SelectionProblem(channels, scenario, solver, objective=objective, candidates=candidates)
    size = (problem.M * problem.num_modes) ** problem.K
    if size > solver.oracle_guard:
        raise OracleGuardError(f"oracle guard exceeded: {size} > {solver.oracle_guard} combinations")

    options = [problem.options(k) for k in range(problem.K)]
    best_w, best_m = problem.idle()
    best_score = problem.score(best_w, best_m)
    w = np.empty(problem.K, dtype=int)
    md = np.empty(problem.K, dtype=int)
    count = 0
    for combo in itertools.product(*options):
        count += 1
        for k, (m, l) in enumerate(combo):
            w[k], md[k] = m, l
        if not problem.is_feasible(w, md):
            continue
        candidate = problem.score(w, md)
        if _better(candidate, best_score):
            best_score = candidate
            best_w, best_m = w.copy(), md.copy()

    kind = "oracle" if objective == "weighted" else "oracle_sync"
    return problem.report(best_w, best_m, kind, converged=True, iterations_used=count)
