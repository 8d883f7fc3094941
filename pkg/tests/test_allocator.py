"""
Unit tests for flexfl/services/allocator.py.

Tests cover:
- Net rewards and winner-takes-all selection (tie-break, scaling invariance)
- Projected dual updates
- solve(): assignment invariants, closed-form rate window, infeasibility
- Branch-and-bound search: exactness, node budget, incumbent handling
- Brute-force oracle agreement (weighted, strict window, Sync-FL) and guard
- Sync-FL and the two baselines
- Linear scaling of one selection pass
"""

import json
import math
import time
from dataclasses import replace

import numpy as np
import pytest
from scipy.stats import linregress

from flexfl.config import DEFAULTS
from flexfl.services.allocator import (
    Assignment,
    DualState,
    InfeasibleScheduleError,
    OracleGuardError,
    SelectionProblem,
    TWO_MODULATION_RATES,
    _better,
    allocate,
    baseline_allocators,
    brute_force_reference,
    dual_update,
    net_reward,
    random_client_subset,
    select_winners,
    solve,
    sync_fl_allocate,
)
from flexfl.services.phy import build_scenario, power_table, rate_window, sample_channels

STRICT = replace(DEFAULTS.solver, rate_window="strict")


def _check_invariants(report, scenario):
    a = report.assignment
    lam = a.lam
    A = scenario.timing.max_local_iterations
    assert np.all(lam.sum(axis=(0, 2)) <= 1)
    assert np.array_equal(a.zeta, lam[:, :, 1:].sum(axis=(1, 2)) > 0)
    assert np.all(a.powers <= scenario.power_budgets * (1 + 1e-12))
    lo, _ = rate_window(scenario)
    sel = a.zeta
    assert np.all(a.rates[sel] >= lo[sel] * (1 - 1e-12))
    assert np.all((a.iterations[sel] >= 1) & (a.iterations[sel] <= A))
    assert np.all(a.iterations[~sel] == 0)
    assert report.objective == pytest.approx(float(np.sum(scenario.weights * a.rates)), rel=1e-12)


def _small_instance(M, K, L, seed):
    config = DEFAULTS.replace(geometry=replace(DEFAULTS.geometry, num_clients=M))
    scenario = build_scenario(config, seed).with_subchannels(K).with_rates(tuple(2.0 * i for i in range(L + 1)))
    return scenario, sample_channels(scenario, seed, 1)


# =============================================================================
# REWARDS & WINNERS
# =============================================================================

class TestNetReward:
    """Tests for net_reward()."""

    def test_idle_mode_is_zero(self, make_scenario, fixed_channels, strong_gain):
        scenario = make_scenario()
        channels = fixed_channels(np.full((3, 2), strong_gain))
        assert net_reward(1, 0, 0, DualState.initial(3), channels, scenario) == 0.0

    def test_formula(self, make_scenario, fixed_channels):
        scenario = make_scenario()
        channels = fixed_channels([[1e-9, 2e-9], [3e-9, 1e-9], [2e-9, 2e-9]])
        duals = DualState(xi=np.array([0.5, 0.2, 0.1]), nu=np.array([0.1, 0.3, 0.0]),
                          iota=np.array([0.0, 0.1, 0.0]))
        p = power_table(channels, scenario)[1, 0, 2]
        w = scenario.weights / scenario.weights.max()
        expected = -0.2 * p / 0.1 + (w[1] + 0.3 - 0.1) * 4.0
        assert net_reward(1, 0, 2, duals, channels, scenario) == pytest.approx(expected)

    def test_no_prices_positive(self, make_scenario, fixed_channels, strong_gain):
        scenario = make_scenario()
        channels = fixed_channels(np.full((3, 2), strong_gain))
        duals = DualState.zeros(3)
        assert all(net_reward(0, 0, l, duals, channels, scenario) > 0 for l in (1, 2, 3))

    def test_deep_fade_excluded(self, make_scenario, fixed_channels):
        scenario = make_scenario()
        channels = fixed_channels([[0.0, 1e-9], [1e-9, 1e-9], [1e-9, 1e-9]])
        assert net_reward(0, 0, 1, DualState.initial(3), channels, scenario) == -np.inf

    def test_large_price_makes_idle(self, make_scenario, fixed_channels, strong_gain):
        scenario = make_scenario(num_clients=1, num_subchannels=1)
        channels = fixed_channels([[strong_gain]])
        duals = DualState(xi=np.array([1e9]), nu=np.zeros(1), iota=np.zeros(1))
        assignment = select_winners(duals, channels, scenario)
        assert assignment.num_selected == 0


class TestSelectWinners:
    """Tests for select_winners() and SelectionProblem.winners()."""

    def test_single_client_takes_top_mode(self, make_scenario, fixed_channels, strong_gain):
        scenario = make_scenario(num_clients=1, num_subchannels=1)
        assignment = select_winners(DualState.zeros(1), fixed_channels([[strong_gain]]), scenario)
        assert assignment.modes.tolist() == [3]
        assert assignment.winners.tolist() == [0]

    def test_ties_go_to_lowest_client(self, make_scenario, fixed_channels, strong_gain):
        scenario = make_scenario(num_clients=3, num_subchannels=2,
                                 dataset_sizes=[400, 400, 400], compute_speeds=[10.0, 10.0, 10.0])
        channels = fixed_channels(np.full((3, 2), strong_gain))
        assignment = select_winners(DualState.zeros(3), channels, scenario)
        assert assignment.winners.tolist() == [0, 0]
        assert assignment.modes.tolist() == [3, 3]

    def test_deep_fade_everywhere(self, make_scenario, fixed_channels):
        scenario = make_scenario()
        assignment = select_winners(DualState.initial(3), fixed_channels(np.zeros((3, 2))), scenario)
        assert assignment.num_selected == 0
        assert np.all(assignment.lam == 0)

    def test_positive_scaling_keeps_winners(self):
        scenario, channels = _small_instance(4, 3, 3, seed=5)
        problem = SelectionProblem(channels, scenario)
        rewards = problem.rewards(DualState.initial(4))
        scale = np.array([0.5, 3.0, 100.0])[None, :, None]
        before = problem.winners(rewards)
        after = problem.winners(rewards * scale)
        assert np.array_equal(before[0], after[0])
        assert np.array_equal(before[1], after[1])


# =============================================================================
# DUAL UPDATE
# =============================================================================

class TestDualUpdate:
    """Tests for dual_update() and DualState."""

    def _assignment(self, powers, rates):
        return Assignment(
            winners=np.array([0, -1]), modes=np.array([1, 0]), num_clients=2, num_modes=4,
            rates=np.asarray(rates, dtype=float), powers=np.asarray(powers, dtype=float),
            iterations=np.array([1, 0]),
        )

    def test_power_multiplier(self, make_scenario):
        scenario = make_scenario(num_clients=2, num_subchannels=2)
        duals = DualState(xi=np.array([0.1, 0.0]), nu=np.zeros(2), iota=np.zeros(2))
        updated = dual_update(duals, self._assignment([0.2, 0.05], [1e8, 0.0]), scenario)
        assert updated.xi[0] == pytest.approx(0.1 + 0.01 * (0.2 / 0.1 - 1.0))
        assert updated.xi[1] == 0.0
        assert updated.iteration == 1

    def test_power_at_budget_unchanged(self, make_scenario):
        scenario = make_scenario(num_clients=2, num_subchannels=2)
        duals = DualState.initial(2)
        updated = dual_update(duals, self._assignment([0.1, 0.1], [1e8, 0.0]), scenario)
        assert updated.xi[0] == pytest.approx(0.1)

    def test_lower_rate_multiplier(self, make_scenario):
        """Test that a selected client below its rate floor raises nu, others keep theirs."""
        scenario = make_scenario(num_clients=2, num_subchannels=2)
        lo, _ = rate_window(scenario)
        duals = DualState.initial(2)
        updated = dual_update(duals, self._assignment([0.01, 0.0], [0.5 * lo[0], 0.0]), scenario)
        assert updated.nu[0] == pytest.approx(0.1 + 0.01 * 0.5 * lo[0] / scenario.symbol_rate)
        assert updated.nu[1] == pytest.approx(0.1)

    def test_upper_rate_multiplier_strict(self, make_scenario):
        scenario = make_scenario(num_clients=2, num_subchannels=2, round_duration=1.0)
        _, hi = rate_window(scenario)
        duals = DualState.initial(2)
        updated = dual_update(duals, self._assignment([0.01, 0.0], [2 * hi[0], 0.0]), scenario, STRICT)
        assert updated.iota[0] > 0.1
        assert updated.iota[1] == pytest.approx(0.1)

    def test_negative_multipliers_rejected(self):
        with pytest.raises(ValueError):
            DualState(xi=np.array([-0.1]), nu=np.zeros(1), iota=np.zeros(1))


# =============================================================================
# SOLVE
# =============================================================================

class TestSolve:
    """Tests for solve()."""

    def test_reference_scenario_invariants(self):
        scenario = build_scenario(DEFAULTS, 0)
        for tau in (1, 2):
            report = solve(sample_channels(scenario, 0, tau), scenario)
            _check_invariants(report, scenario)
            assert report.assignment.num_selected >= 1
            assert report.kind == "optimal"
            assert len(report.lagrangian_trace) == report.iterations_used

    def test_strict_window_closed_form(self, make_scenario, fixed_channels):
        """Test that the cap N / (T_th - T^DL - A mu / beta) picks r = 4 and I = 5."""
        scenario = make_scenario(num_clients=1, num_subchannels=1, bandwidth=1e6, compute_speeds=[10.0],
                                 model_params=100_000, round_duration=1.011, downlink_delay=0.1)
        report = solve(fixed_channels([[1e-6]]), scenario, STRICT)
        assert report.assignment.modes.tolist() == [2]
        assert report.assignment.rates[0] == pytest.approx(4e6)
        assert report.assignment.iterations.tolist() == [5]

    def test_saturate_window_takes_top_mode(self, make_scenario, fixed_channels):
        scenario = make_scenario(num_clients=1, num_subchannels=1, bandwidth=1e6, compute_speeds=[10.0],
                                 model_params=100_000, round_duration=1.011, downlink_delay=0.1)
        report = solve(fixed_channels([[1e-6]]), scenario)
        assert report.assignment.modes.tolist() == [3]
        assert report.assignment.iterations.tolist() == [10]

    def test_rate_floor_unreachable(self, make_scenario, fixed_channels, strong_gain):
        scenario = make_scenario(num_clients=2, num_subchannels=1, bandwidth=1e3)
        with pytest.raises(InfeasibleScheduleError) as exc_info:
            solve(fixed_channels(np.full((2, 1), strong_gain)), scenario)
        assert exc_info.value.certificate

    def test_power_budget_respected_under_pressure(self, make_scenario, fixed_channels):
        """Test that a weak client never exceeds its budget over several subchannels."""
        scenario = make_scenario(num_clients=2, num_subchannels=4, power_budget=0.01)
        channels = fixed_channels(np.full((2, 4), 2e-9))
        report = solve(channels, scenario)
        _check_invariants(report, scenario)

    def test_deterministic(self):
        scenario = build_scenario(DEFAULTS, 3)
        channels = sample_channels(scenario, 3, 1)
        a, b = solve(channels, scenario), solve(channels, scenario)
        assert np.array_equal(a.assignment.winners, b.assignment.winners)
        assert a.objective == b.objective

    def test_record(self):
        scenario = build_scenario(DEFAULTS, 0)
        report = solve(sample_channels(scenario, 0, 1), scenario)
        record = json.loads(report.to_json_line(1))
        assert record['round'] == 1
        assert record['objective'] == pytest.approx(report.objective)
        assert {'zeta_0', 'rate_0', 'power_0', 'iter_0', 'iterations_used', 'converged'} <= set(record)


class TestSearch:
    """Tests for SelectionProblem.search() and the incumbent comparison."""

    def test_first_feasible_beats_empty_incumbent(self):
        assert _better((0.0, 0.0), (-math.inf, -math.inf))
        assert not _better((-math.inf, 0.0), (-math.inf, -math.inf))

    def test_from_idle_reaches_oracle(self):
        scenario, channels = _small_instance(4, 3, 2, seed=123)
        problem = SelectionProblem(channels, scenario)
        idle_w, idle_m = problem.idle()
        winners, modes, certified = problem.search(idle_w, idle_m, np.zeros(4), max_nodes=100_000)
        assert certified
        assert problem.is_feasible(winners, modes)
        oracle = brute_force_reference(channels, scenario)
        assert problem.score(winners, modes)[0] == pytest.approx(oracle.objective, rel=1e-9)

    def test_prices_do_not_change_the_optimum(self):
        scenario, channels = _small_instance(3, 3, 3, seed=126)
        problem = SelectionProblem(channels, scenario)
        idle_w, idle_m = problem.idle()
        values = []
        for xi in (np.zeros(3), np.full(3, 0.5), np.array([4.0, 0.0, 1.0])):
            winners, modes, certified = problem.search(idle_w, idle_m, xi, max_nodes=100_000)
            assert certified
            values.append(problem.score(winners, modes)[0])
        assert values == pytest.approx([values[0]] * 3, rel=1e-9)

    def test_node_budget(self):
        scenario, channels = _small_instance(4, 3, 3, seed=7)
        problem = SelectionProblem(channels, scenario)
        idle_w, idle_m = problem.idle()
        winners, modes, certified = problem.search(idle_w, idle_m, np.zeros(4), max_nodes=2)
        assert not certified
        assert problem.is_feasible(winners, modes)

    def test_keeps_incumbent_without_budget(self):
        scenario, channels = _small_instance(2, 2, 2, seed=9)
        problem = SelectionProblem(channels, scenario)
        start_w, start_m = problem.polish(*problem.idle())
        winners, modes, certified = problem.search(start_w, start_m, np.zeros(2), max_nodes=0)
        assert not certified
        assert np.array_equal(winners, start_w) and np.array_equal(modes, start_m)

    def test_disabled_search_stays_feasible(self):
        scenario = build_scenario(DEFAULTS, 1)
        report = solve(sample_channels(scenario, 1, 1), scenario, replace(DEFAULTS.solver, search_nodes=0))
        _check_invariants(report, scenario)

    def test_search_never_lowers_the_objective(self):
        scenario = build_scenario(DEFAULTS, 2)
        channels = sample_channels(scenario, 2, 1)
        plain = solve(channels, scenario, replace(DEFAULTS.solver, search_nodes=0))
        searched = solve(channels, scenario)
        assert searched.objective >= plain.objective * (1 - 1e-12)
        _check_invariants(searched, scenario)


# =============================================================================
# ORACLE
# =============================================================================

class TestBruteForce:
    """Tests for brute_force_reference() and its agreement with solve()."""

    def test_solver_matches_oracle(self):
        """Test that the solver reaches the oracle on every small instance."""
        for i in range(100):
            M, K, L = 1 + i % 4, 1 + i % 3, 1 + (i // 3) % 3
            scenario, channels = _small_instance(M, K, L, seed=100 + i)
            oracle = brute_force_reference(channels, scenario).objective
            try:
                value = solve(channels, scenario).objective
            except InfeasibleScheduleError:
                value = 0.0
            assert abs(value - oracle) <= 1e-9 * max(1.0, oracle), f"instance {i}: M={M} K={K} L={L}"

    @pytest.mark.parametrize("i", [23, 26])
    def test_three_subchannel_instances(self, i):
        """Test instances where single-subchannel moves stall below the optimum."""
        M, K, L = 1 + i % 4, 1 + i % 3, 1 + (i // 3) % 3
        scenario, channels = _small_instance(M, K, L, seed=100 + i)
        oracle = brute_force_reference(channels, scenario)
        report = solve(channels, scenario)
        assert report.objective == pytest.approx(oracle.objective, rel=1e-9)
        _check_invariants(report, scenario)

    def test_strict_window_matches_oracle(self):
        for i in range(30):
            M, K, L = 2 + i % 3, 1 + i % 3, 1 + i % 3
            scenario, channels = _small_instance(M, K, L, seed=300 + i)
            oracle = brute_force_reference(channels, scenario, STRICT).objective
            try:
                value = solve(channels, scenario, STRICT).objective
            except InfeasibleScheduleError:
                value = 0.0
            assert abs(value - oracle) <= 1e-9 * max(1.0, oracle)

    def test_sync_matches_oracle(self):
        for i in range(30):
            M, K, L = 2 + i % 3, 1 + i % 3, 1 + i % 3
            scenario, channels = _small_instance(M, K, L, seed=500 + i)
            oracle = brute_force_reference(channels, scenario, objective="sync")
            report = sync_fl_allocate(channels, scenario)
            assert report.selection_score == pytest.approx(oracle.selection_score, rel=1e-9, abs=1e-12)
            assert report.objective == pytest.approx(oracle.objective, rel=1e-9, abs=1e-9)

    def test_single_cell_scans_modes(self, make_scenario, fixed_channels, strong_gain):
        scenario = make_scenario(num_clients=1, num_subchannels=1)
        report = brute_force_reference(fixed_channels([[strong_gain]]), scenario)
        assert report.assignment.modes.tolist() == [3]
        assert report.iterations_used == 4

    def test_idle_only_modes(self, make_scenario, fixed_channels, strong_gain):
        scenario = make_scenario(rates=(0.0,))
        report = brute_force_reference(fixed_channels(np.full((3, 2), strong_gain)), scenario)
        assert report.objective == 0.0

    def test_guard(self, make_scenario, fixed_channels, strong_gain):
        scenario = make_scenario(num_clients=3, num_subchannels=2)
        solver = replace(DEFAULTS.solver, oracle_guard=100)
        with pytest.raises(OracleGuardError, match="oracle guard exceeded"):
            brute_force_reference(fixed_channels(np.full((3, 2), strong_gain)), scenario, solver)


# =============================================================================
# SYNC-FL & BASELINES
# =============================================================================

class TestSyncFL:
    """Tests for sync_fl_allocate()."""

    def test_tight_round_gives_zero_rate(self, make_scenario, fixed_channels, strong_gain):
        """Test that no client can finish A iterations, while flexible training still schedules."""
        scenario = make_scenario(num_clients=3, num_subchannels=4, compute_speeds=[9.0, 10.5, 12.0],
                                 round_duration=0.25, downlink_delay=0.1)
        channels = fixed_channels(np.full((3, 4), strong_gain))
        report = sync_fl_allocate(channels, scenario)
        assert report.sum_rate == 0.0
        assert report.assignment.num_selected == 0
        assert report.kind == "baseline3"
        flexible = solve(channels, scenario)
        assert flexible.sum_rate > 0
        assert np.all(flexible.assignment.iterations[flexible.assignment.zeta] < 10)

    def test_selected_clients_run_all_iterations(self):
        scenario = build_scenario(DEFAULTS, 1)
        report = sync_fl_allocate(sample_channels(scenario, 1, 1), scenario)
        a = report.assignment
        assert a.num_selected >= 1
        assert np.all(a.iterations[a.zeta] == scenario.timing.max_local_iterations)
        assert report.selection_score == pytest.approx(
            float(np.sum(scenario.dataset_sizes[a.zeta] ** 2)) / scenario.total_data ** 2)

    def test_generous_resources_select_everyone(self, make_scenario, fixed_channels, strong_gain):
        scenario = make_scenario(num_clients=3, num_subchannels=6)
        report = sync_fl_allocate(fixed_channels(np.full((3, 6), strong_gain)), scenario)
        assert report.assignment.num_selected == 3


class TestBaselines:
    """Tests for baseline_allocators() and allocate()."""

    def test_two_modulation_rates(self):
        scenario = build_scenario(DEFAULTS, 2)
        report = baseline_allocators("two_modulation", sample_channels(scenario, 2, 1), scenario)
        a = report.assignment
        assert report.kind == "baseline1"
        assert a.num_modes == len(TWO_MODULATION_RATES)
        assert set(np.unique(a.modes)) <= {0, 1}
        assert np.allclose(a.rates % (4.0 * scenario.symbol_rate), 0.0)

    def test_two_modulation_linear_in_k(self, make_scenario, fixed_channels, strong_gain):
        """Test that equal-gain instances with a fixed subchannel width give an objective linear in K."""
        values = []
        for K in (2, 4, 6, 8):
            scenario = make_scenario(num_clients=3, num_subchannels=K, bandwidth=6.25e6 * K)
            values.append(baseline_allocators("two_modulation", fixed_channels(np.full((3, K), strong_gain)),
                                              scenario).objective)
        second = np.diff(values, n=2)
        assert np.allclose(second, 0.0, atol=1e-9 * max(values))
        assert values[-1] == pytest.approx(4 * values[0])

    def test_random_subset_respected(self):
        scenario = build_scenario(DEFAULTS, 0)
        channels = sample_channels(scenario, 0, 4)
        mask = random_client_subset(scenario.num_clients, 0, 4)
        report = baseline_allocators("random_client", channels, scenario, seed=0)
        assert report.kind == "baseline2"
        assert np.all(mask[report.assignment.zeta])

    def test_random_subset_deterministic_and_nonempty(self):
        for rnd in range(20):
            mask = random_client_subset(5, 9, rnd)
            assert mask.any()
            assert np.array_equal(mask, random_client_subset(5, 9, rnd))

    def test_full_subset_equals_solve(self):
        scenario = build_scenario(DEFAULTS, 0)
        channels = sample_channels(scenario, 0, 1)
        full = baseline_allocators("random_client", channels, scenario, subset=range(scenario.num_clients))
        assert full.objective == pytest.approx(solve(channels, scenario).objective)

    def test_baselines_below_oracle(self):
        for seed in range(5):
            scenario, channels = _small_instance(3, 2, 3, seed=200 + seed)
            best = brute_force_reference(channels, scenario).objective
            tol = 1e-9 * max(1.0, best)
            assert sync_fl_allocate(channels, scenario).objective <= best + tol
            for kind in ("two_modulation", "random_client"):
                try:
                    value = baseline_allocators(kind, channels, scenario, seed=seed).objective
                except InfeasibleScheduleError:
                    continue
                assert value <= best + tol

    def test_dispatch(self):
        scenario = build_scenario(DEFAULTS, 0)
        channels = sample_channels(scenario, 0, 1)
        assert allocate("baseline3", channels, scenario).kind == "baseline3"
        with pytest.raises(ValueError):
            allocate("nope", channels, scenario)
        with pytest.raises(ValueError):
            baseline_allocators("nope", channels, scenario)


# =============================================================================
# SCALING
# =============================================================================

class TestScaling:
    """Wall time of one selection pass grows linearly in M K L."""

    def test_selection_pass_is_linear(self, make_scenario, fixed_channels):
        K, rates = 64, tuple(2.0 * i for i in range(8))
        sizes, times = [], []
        for M in (16, 32, 64, 128, 256):
            scenario = make_scenario(num_clients=M, num_subchannels=K, rates=rates)
            rng = np.random.default_rng(M)
            problem = SelectionProblem(fixed_channels(rng.uniform(1e-9, 1e-8, (M, K))), scenario)
            duals = DualState.initial(M)
            problem.winners(problem.rewards(duals))
            samples = []
            for _ in range(9):
                start = time.perf_counter()
                problem.winners(problem.rewards(duals))
                samples.append(time.perf_counter() - start)
            sizes.append(M * K * len(rates))
            times.append(float(np.median(samples)))
        fit = linregress(sizes, times)
        assert fit.slope > 0
        assert fit.rvalue ** 2 >= 0.95
