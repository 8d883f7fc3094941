"""
FLEXFL - Physical Layer Service
===============================
Channel generation, link adaptation and rate/delay arithmetic.

- Rayleigh block fading with a distance path loss, redrawn every round
  from a counter-based (seed, round) stream
- SNR, exponential BER approximation and the minimum transmit power that
  meets the BER target
- Uplink rate from a selection row, upload/compute delays, and the local
  iteration count a round budget allows

Usage:
    from flexfl.services.phy import build_scenario, sample_channels
    scenario = build_scenario(DEFAULTS, seed=0)
    channels = sample_channels(scenario, rng_seed=0, round_index=1)
"""

import dataclasses
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from flexfl.config import (
    ExperimentConfig,
    ModulationScheme,
    RadioConfig,
    TimingBudget,
)
from flexfl.logger import get_logger

log = get_logger('phy')

# floor() slack so that budgets landing exactly on an integer survive rounding
ITERATION_EPS = 1e-9


class InvalidGeometryError(ValueError):
    """Client placed at the BS or profile fields out of range."""


class DeepFadeError(ValueError):
    """Positive-rate modulation requested on a zero-gain subchannel."""


class ScheduleError(ValueError):
    """Selected client cannot upload or cannot afford a single iteration."""


# =============================================================================
# DOMAIN TYPES
# =============================================================================

@dataclass(frozen=True)
class ClientProfile:
    """One edge client."""
    id: int
    position: Tuple[float, float, float]   # meters
    dataset_size: int                      # D_m
    compute_speed: float                   # beta_m, GFLOP/s
    power_budget: float                    # P_m^max, W

    def __post_init__(self):
        if self.dataset_size < 1:
            raise InvalidGeometryError(f"client {self.id}: dataset_size must be >= 1")
        if self.compute_speed <= 0:
            raise InvalidGeometryError(f"client {self.id}: compute_speed must be positive")
        if self.power_budget <= 0:
            raise InvalidGeometryError(f"client {self.id}: power_budget must be positive")


@dataclass(frozen=True)
class Scenario:
    """
    Immutable experiment configuration seen by the radio and the allocator.

    Per-client arrays are exposed as properties so every consumer works on
    vectors indexed by client position in ``clients``.
    """
    clients: Tuple[ClientProfile, ...]
    scheme: ModulationScheme
    radio: RadioConfig
    timing: TimingBudget
    bs_position: Tuple[float, float, float] = (0.0, 0.0, 20.0)
    model_params: int = 101_770

    def __post_init__(self):
        if not self.clients:
            raise InvalidGeometryError("scenario needs at least one client")
        if self.model_params < 1:
            raise InvalidGeometryError("model_params must be >= 1")
        if np.any(self.distances <= 0):
            bad = [c.id for c, d in zip(self.clients, self.distances) if d <= 0]
            raise InvalidGeometryError(f"client(s) {bad} located at the BS (d_m = 0)")

    # -- sizes ----------------------------------------------------------------

    @property
    def num_clients(self) -> int:
        return len(self.clients)

    @property
    def num_subchannels(self) -> int:
        return self.radio.num_subchannels

    @property
    def rates(self) -> np.ndarray:
        return np.asarray(self.scheme.rates, dtype=float)

    # -- per-client vectors -----------------------------------------------------

    @property
    def distances(self) -> np.ndarray:
        positions = np.array([c.position for c in self.clients], dtype=float)
        return np.linalg.norm(positions - np.asarray(self.bs_position, dtype=float), axis=1)

    @property
    def dataset_sizes(self) -> np.ndarray:
        return np.array([c.dataset_size for c in self.clients], dtype=float)

    @property
    def compute_speeds(self) -> np.ndarray:
        return np.array([c.compute_speed for c in self.clients], dtype=float)

    @property
    def power_budgets(self) -> np.ndarray:
        return np.array([c.power_budget for c in self.clients], dtype=float)

    @property
    def total_data(self) -> float:
        """D = sum of D_m."""
        return float(self.dataset_sizes.sum())

    @property
    def weights(self) -> np.ndarray:
        """Weighted-sum-rate coefficients D_m^2 / (beta_m D^2)."""
        return self.dataset_sizes ** 2 / (self.compute_speeds * self.total_data ** 2)

    # -- radio scalars --------------------------------------------------------

    @property
    def model_bits(self) -> float:
        """N: uploaded model size in bits."""
        return float(self.model_params * self.radio.bits_per_param)

    @property
    def sigma2(self) -> float:
        return self.radio.noise_power

    @property
    def symbol_rate(self) -> float:
        return self.radio.symbol_rate

    # -- variants ---------------------------------------------------------------

    def with_rates(self, rates: Sequence[float]) -> "Scenario":
        return dataclasses.replace(self, scheme=self.scheme.with_rates(rates))

    def with_subchannels(self, num_subchannels: int) -> "Scenario":
        return dataclasses.replace(
            self, radio=dataclasses.replace(self.radio, num_subchannels=num_subchannels)
        )

    def with_model_params(self, model_params: int) -> "Scenario":
        return dataclasses.replace(self, model_params=int(model_params))

    def with_timing(self, **changes) -> "Scenario":
        return dataclasses.replace(self, timing=dataclasses.replace(self.timing, **changes))


@dataclass(frozen=True)
class ChannelRealization:
    """Subchannel power gains |h_{m,k}|^2 of one round (M x K)."""
    gains: np.ndarray
    round_index: int = 0

    def __post_init__(self):
        gains = np.asarray(self.gains, dtype=float)
        if gains.ndim != 2:
            raise ValueError("gains must be an M x K matrix")
        if np.any(gains < 0) or not np.all(np.isfinite(gains)):
            raise ValueError("gains must be finite and nonnegative")
        object.__setattr__(self, 'gains', gains)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.gains.shape  # type: ignore[return-value]


@dataclass(frozen=True)
class DelayBreakdown:
    """Per-client round timing, seconds."""
    uplink: float              # T^UL
    compute_available: float   # T_th - T^UL - T^DL
    compute: float             # T^C = I mu / beta
    downlink: float            # T^DL
    iterations: int

    @property
    def total(self) -> float:
        """T_m = T^C + T^UL + T^DL."""
        return self.compute + self.uplink + self.downlink

    def to_dict(self) -> dict:
        return {
            'uplink': self.uplink,
            'compute_available': self.compute_available,
            'compute': self.compute,
            'downlink': self.downlink,
            'iterations': self.iterations,
            'total': self.total,
        }


# =============================================================================
# SCENARIO CONSTRUCTION
# =============================================================================

def build_scenario(config: ExperimentConfig, seed: int) -> Scenario:
    """
    Draw client positions, compute speeds and dataset sizes.

    Clients are uniform in the square region centred on the BS; speeds are
    uniform in ``compute_speed_range`` and sizes uniform integers in
    ``dataset_size_range``.

    Args:
        config: Experiment configuration.
        seed: Scenario seed (independent of the per-round channel stream).

    Returns:
        Scenario instance.
    """
    geo = config.geometry
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xC11E]))
    half = geo.region_side / 2.0
    bs_x, bs_y, _ = geo.bs_position

    xy = rng.uniform(-half, half, size=(geo.num_clients, 2)) + np.array([bs_x, bs_y])
    speeds = rng.uniform(*config.clients.compute_speed_range, size=geo.num_clients)
    lo, hi = config.clients.dataset_size_range
    sizes = rng.integers(lo, hi + 1, size=geo.num_clients)

    clients = tuple(
        ClientProfile(
            id=m,
            position=(float(xy[m, 0]), float(xy[m, 1]), geo.client_height),
            dataset_size=int(sizes[m]),
            compute_speed=float(speeds[m]),
            power_budget=config.clients.power_budget,
        )
        for m in range(geo.num_clients)
    )
    scenario = Scenario(
        clients=clients,
        scheme=config.modulation,
        radio=config.radio,
        timing=config.timing,
        bs_position=tuple(float(v) for v in geo.bs_position),  # type: ignore[arg-type]
        model_params=config.model.num_params,
    )
    log.debug(f"scenario seed={seed}: M={scenario.num_clients}, D={scenario.total_data:.0f}")
    return scenario


# =============================================================================
# CHANNELS
# =============================================================================

def mean_gains(scenario: Scenario) -> np.ndarray:
    """Large-scale gain epsilon_o * d_m^(-alpha) per client."""
    return scenario.radio.pathloss_ref * scenario.distances ** (-scenario.radio.pathloss_exp)


def channel_rng(rng_seed: int, round_index: int) -> np.random.Generator:
    """Independent stream per (seed, round); order of generation never matters."""
    return np.random.default_rng(np.random.SeedSequence([int(rng_seed), int(round_index)]))


def sample_channels(
    scenario: Scenario,
    rng_seed: int,
    round_index: int,
    fading: Optional[np.ndarray] = None,
) -> ChannelRealization:
    """
    Draw one round of Rayleigh block-fading gains.

    gains[m, k] = epsilon_o * d_m^(-alpha) * |h|^2 with h a unit-variance
    circularly-symmetric complex Gaussian.

    Args:
        scenario: Scenario whose geometry sets the path loss.
        rng_seed: Channel seed.
        round_index: Aggregation round tau.
        fading: Optional M x K matrix replacing the random h (tests).

    Returns:
        ChannelRealization for the round.
    """
    M, K = scenario.num_clients, scenario.num_subchannels
    if fading is None:
        rng = channel_rng(rng_seed, round_index)
        h = (rng.standard_normal((M, K)) + 1j * rng.standard_normal((M, K))) / math.sqrt(2.0)
    else:
        h = np.broadcast_to(np.asarray(fading), (M, K))
    gains = mean_gains(scenario)[:, None] * np.abs(h) ** 2
    return ChannelRealization(gains=gains, round_index=int(round_index))


# =============================================================================
# LINK ADAPTATION
# =============================================================================

def snr(p, gain, sigma2: float):
    """
    Received SNR p * gain / sigma^2 (scalars or arrays).

    Raises:
        ValueError: sigma2 <= 0, or a negative power or gain.
    """
    if sigma2 <= 0:
        raise ValueError("sigma2 must be positive")
    p_arr, g_arr = np.asarray(p, dtype=float), np.asarray(gain, dtype=float)
    if np.any(p_arr < 0) or np.any(g_arr < 0):
        raise ValueError("power and gain must be nonnegative")
    out = p_arr * g_arr / sigma2
    return float(out) if out.ndim == 0 else out


def ber(gamma, rate: float, scheme: ModulationScheme):
    """
    Bit error rate beta1 * exp(-beta2 * gamma / (2^r - 1)).

    Raises:
        ValueError: rate == 0 (the no-transmission mode has no BER).
    """
    if rate <= 0:
        raise ValueError("no-transmission mode has no BER")
    out = scheme.beta1 * np.exp(-scheme.beta2 * np.asarray(gamma, dtype=float) / (2.0 ** rate - 1.0))
    return float(out) if out.ndim == 0 else out


def min_power(gain: float, rate: float, sigma2: float, scheme: ModulationScheme) -> float:
    """
    Smallest transmit power meeting the BER target on one subchannel.

    p = (2^r - 1) ln(beta1 / chi_0) sigma^2 / (beta2 * gain); zero for r = 0.

    Raises:
        DeepFadeError: gain == 0 with a positive rate.
    """
    if rate == 0:
        return 0.0
    if gain <= 0:
        raise DeepFadeError("deep fade, modulation infeasible")
    return (2.0 ** rate - 1.0) * scheme.log_margin * sigma2 / (scheme.beta2 * gain)


def power_table(channels: ChannelRealization, scenario: Scenario) -> np.ndarray:
    """
    Minimum power for every (client, subchannel, mode), M x K x (L+1).

    Zero-gain entries with a positive rate are +inf (mode excluded).
    """
    scheme = scenario.scheme
    factor = (2.0 ** scenario.rates - 1.0) * scheme.log_margin * scenario.sigma2 / scheme.beta2
    with np.errstate(divide='ignore', invalid='ignore'):
        table = factor[None, None, :] / channels.gains[:, :, None]
    table[:, :, 0] = 0.0
    table[np.isnan(table)] = np.inf
    return table


# =============================================================================
# RATES & DELAYS
# =============================================================================

def uplink_rate(lam_row: np.ndarray, scheme: ModulationScheme, radio: RadioConfig) -> float:
    """
    Uplink rate of one client in bits/s.

    Args:
        lam_row: K x (L+1) binary selection of the client.
        scheme: Modulation set.
        radio: Radio configuration (symbol rate B_w / K).

    Returns:
        sum_k sum_l lambda_{k,l} r_l * B_w / K.
    """
    bits_per_symbol = float(np.sum(np.asarray(lam_row) @ np.asarray(scheme.rates, dtype=float)))
    return bits_per_symbol * radio.symbol_rate


def iteration_budget(uplink_delay: float, client: ClientProfile, timing: TimingBudget) -> float:
    """Unrounded iterations affordable: (T_th - T^UL - T^DL) beta / mu."""
    available = timing.round_duration - uplink_delay - timing.downlink_delay
    return available * client.compute_speed / timing.flops_per_iteration


def iterations_from_budget(uplink_delay: float, client: ClientProfile, timing: TimingBudget) -> int:
    """
    Local iterations I_m a round allows, floored then clamped to [1, A].

    Raises:
        ScheduleError: The budget affords less than one iteration.
    """
    raw = math.floor(iteration_budget(uplink_delay, client, timing) + ITERATION_EPS)
    if raw < 1:
        raise ScheduleError(
            f"iteration budget below 1 for client {client.id} (T^UL = {uplink_delay:.4g} s)"
        )
    return min(raw, timing.max_local_iterations)


def delays(
    client: ClientProfile,
    rate: float,
    model_bits: float,
    timing: TimingBudget,
    iterations: Optional[int] = None,
) -> DelayBreakdown:
    """
    Upload, compute and total delay of a selected client.

    Args:
        client: Client profile.
        rate: R_m^UL in bits/s.
        model_bits: N.
        timing: Round budget.
        iterations: Local iterations; derived from the budget when None.

    Raises:
        ScheduleError: rate <= 0, or the budget affords no iteration.
    """
    if rate <= 0:
        raise ScheduleError(f"selected client cannot upload (client {client.id})")
    uplink = model_bits / rate
    if iterations is None:
        iterations = iterations_from_budget(uplink, client, timing)
    return DelayBreakdown(
        uplink=uplink,
        compute_available=timing.round_duration - uplink - timing.downlink_delay,
        compute=iterations * timing.flops_per_iteration / client.compute_speed,
        downlink=timing.downlink_delay,
        iterations=int(iterations),
    )


def rate_window(scenario: Scenario) -> Tuple[np.ndarray, np.ndarray]:
    """
    Rates for which the iteration count lands in [1, A], bits/s per client.

    lo = N / (T_th - T^DL - mu/beta), hi = N / (T_th - T^DL - A mu/beta).
    A nonpositive lo denominator makes the client unschedulable (lo = inf);
    a nonpositive hi denominator lifts the cap (hi = inf).
    """
    t = scenario.timing
    slack = t.round_duration - t.downlink_delay
    per_iter = t.flops_per_iteration / scenario.compute_speeds
    lo_den = slack - per_iter
    hi_den = slack - t.max_local_iterations * per_iter
    N = scenario.model_bits
    with np.errstate(divide='ignore'):
        lo = np.where(lo_den > 0, N / np.where(lo_den > 0, lo_den, 1.0), np.inf)
        hi = np.where(hi_den > 0, N / np.where(hi_den > 0, hi_den, 1.0), np.inf)
    return lo, hi


def sync_rate_floor(scenario: Scenario) -> np.ndarray:
    """
    Minimum rate for A iterations in the round, bits/s.

    Infinite when T_th - T^DL - A mu / beta <= 0 (no rate suffices).
    """
    return rate_window(scenario)[1].copy()
