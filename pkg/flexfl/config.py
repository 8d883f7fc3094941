#!/usr/bin/env python3
"""
FLEXFL - Configuration Module
=============================
Centralized configuration for the simulator.

Every section is a frozen dataclass whose defaults reproduce the reference
scenario (geometry, radio, modulation, timing, data sizes). Sections load
from a TOML file with one table per section and accept ``section.key=value``
overrides from the command line.
"""

import dataclasses
import math
import os
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, Mapping, Optional, Tuple

import toml

from flexfl.utils import db_to_linear, dbm_to_watts


class ConfigError(ValueError):
    """Invalid, unknown or unreadable configuration."""


# =============================================================================
# APPLICATION INFO
# =============================================================================

APP_NAME: str = "FLEXFL"
APP_TITLE: str = "Flexible-aggregation FL over OFDMA"

ENV_DATA_ROOT = "FLEXFL_DATA_ROOT"
ENV_LOG_LEVEL = "FLEXFL_LOG_LEVEL"

# Parameter counts of the two reference models
MODEL_SIZES: Dict[str, int] = {
    "mlp": 101_770,   # 784-128-10 fully connected, ~1.018e5
    "cnn": 421_400,   # ~4.214e5
}


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigError(message)


# =============================================================================
# GEOMETRY
# =============================================================================

@dataclass(frozen=True)
class GeometryConfig:
    """Square deployment region with the BS at its centre."""
    num_clients: int = 10                                   # M
    region_side: float = 250.0                              # meters
    bs_position: Tuple[float, float, float] = (0.0, 0.0, 20.0)
    client_height: float = 1.5                              # meters

    def __post_init__(self):
        _require(self.num_clients >= 1, "geometry.num_clients must be >= 1")
        _require(self.region_side > 0, "geometry.region_side must be positive")
        _require(len(self.bs_position) == 3, "geometry.bs_position needs (x, y, z)")


GEOMETRY = GeometryConfig()


# =============================================================================
# CLIENT PROFILES
# =============================================================================

@dataclass(frozen=True)
class ClientConfig:
    """Ranges the per-client profiles are drawn from."""
    power_budget: float = 0.1                                    # W (20 dBm)
    compute_speed_range: Tuple[float, float] = (9.0, 12.0)       # GFLOP/s, uniform
    dataset_size_range: Tuple[int, int] = (300, 500)             # samples, uniform integer

    def __post_init__(self):
        _require(self.power_budget > 0, "clients.power_budget must be positive")
        lo, hi = self.compute_speed_range
        _require(0 < lo <= hi, "clients.compute_speed_range must satisfy 0 < lo <= hi")
        lo, hi = self.dataset_size_range
        _require(1 <= lo <= hi, "clients.dataset_size_range must satisfy 1 <= lo <= hi")


CLIENTS = ClientConfig()


# =============================================================================
# RADIO
# =============================================================================

@dataclass(frozen=True)
class RadioConfig:
    """OFDMA air interface. Linear units throughout."""
    pathloss_ref: float = 1e-3               # epsilon_o at d0 = 1 m (-30 dB)
    pathloss_exp: float = 2.8                # alpha
    noise_density: float = dbm_to_watts(-169.0)  # W/Hz
    bandwidth: float = 100e6                 # B_w, Hz
    num_subchannels: int = 16                # K
    bits_per_param: int = 32

    def __post_init__(self):
        _require(self.num_subchannels >= 1, "radio.num_subchannels must be >= 1")
        _require(self.bandwidth > 0, "radio.bandwidth must be positive")
        _require(self.pathloss_ref > 0, "radio.pathloss_ref must be positive")
        _require(self.noise_density > 0, "radio.noise_density must be positive")
        _require(self.bits_per_param >= 1, "radio.bits_per_param must be >= 1")

    @property
    def subchannel_bandwidth(self) -> float:
        return self.bandwidth / self.num_subchannels

    @property
    def symbol_rate(self) -> float:
        """Symbols per second on one subchannel (one symbol per Hz)."""
        return self.subchannel_bandwidth

    @property
    def noise_power(self) -> float:
        """sigma^2 on one subchannel, W."""
        return self.noise_density * self.subchannel_bandwidth


RADIO = RadioConfig()


# =============================================================================
# MODULATION
# =============================================================================

@dataclass(frozen=True)
class ModulationScheme:
    """
    Adaptive modulation set with the exponential BER approximation.

    ``beta2`` is stored as a positive magnitude so the BER decreases with SNR.
    """
    rates: Tuple[float, ...] = (0.0, 2.0, 4.0, 6.0)   # bits/symbol, rates[0] = 0
    beta1: float = 0.2
    beta2: float = 1.6
    target_ber: float = 1e-6                           # chi_0

    def __post_init__(self):
        _require(len(self.rates) >= 1 and self.rates[0] == 0,
                 "modulation.rates must start with 0 (no transmission)")
        _require(all(b > a for a, b in zip(self.rates, self.rates[1:])),
                 "modulation.rates must be strictly increasing")
        _require(self.beta2 > 0, "modulation.beta2 must be positive")
        _require(0 < self.target_ber < self.beta1,
                 "modulation.target_ber must lie in (0, beta1)")

    @property
    def num_levels(self) -> int:
        """L: number of positive-rate modes."""
        return len(self.rates) - 1

    @property
    def log_margin(self) -> float:
        """ln(beta1 / chi_0), the SNR margin factor of the minimum power."""
        return math.log(self.beta1 / self.target_ber)

    def with_rates(self, rates: Iterable[float]) -> "ModulationScheme":
        return dataclasses.replace(self, rates=tuple(float(r) for r in rates))


MODULATION = ModulationScheme()


# =============================================================================
# TIMING
# =============================================================================

@dataclass(frozen=True)
class TimingBudget:
    """Per-round time budget."""
    round_duration: float = 10.0       # T_th, s
    downlink_delay: float = 0.1        # T^DL, s
    flops_per_iteration: float = 0.2   # mu, GFLOP
    max_local_iterations: int = 10     # A

    def __post_init__(self):
        _require(self.round_duration > self.downlink_delay,
                 "timing.round_duration must exceed timing.downlink_delay")
        _require(self.max_local_iterations >= 1, "timing.max_local_iterations must be >= 1")
        _require(self.flops_per_iteration > 0, "timing.flops_per_iteration must be positive")


TIMING = TimingBudget()


# =============================================================================
# MODEL & TRAINING
# =============================================================================

@dataclass(frozen=True)
class ModelConfig:
    """Size of the model uploaded every round."""
    preset: str = "mlp"                 # mlp | cnn
    params: Optional[int] = None        # explicit parameter count wins over the preset
    hidden_units: int = 128             # MLP hidden layer width

    def __post_init__(self):
        _require(self.preset in MODEL_SIZES, f"model.preset must be one of {sorted(MODEL_SIZES)}")
        _require(self.params is None or self.params >= 1, "model.params must be >= 1")
        _require(self.hidden_units >= 1, "model.hidden_units must be >= 1")

    @property
    def num_params(self) -> int:
        return self.params if self.params is not None else MODEL_SIZES[self.preset]


MODEL = ModelConfig()


@dataclass(frozen=True)
class TrainingConfig:
    """Local training and aggregation settings."""
    task: str = "mlp"                  # mlp | quadratic | logistic
    rounds: int = 50                   # G
    batch_size: int = 32
    learning_rate: float = 0.1         # eta
    clip_norm: float = 10.0            # C; inf disables clipping
    aggregation: str = "normalized"    # normalized | as_written
    synthetic_dim: int = 10
    conditioning: float = 10.0
    noise: float = 0.1
    regularization: float = 1e-2       # logistic L2 weight

    def __post_init__(self):
        _require(self.task in ("mlp", "quadratic", "logistic"),
                 "training.task must be mlp, quadratic or logistic")
        _require(self.rounds >= 0, "training.rounds must be >= 0")
        _require(self.batch_size >= 1, "training.batch_size must be >= 1")
        _require(self.learning_rate > 0, "training.learning_rate must be positive")
        _require(self.clip_norm > 0, "training.clip_norm must be positive")
        _require(self.aggregation in ("normalized", "as_written"),
                 "training.aggregation must be normalized or as_written")
        _require(self.conditioning >= 1, "training.conditioning must be >= 1")


TRAINING = TrainingConfig()


# =============================================================================
# SOLVER
# =============================================================================

@dataclass(frozen=True)
class SolverConfig:
    """Dual subgradient solver settings."""
    step_size: float = 0.01            # epsilon, on normalized rewards
    step_schedule: str = "constant"    # constant | sqrt_decay
    tolerance: float = 1e-8            # relative change of the Lagrangian
    max_iterations: int = 5000         # L_max
    initial_dual: float = 0.1
    rate_window: str = "saturate"      # saturate | strict
    polish: bool = True                # single-move local search on the recovered primal
    oracle_guard: int = 10_000_000     # brute-force enumeration limit
    search_nodes: int = 5_000          # branch-and-bound node budget, 0 disables

    def __post_init__(self):
        _require(self.step_size > 0, "solver.step_size must be positive")
        _require(self.step_schedule in ("constant", "sqrt_decay"),
                 "solver.step_schedule must be constant or sqrt_decay")
        _require(self.max_iterations >= 1, "solver.max_iterations must be >= 1")
        _require(self.initial_dual >= 0, "solver.initial_dual must be >= 0")
        _require(self.search_nodes >= 0, "solver.search_nodes must be >= 0")
        _require(self.rate_window in ("saturate", "strict"),
                 "solver.rate_window must be saturate or strict")


SOLVER = SolverConfig()


# =============================================================================
# HARNESS & LOGGING
# =============================================================================

ALLOCATOR_KINDS: Tuple[str, ...] = ("optimal", "baseline1", "baseline2", "baseline3")


@dataclass(frozen=True)
class HarnessConfig:
    """Experiment runner settings."""
    seeds: Tuple[int, ...] = (0, 1, 2, 3, 4)
    allocators: Tuple[str, ...] = ALLOCATOR_KINDS
    k_values: Tuple[int, ...] = (2, 4, 6, 8, 12, 16)
    l_values: Tuple[int, ...] = (1, 2, 3, 4, 5, 6, 8)   # nonzero modes
    workers: int = 4
    out_dir: str = "results"
    dataset_root: str = "data/mnist"
    sweep_draws: int = 5               # channel draws averaged per sweep point and seed

    def __post_init__(self):
        unknown = [a for a in self.allocators if a not in ALLOCATOR_KINDS]
        _require(not unknown, f"harness.allocators has unknown kinds {unknown}")
        _require(all(k >= 1 for k in self.k_values), "harness.k_values must be >= 1")
        _require(all(n >= 1 for n in self.l_values), "harness.l_values must be >= 1")
        _require(self.workers >= 1, "harness.workers must be >= 1")
        _require(self.sweep_draws >= 1, "harness.sweep_draws must be >= 1")


HARNESS = HarnessConfig()


@dataclass(frozen=True)
class LoggingConfig:
    """Logging switches consumed by flexfl.logger.configure."""
    level: str = "INFO"
    file_enabled: bool = False
    json_enabled: bool = False
    log_dir: str = "logs"


LOGGING = LoggingConfig()


# =============================================================================
# EXPERIMENT BUNDLE
# =============================================================================

@dataclass(frozen=True)
class ExperimentConfig:
    """All configuration sections of one experiment."""
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    clients: ClientConfig = field(default_factory=ClientConfig)
    radio: RadioConfig = field(default_factory=RadioConfig)
    modulation: ModulationScheme = field(default_factory=ModulationScheme)
    timing: TimingBudget = field(default_factory=TimingBudget)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    harness: HarnessConfig = field(default_factory=HarnessConfig)
    logging: LoggingConfig = field(default_factory=LoggingConfig)

    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        out: Dict[str, Dict[str, Any]] = {}
        for f in dataclasses.fields(self):
            section = dataclasses.asdict(getattr(self, f.name))
            out[f.name] = {k: list(v) if isinstance(v, tuple) else v for k, v in section.items()}
        return out

    def replace(self, **sections: Any) -> "ExperimentConfig":
        return dataclasses.replace(self, **sections)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ExperimentConfig":
        """
        Build a validated configuration from nested mappings.

        Args:
            data: ``{section: {key: value}}``; missing keys keep their defaults.

        Returns:
            ExperimentConfig instance.

        Raises:
            ConfigError: Unknown section or key, or a value failing validation.
        """
        section_types = {f.name: f.default_factory for f in dataclasses.fields(cls)}  # type: ignore[misc]
        unknown = sorted(set(data) - set(section_types))
        if unknown:
            raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")

        sections = {}
        for name, factory in section_types.items():
            raw = dict(data.get(name, {}))
            _convert_db_keys(name, raw)
            section_cls = type(factory())
            known = {f.name: f for f in dataclasses.fields(section_cls)}
            bad = sorted(set(raw) - set(known))
            if bad:
                raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(bad)}")
            kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()}
            try:
                sections[name] = section_cls(**kwargs)
            except TypeError as e:
                raise ConfigError(f"[{name}]: {e}") from e
        return cls(**sections)


# Keys accepted in dB units and the linear field they set
_DB_KEYS = {
    "radio": {
        "pathloss_ref_db": ("pathloss_ref", db_to_linear),
        "noise_density_dbm_hz": ("noise_density", dbm_to_watts),
    },
    "clients": {
        "power_budget_dbm": ("power_budget", dbm_to_watts),
    },
}


def _convert_db_keys(section: str, raw: Dict[str, Any]) -> None:
    for db_key, (target, convert) in _DB_KEYS.get(section, {}).items():
        if db_key in raw:
            raw[target] = convert(float(raw.pop(db_key)))


DEFAULTS = ExperimentConfig()


# =============================================================================
# LOADING
# =============================================================================

def parse_override(text: str) -> Tuple[str, str, Any]:
    """
    Parse one ``section.key=value`` override.

    The value is read as a TOML literal (numbers, booleans, arrays, quoted
    strings); anything else is kept as a bare string.

    Examples:
        >>> parse_override("radio.num_subchannels=8")
        ('radio', 'num_subchannels', 8)
    """
    if "=" not in text:
        raise ConfigError(f"override '{text}' is not of the form section.key=value")
    path, value_text = text.split("=", 1)
    parts = path.strip().split(".")
    if len(parts) != 2 or not all(parts):
        raise ConfigError(f"override key '{path}' must be section.key")
    try:
        value = toml.loads(f"v = {value_text.strip()}")["v"]
    except (toml.TomlDecodeError, ValueError, IndexError):
        value = value_text.strip()
    return parts[0], parts[1], value


def load_config(
    path: Optional[str] = None,
    overrides: Iterable[str] = (),
    environ: Optional[Mapping[str, str]] = None,
) -> ExperimentConfig:
    """
    Load a configuration file, then apply environment and CLI overrides.

    Args:
        path: TOML file, or None for the built-in defaults.
        overrides: ``section.key=value`` strings, applied last.
        environ: Environment mapping (defaults to os.environ).

    Returns:
        Validated ExperimentConfig.

    Raises:
        ConfigError: Missing/unparsable file or invalid values.
    """
    data: Dict[str, Dict[str, Any]] = {}
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        try:
            loaded = toml.load(path)
        except toml.TomlDecodeError as e:
            raise ConfigError(f"cannot parse {path}: {e}") from e
        for section, values in loaded.items():
            if not isinstance(values, dict):
                raise ConfigError(f"top-level key '{section}' must be a table")
            data[section] = dict(values)

    env = os.environ if environ is None else environ
    if env.get(ENV_DATA_ROOT):
        data.setdefault("harness", {})["dataset_root"] = env[ENV_DATA_ROOT]
    if env.get(ENV_LOG_LEVEL):
        data.setdefault("logging", {})["level"] = env[ENV_LOG_LEVEL]

    for text in overrides:
        section, key, value = parse_override(text)
        data.setdefault(section, {})[key] = value

    return ExperimentConfig.from_dict(data)
