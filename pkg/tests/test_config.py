"""
Unit tests for flexfl/config.py.

Tests cover:
- Reference defaults and derived radio quantities
- Section validation
- TOML loading, dB keys, environment and command-line overrides
"""

import os

import pytest

from flexfl.config import (
    DEFAULTS,
    ENV_DATA_ROOT,
    ENV_LOG_LEVEL,
    ConfigError,
    ExperimentConfig,
    ModelConfig,
    ModulationScheme,
    RadioConfig,
    SolverConfig,
    TimingBudget,
    load_config,
    parse_override,
)

CONFIGS_DIR = os.path.join(os.path.dirname(__file__), '..', 'configs')


class TestDefaults:
    """Tests for the built-in reference values."""

    def test_reference_values(self):
        assert DEFAULTS.geometry.num_clients == 10
        assert DEFAULTS.radio.num_subchannels == 16
        assert DEFAULTS.timing.round_duration == 10.0
        assert DEFAULTS.timing.max_local_iterations == 10
        assert DEFAULTS.modulation.rates == (0.0, 2.0, 4.0, 6.0)
        assert DEFAULTS.clients.power_budget == pytest.approx(0.1)

    def test_symbol_rate_and_noise(self):
        """Test that each subchannel carries B_w / K symbols per second."""
        radio = RadioConfig(bandwidth=100e6, num_subchannels=16)
        assert radio.symbol_rate == pytest.approx(6.25e6)
        assert radio.noise_power == pytest.approx(1.2589e-20 * 6.25e6, rel=1e-4)

    def test_model_presets(self):
        assert ModelConfig().num_params == 101_770
        assert ModelConfig(preset="cnn").num_params == 421_400
        assert ModelConfig(params=5000).num_params == 5000

    def test_log_margin(self):
        assert ModulationScheme().log_margin == pytest.approx(12.2061, rel=1e-4)


class TestValidation:
    """Tests for section __post_init__ checks."""

    def test_rates_must_start_at_zero(self):
        with pytest.raises(ConfigError):
            ModulationScheme(rates=(2.0, 4.0))

    def test_rates_must_increase(self):
        with pytest.raises(ConfigError):
            ModulationScheme(rates=(0.0, 4.0, 2.0))

    def test_target_ber_below_beta1(self):
        with pytest.raises(ConfigError):
            ModulationScheme(target_ber=0.5)

    def test_round_must_exceed_downlink(self):
        with pytest.raises(ConfigError):
            TimingBudget(round_duration=0.1, downlink_delay=0.1)

    def test_subchannels_positive(self):
        with pytest.raises(ConfigError):
            RadioConfig(num_subchannels=0)

    def test_search_nodes_nonnegative(self):
        with pytest.raises(ConfigError, match="search_nodes"):
            SolverConfig(search_nodes=-1)


class TestLoading:
    """Tests for load_config() and parse_override()."""

    def test_reference_file_matches_defaults(self):
        config = load_config(os.path.join(CONFIGS_DIR, 'defaults.toml'), environ={})
        assert config.radio.pathloss_ref == pytest.approx(DEFAULTS.radio.pathloss_ref)
        assert config.radio.noise_density == pytest.approx(DEFAULTS.radio.noise_density)
        assert config.clients.power_budget == pytest.approx(DEFAULTS.clients.power_budget)
        assert config.radio.bandwidth == DEFAULTS.radio.bandwidth
        assert config.harness.allocators == ("optimal", "baseline1", "baseline2", "baseline3")
        assert config.harness == DEFAULTS.harness
        assert config.harness.k_values == (2, 4, 6, 8, 12, 16)
        assert config.solver == DEFAULTS.solver

    def test_no_file_gives_defaults(self):
        assert load_config(environ={}) == ExperimentConfig()

    def test_missing_file(self, temp_dir):
        with pytest.raises(ConfigError, match="not found"):
            load_config(os.path.join(temp_dir, "absent.toml"), environ={})

    def test_unknown_key(self, toml_file):
        path = toml_file("[radio]\nnum_subchanels = 4\n")
        with pytest.raises(ConfigError, match="num_subchanels"):
            load_config(path, environ={})

    def test_unknown_section(self, toml_file):
        with pytest.raises(ConfigError, match="unknown config section"):
            load_config(toml_file("[radios]\nx = 1\n"), environ={})

    def test_invalid_value(self, toml_file):
        with pytest.raises(ConfigError):
            load_config(toml_file("[timing]\nmax_local_iterations = 0\n"), environ={})

    def test_db_keys(self, toml_file):
        config = load_config(toml_file("[clients]\npower_budget_dbm = 30.0\n"), environ={})
        assert config.clients.power_budget == pytest.approx(1.0)

    def test_overrides_applied_last(self, toml_file):
        path = toml_file("[radio]\nnum_subchannels = 4\n")
        config = load_config(path, ["radio.num_subchannels=8", "harness.allocators=[\"baseline1\"]"], environ={})
        assert config.radio.num_subchannels == 8
        assert config.harness.allocators == ("baseline1",)

    def test_environment(self):
        config = load_config(environ={ENV_DATA_ROOT: "/data/mnist", ENV_LOG_LEVEL: "DEBUG"})
        assert config.harness.dataset_root == "/data/mnist"
        assert config.logging.level == "DEBUG"

    def test_parse_override(self):
        assert parse_override("radio.num_subchannels=8") == ("radio", "num_subchannels", 8)
        assert parse_override("training.task=quadratic") == ("training", "task", "quadratic")
        assert parse_override("solver.polish=false") == ("solver", "polish", False)

    def test_bad_override(self):
        with pytest.raises(ConfigError):
            parse_override("num_subchannels=8")
        with pytest.raises(ConfigError):
            parse_override("radio.num_subchannels")

    def test_round_trip_through_dict(self):
        config = DEFAULTS.replace(radio=RadioConfig(num_subchannels=4))
        assert ExperimentConfig.from_dict(config.to_dict()) == config
