"""
Pytest configuration and shared fixtures for the flexfl tests.
"""

import math
import os
import sys
import tempfile
from dataclasses import replace
from typing import Optional, Sequence

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from flexfl.config import DEFAULTS, ModulationScheme, RadioConfig, TimingBudget
from flexfl.logger import configure
from flexfl.services.phy import ChannelRealization, ClientProfile, Scenario
from flexfl.services.synthetic import quadratic_task, synth_task

# Quiet console, no log files
configure(level="WARNING", console_enabled=False)


# =============================================================================
# TEMPORARY DIRECTORY FIXTURES
# =============================================================================

@pytest.fixture
def temp_dir():
    """Create a temporary directory for test files."""
    with tempfile.TemporaryDirectory() as tmpdir:
        yield tmpdir


# =============================================================================
# CONFIG FIXTURES
# =============================================================================

@pytest.fixture
def default_config():
    """Built-in reference configuration."""
    return DEFAULTS


@pytest.fixture
def quick_config(temp_dir):
    """Reference radio with a small quadratic task, two rounds and output under temp_dir."""
    return DEFAULTS.replace(
        training=replace(DEFAULTS.training, task="quadratic", rounds=2, synthetic_dim=4),
        harness=replace(DEFAULTS.harness, seeds=(0, 1), allocators=("optimal", "baseline3"),
                        k_values=(4,), l_values=(2, 4), workers=2, sweep_draws=1,
                        out_dir=os.path.join(temp_dir, "results"),
                        dataset_root=os.path.join(temp_dir, "mnist")),
        logging=replace(DEFAULTS.logging, file_enabled=False),
    )


@pytest.fixture
def toml_file(temp_dir):
    """Factory fixture writing a TOML config file."""
    def _create(text: str, name: str = "config.toml") -> str:
        path = os.path.join(temp_dir, name)
        with open(path, 'w', encoding='utf-8') as f:
            f.write(text)
        return path
    return _create


# =============================================================================
# SCENARIO FIXTURES
# =============================================================================

@pytest.fixture
def make_scenario():
    """
    Factory for small scenarios with clients on a line 50 m, 100 m, ... from the BS.

    Keyword arguments override the radio, modulation and timing fields.
    """
    def _create(
        num_clients: int = 3,
        num_subchannels: int = 2,
        rates: Sequence[float] = (0.0, 2.0, 4.0, 6.0),
        bandwidth: float = 100e6,
        dataset_sizes: Optional[Sequence[int]] = None,
        compute_speeds: Optional[Sequence[float]] = None,
        power_budget: float = 0.1,
        model_params: int = 101_770,
        **timing,
    ) -> Scenario:
        sizes = dataset_sizes or [300 + 50 * m for m in range(num_clients)]
        speeds = compute_speeds or [9.0 + m for m in range(num_clients)]
        clients = tuple(
            ClientProfile(
                id=m,
                position=(50.0 * (m + 1), 0.0, 1.5),
                dataset_size=int(sizes[m]),
                compute_speed=float(speeds[m]),
                power_budget=power_budget,
            )
            for m in range(num_clients)
        )
        return Scenario(
            clients=clients,
            scheme=ModulationScheme(rates=tuple(rates)),
            radio=RadioConfig(bandwidth=bandwidth, num_subchannels=num_subchannels),
            timing=TimingBudget(**timing),
            model_params=model_params,
        )
    return _create


@pytest.fixture
def fixed_channels():
    """Factory turning an explicit gain matrix into a channel realization."""
    def _create(gains, round_index: int = 1) -> ChannelRealization:
        return ChannelRealization(np.asarray(gains, dtype=float), round_index)
    return _create


@pytest.fixture
def strong_gain():
    """Gain at which every mode of the reference set fits a 20 dBm budget."""
    return 1e-8


# =============================================================================
# TASK FIXTURES
# =============================================================================

@pytest.fixture
def identity_task():
    """F(w) = 1/2 ||w||^2: X = sqrt(d) I, y = 0, single client, full batch."""
    d = 3
    X = math.sqrt(d) * np.eye(d)
    return quadratic_task(X, np.zeros(d), sizes=[d], learning_rate=0.1,
                          initial_params=np.ones(d), full_batch=True)


@pytest.fixture
def small_quadratic():
    """Four-client quadratic task with a known optimum."""
    return synth_task("quadratic", dim=5, conditioning=4.0, seed=3,
                      sizes=[40, 50, 60, 70], batch_size=16)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: needs the MNIST files or long training")
