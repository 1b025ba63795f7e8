"""
Shared fixtures: small simulated panels and scratch output directories
"""

import pytest

from app.core.simulation import simulate
from app.schemas.ipgp_schemas import SimulationConfig


@pytest.fixture
def small_config() -> SimulationConfig:
    """3 units, 6 items in 2 traits of 3, 12 daily assessments"""
    return SimulationConfig(num_units=3, num_periods=12, num_factors=2, num_items=6, seed=4)


@pytest.fixture
def small_panel(small_config):
    return simulate(small_config)


@pytest.fixture
def full_panel(small_config):
    """Every observation of the small study in one training set"""
    return simulate(small_config.model_copy(update={"train_fraction": 1.0}))
