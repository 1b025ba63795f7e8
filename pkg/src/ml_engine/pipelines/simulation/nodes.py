"""
Simulation Pipeline Nodes - synthetic ordinal panels with known ground truth
"""

import logging
from typing import Tuple

from app.core.dataset import ResponseDataset
from app.core.simulation import GroundTruth, planned_missing_mask, simulate
from app.schemas.ipgp_schemas import RunConfig

logger = logging.getLogger(__name__)


def simulate_datasets(run_config: RunConfig) -> Tuple[ResponseDataset, ResponseDataset, GroundTruth]:
    """
    Kedro node: draw the synthetic study for the configured seed

    The run seed overrides the simulation section's seed so one root seed
    drives the whole run.
    """
    config = run_config.simulation.model_copy(update={"seed": run_config.seed})
    logger.info(f"🔄 Simulating n={config.num_units}, T={config.num_periods}, J={config.num_items}, K={config.num_factors}")
    return simulate(config)


def apply_planned_missing(dataset: ResponseDataset, run_config: RunConfig) -> ResponseDataset:
    """Kedro node: keep two of every three sub-factor items per assessment when enabled"""
    if not run_config.planned_missing:
        return dataset
    return planned_missing_mask(dataset, seed=run_config.seed)
