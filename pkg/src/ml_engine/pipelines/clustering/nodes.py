"""
Clustering Pipeline Nodes - idiographic correlation profiles under CMD
"""

import logging
from typing import Dict, Optional, Tuple

import numpy as np
import pandas as pd

from app.core.clustering import ClusterResult, kmeans_cmd, residual_profiles
from app.core.dataset import ResponseDataset
from app.core.svi_engine import FittedModel
from app.models.ipgp_models import ModelFitter, covariance_to_correlation, estimated_task_correlation
from app.schemas.ipgp_schemas import ClusterReport, RunConfig

from ..training.nodes import prior_loadings_for, train_config_for

logger = logging.getLogger(__name__)


def fit_cluster_model(run_config: RunConfig, input_datasets: Dict[str, Optional[ResponseDataset]]) -> FittedModel:
    """Kedro node: fit the configured model on all input observations"""
    data = input_datasets["data"]
    fitter = ModelFitter(
        data,
        train_config_for(run_config),
        prior_loadings=prior_loadings_for(run_config, data),
        two_stage=run_config.two_stage,
    )
    return fitter.fit(run_config.model)


def unit_correlations(cluster_model: FittedModel) -> Tuple[Dict[str, np.ndarray], np.ndarray]:
    """Kedro node: per-unit task correlations and the population correlation"""
    per_unit = {unit: estimated_task_correlation(cluster_model, unit) for unit in cluster_model.instance.unit_ids}
    population = covariance_to_correlation(cluster_model.task_covariance(None))
    return per_unit, population


def cluster_units(run_config: RunConfig, correlations: Dict[str, np.ndarray], population: np.ndarray) -> ClusterResult:
    """Kedro node: CMD k-means over the unit correlation matrices"""
    k = min(run_config.clusters, len(correlations))
    if k < run_config.clusters:
        logger.warning(f"⚠️ Only {len(correlations)} units; clustering with k={k}")
    return kmeans_cmd(
        correlations,
        k=k,
        restarts=run_config.cluster_restarts,
        seed=run_config.seed,
        centroid_rule=run_config.centroid_rule,
        population=population,
    )


def _trait_map(dataset: ResponseDataset) -> Dict[str, str]:
    if dataset.trait_map:
        return dict(dataset.trait_map)
    logger.warning("⚠️ No trait column; residual profiles are item-level")
    return {item: item for item in dataset.item_ids}


def profile_clusters(
    cluster_result: ClusterResult,
    population: np.ndarray,
    cluster_model: FittedModel,
    input_datasets: Dict[str, Optional[ResponseDataset]],
) -> pd.DataFrame:
    """
    Kedro node: trait-level residual correlation per cluster in long format

    Columns: cluster, trait, other_trait, residual
    """
    trait_map = _trait_map(input_datasets["data"])
    frames = []
    for cluster, profile in enumerate(residual_profiles(cluster_result, population, trait_map, cluster_model.instance.item_ids)):
        long = profile.stack().rename("residual").reset_index()
        long.columns = ["trait", "other_trait", "residual"]
        long.insert(0, "cluster", cluster)
        frames.append(long)
    return pd.concat(frames, ignore_index=True)


def cluster_report(cluster_result: ClusterResult, residual_profile_table: pd.DataFrame) -> ClusterReport:
    """Kedro node: contents of clusters.json"""
    return ClusterReport(
        k=cluster_result.k,
        assignments=cluster_result.assignments,
        total_cost=cluster_result.total_cost,
        cost_history=cluster_result.cost_history,
        centroid_rule=cluster_result.centroid_rule,
        trait_order=sorted(residual_profile_table["trait"].unique().tolist()),
    )
