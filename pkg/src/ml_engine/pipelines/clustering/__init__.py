"""
Clustering Pipeline - group units by their estimated task correlation

Produces:
- cluster_result: assignments, centroids and cost history of CMD k-means
- residual_profiles: centroid minus population correlation, averaged by trait
- cluster_report: clusters.json contents
"""

from kedro.pipeline import Pipeline, node

from ..training import create_data_pipeline
from .nodes import cluster_report, cluster_units, fit_cluster_model, profile_clusters, unit_correlations


def create_clustering_pipeline() -> Pipeline:
    """
    Create the cluster pipeline

    Inputs:
        run_config: resolved RunConfig

    Returns:
        Kedro Pipeline object
    """
    return create_data_pipeline() + Pipeline([
        node(
            func=fit_cluster_model,
            inputs=["run_config", "input_datasets"],
            outputs="cluster_model",
            name="fit_cluster_model",
            tags=["clustering", "training"]
        ),
        node(
            func=unit_correlations,
            inputs="cluster_model",
            outputs=["unit_correlations", "population_correlation"],
            name="estimate_correlations",
            tags=["clustering"]
        ),
        node(
            func=cluster_units,
            inputs=["run_config", "unit_correlations", "population_correlation"],
            outputs="cluster_result",
            name="kmeans_cmd",
            tags=["clustering"]
        ),
        node(
            func=profile_clusters,
            inputs=["cluster_result", "population_correlation", "cluster_model", "input_datasets"],
            outputs="residual_profiles",
            name="residual_profiles",
            tags=["clustering"]
        ),
        node(
            func=cluster_report,
            inputs=["cluster_result", "residual_profiles"],
            outputs="cluster_report",
            name="cluster_report",
            tags=["clustering"]
        ),
    ])


__all__ = ["create_clustering_pipeline"]
